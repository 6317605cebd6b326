"""Backend selection for the policy-network kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``NUMERLA_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("NUMERLA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

backend = _compiled if _compiled is not None else _kernels_py
BACKEND_NAME = "compiled" if _compiled is not None else "python"

log_softmax = backend.log_softmax
score_grad = backend.score_grad

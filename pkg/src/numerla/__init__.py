from .kernels import BACKEND_NAME  # noqa: F401

"""Time the compiled and numpy policy kernels on adaptation-sized batches.

Usage: python3 benchmarks/bench_kernels.py [--rows 640 1280] [--repeat 50]
"""
import argparse
import time

import numpy as np

from numerla import kernels
from numerla.policy import DEFAULT_ARCH


def _time(fn, repeat):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, nargs="+", default=[1, 64, 640, 6400])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    dims = DEFAULT_ARCH.dims
    rng = np.random.default_rng(args.seed)
    theta = rng.normal(scale=0.3, size=DEFAULT_ARCH.n_params)
    names = sorted(kernels.BACKENDS)
    if "compiled" not in names:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"arch {dims}, best of {args.repeat}")
    print(f"{'kernel':12s} {'rows':>6s} " + " ".join(f"{n + ' us':>12s}" for n in names)
          + ("   speedup" if len(names) > 1 else ""))
    for n in args.rows:
        X = rng.normal(size=(n, dims[0]))
        acts = rng.integers(dims[2], size=n).astype(np.int64)
        w = rng.normal(size=n)
        for kname in ("log_softmax", "score_grad"):
            times = {}
            for b in names:
                mod = kernels.BACKENDS[b]
                if kname == "log_softmax":
                    times[b] = _time(lambda: mod.log_softmax(theta, X, *dims), args.repeat)
                else:
                    times[b] = _time(lambda: mod.score_grad(theta, X, acts, w, *dims), args.repeat)
            line = f"{kname:12s} {n:6d} " + " ".join(f"{times[b] * 1e6:12.1f}" for b in names)
            if len(names) > 1:
                line += f"   {times['python'] / times['compiled']:6.2f}x"
            print(line)


if __name__ == "__main__":
    main()

"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--paths 10000] [--steps 50] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from relperf import kernels
from relperf.kernels import _kernels_py

try:
    from relperf.kernels import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(n_paths, n_steps, rng):
    dt = 1.0 / n_steps
    shape = (n_paths, n_steps)
    dw, dw0 = rng.normal(0, np.sqrt(dt), shape), rng.normal(0, np.sqrt(dt), shape)
    pi, pi0 = rng.normal(size=shape), rng.normal(size=shape)
    z2 = rng.normal(size=shape) ** 2
    expo = rng.normal(0, 300, n_paths * n_steps)
    w, w0 = rng.normal(size=n_paths), rng.normal(size=n_paths)
    return {
        "euler_wealth": lambda impl: kernels.euler_wealth(0.0, pi, pi0, 0.1, 0.2, dw, dw0, dt, impl=impl),
        "bmo_proxy": lambda impl: kernels.bmo_proxy(z2, dt, impl=impl),
        "clamped_neg_exp": lambda impl: kernels.clamped_neg_exp(expo, impl=impl),
        "poly2_features": lambda impl: kernels.poly2_features(w, w0, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'python [ms]':>13}{'compiled [ms]':>15}{'speedup':>10}")
    for name, fn in cases(args.paths, args.steps, rng).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if _compiled is None:
            print(f"{name:<18}{t_py:>13.2f}{'n/a':>15}{'n/a':>10}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_py:>13.2f}{t_c:>15.2f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()

"""Compare the numba kernels with the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--n 100000] [--repeat 5]

Each kernel is run once per backend to trigger compilation, then timed as
the best of ``--repeat`` runs. Outputs are checked for agreement.
"""

import argparse
import time

import numpy as np

from contcrm import kernels
from contcrm._accel import HAVE_NUMBA, backend


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n, m, rng):
    a = rng.lognormal(0.5, 0.4, n)
    mu = rng.uniform(0.5, 3.0, n)
    sigma = 0.5
    w = rng.lognormal(0.0, 1.5, n)
    eta = rng.standard_normal((n, m))
    anchors = np.linspace(0.5, 3.0, m)
    P = np.full((n, m), 1.0 / m)
    idx = rng.integers(0, n, size=(100, n))
    y = rng.standard_normal(n)
    return {
        "normal_logpdf_grad": lambda: kernels.normal_logpdf_grad(a, mu, sigma),
        "lognormal_logpdf_grad": lambda: kernels.lognormal_logpdf_grad(a, mu, sigma),
        "soft_clip": lambda: kernels.soft_clip(w, 10.0, 4.32),
        "ccp_forward": lambda: kernels.ccp_forward(eta, anchors, 10.0),
        "ccp_backward": lambda: kernels.ccp_backward(P, anchors, mu, 10.0, y),
        "weight_moments": lambda: kernels.weight_moments(w, y),
        "bootstrap_sums(100)": lambda: kernels.bootstrap_sums(y * w, w, idx),
    }


def _flat(out):
    if isinstance(out, tuple):
        return [np.asarray(o, dtype=np.float64) for o in out]
    return [np.asarray(out, dtype=np.float64)]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=100_000)
    parser.add_argument("--m", type=int, default=10)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
    rng = np.random.default_rng(0)
    table = cases(args.n, args.m, rng)
    print(f"n={args.n} m={args.m} best of {args.repeat}")
    print(f"{'kernel':24s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s} {'max abs diff':>13s}")
    for name, fn in table.items():
        with backend("numpy"):
            ref = _flat(fn())
            t_np = best_time(fn, args.repeat)
        if HAVE_NUMBA:
            with backend("numba"):
                got = _flat(fn())
                t_nb = best_time(fn, args.repeat)
            diff = max(float(np.nanmax(np.abs(np.where(np.isfinite(r), r - g, 0.0)))) for r, g in zip(ref, got))
            print(f"{name:24s} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:8.2f} {diff:13.2e}")
        else:
            print(f"{name:24s} {1e3 * t_np:11.3f} {'-':>11s}")


if __name__ == "__main__":
    main()

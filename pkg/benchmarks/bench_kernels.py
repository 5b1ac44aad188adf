"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--n 2000000] [--repeat 5]

Both paths run in the same process (the dispatch flag only picks the
default), so the timings are directly comparable.
"""
import argparse
import time

import numpy as np

from mergeprobe import kernels
from mergeprobe.linopt import fit_normalizer


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=2_000_000, help="flat task-vector length")
    ap.add_argument("--rows", type=int, default=171)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(args.seed)
    a = rng.standard_normal(args.n).astype(np.float32)
    b = rng.standard_normal(args.n).astype(np.float32)
    X = fit_normalizer(rng.standard_normal((args.rows, 28))).apply(rng.standard_normal((args.rows, 28)))
    w = np.full(28, 1 / 28) + 0.05 * rng.standard_normal(28)
    p = X @ (w / w.sum())
    Xc, pc = X - X.mean(0), p - p.mean()
    fit_args = (Xc, pc, np.full(28, 1 / 28), 0.01, 1000, 50, 1e-4, 0.9, 0.999, 1e-8, True, 0.0)

    cases = [
        ("pair_sums", lambda: kernels.pair_sums_numpy(a, b), lambda: kernels.pair_sums_numba(a, b)),
        ("unit_sums", lambda: kernels.unit_sums_numpy(a, b, 3.0, 4.0), lambda: kernels.unit_sums_numba(a, b, 3.0, 4.0)),
        ("fit_loop", lambda: kernels.fit_loop_numpy(*fit_args), lambda: kernels.fit_loop_numba(*fit_args)),
    ]
    print(f"default path: {'numba' if kernels.NUMBA_ENABLED else 'numpy'}")
    print(f"{'kernel':<10} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  max |diff|")
    for name, f_np, f_nb in cases:
        t_np, r_np = best_of(f_np, args.repeat)
        if kernels.HAVE_NUMBA:
            f_nb()  # compile outside the timing
            t_nb, r_nb = best_of(f_nb, args.repeat)
        else:
            t_nb, r_nb = float("nan"), r_np
        if name == "fit_loop":
            diff = float(np.max(np.abs(r_np[0] - r_nb[0])))
        else:
            diff = max(abs(x - y) / max(abs(x), 1e-300) for x, y in zip(r_np, r_nb))
        print(f"{name:<10} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}  {diff:.2e}")


if __name__ == "__main__":
    main()

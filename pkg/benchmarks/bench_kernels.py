"""Time the numpy and numba kernel paths on training-sized inputs.

    python benchmarks/bench_kernels.py [--n 2000] [--repeat 200]

Prints one line per kernel with the best-of-repeat time for each backend and
the max absolute difference between their outputs.
"""

import argparse
import timeit

import numpy as np

from ediv import _kernels


def cases(n, d_x, d_r, d_h, rng):
    X = rng.normal(size=(n, d_x))
    w = rng.random(n)
    w /= w.sum()
    eps = rng.normal(size=n)
    R = rng.normal(size=(n, d_r))
    Z = rng.normal(size=(n, d_h))
    A = _kernels.np_elu(Z)
    up = rng.normal(size=(n, d_h))
    dgx, dgr = rng.normal(size=d_x), rng.normal(size=d_r)
    return {
        "weighted_mean_cov": (X, w),
        "elu": (Z,),
        "elu_backward": (Z, A, up),
        "env_moments": (eps, w, X, R),
        "env_moments_adjoint": (eps, w, X, R, 0.3, -0.2, dgx, dgr),
    }


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--dx", type=int, default=5)
    ap.add_argument("--dr", type=int, default=5)
    ap.add_argument("--dh", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if _kernels.numba_backend is None:
        raise SystemExit("numba is not installed; only the numpy path is available")

    rng = np.random.default_rng(0)
    print(f"n={args.n} d_x={args.dx} d_r={args.dr} d_h={args.dh}, best of {args.repeat}")
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, inputs in cases(args.n, args.dx, args.dr, args.dh, rng).items():
        f_np = getattr(_kernels.numpy_backend, name)
        f_nb = getattr(_kernels.numba_backend, name)
        f_nb(*inputs)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=1, repeat=args.repeat)) * 1e6
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=1, repeat=args.repeat)) * 1e6
        diff = max_diff(f_np(*inputs), f_nb(*inputs))
        print(f"{name:<22}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>10.2f}{diff:>14.2e}")


if __name__ == "__main__":
    main()

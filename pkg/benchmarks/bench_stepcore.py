"""Compare the compiled stepping core against the numpy fallback.

Times integrate() on the diagonal quartic family with both backends and
checks that the trajectories agree to roundoff. Run as

    python3 benchmarks/bench_stepcore.py [--dim 2] [--horizon 50] [--dt 0.005]
"""

import argparse
import time

import numpy as np

from morseflow import _stepcore_py, _stepping
from morseflow.dynamics import HistoryState, integrate, toy_1d, toy_2d
from morseflow.kernels import KernelPair, exp_kernel


def build_problem(dim):
    A = exp_kernel(1.0, dim=dim)
    pair = KernelPair(A, exp_kernel(2.0, dim=dim, s_max=A.s_max))
    P = toy_1d() if dim == 1 else toy_2d()
    x0 = np.full(dim, 0.4)
    return P, pair, x0


def time_backend(run_steps, P, pair, x0, eps, horizon, dt, repeat):
    saved = _stepping.run_steps
    _stepping.run_steps = run_steps
    try:
        best, timeline = float("inf"), None
        for _ in range(repeat):
            t0 = time.perf_counter()
            tr = integrate(HistoryState(x=x0, eta=None), P, pair, eps,
                           horizon, dt)
            best = min(best, time.perf_counter() - t0)
            timeline = tr.timeline
        return best, timeline
    finally:
        _stepping.run_steps = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dim", type=int, choices=(1, 2), default=2)
    ap.add_argument("--horizon", type=float, default=50.0)
    ap.add_argument("--dt", type=float, default=0.005)
    ap.add_argument("--eps", type=float, default=0.01)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    P, pair, x0 = build_problem(args.dim)
    n_steps = int(round(args.horizon / args.dt))
    print(f"dim={args.dim} steps={n_steps} dt={args.dt} eps={args.eps} "
          f"(best of {args.repeat})")

    t_py, tl_py = time_backend(_stepcore_py.run_steps, P, pair, x0,
                               args.eps, args.horizon, args.dt, args.repeat)
    print(f"  python   {t_py:8.3f} s   {n_steps / t_py:12.0f} steps/s")

    if not _stepping.HAVE_COMPILED:
        print("  compiled core not built; nothing to compare")
        return

    from morseflow import _stepcore

    t_c, tl_c = time_backend(_stepcore.run_steps, P, pair, x0,
                             args.eps, args.horizon, args.dt, args.repeat)
    print(f"  compiled {t_c:8.3f} s   {n_steps / t_c:12.0f} steps/s")
    print(f"  speedup  {t_py / t_c:8.2f}x")
    if np.array_equal(tl_py, tl_c):
        print("  trajectories bit-identical")
    else:
        gap = float(np.max(np.abs(tl_py - tl_c)))
        # summation order differs (BLAS vs plain loop), so ulp-level
        # disagreement accumulates on long runs
        verdict = "roundoff only" if gap < 1e-12 else "MISMATCH"
        print(f"  max |diff| = {gap:.3e} ({verdict})")


if __name__ == "__main__":
    main()

"""Low-discrepancy sampling helpers and canonical history profiles."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.stats import qmc

from .kernels import HistoryFunction, KernelSpec, weighted_norm_sq


def halton(n: int, d: int, seed: int = 0) -> np.ndarray:
    """n scrambled Halton points in [0, 1]^d."""
    return qmc.Halton(d=d, scramble=True, seed=seed).random(n)


def sample_box(n: int, lo, hi, seed: int = 0) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return lo + (hi - lo) * halton(n, len(lo), seed)


def smooth_profile(grid: np.ndarray) -> np.ndarray:
    """A canonical smooth memory shape: zero at s=0, exponential tail."""
    return (1.0 - np.exp(-2.0 * grid)) * np.exp(-grid)


def profile_history(A: KernelSpec, direction, norm: float,
                    kind: str = "smooth", node: Optional[int] = None,
                    n_grid: int = 2001,
                    grid: Optional[np.ndarray] = None) -> HistoryFunction:
    """A history function along a fixed direction scaled to a target norm.

    kind "smooth" uses the canonical shape; kind "bump" puts a piecewise
    linear hat at the given interior grid node (never node 0, so the head
    constraint holds). An explicit grid pins the quadrature nodes so the
    norm matches downstream trapezoid evaluations exactly.
    """
    direction = np.atleast_1d(np.asarray(direction, dtype=float))
    if grid is None:
        grid = np.linspace(0.0, A.s_max, n_grid)
    else:
        grid = np.asarray(grid, dtype=float)
    n_grid = len(grid)
    if kind == "smooth":
        shape = smooth_profile(grid)
    elif kind == "bump":
        if node is None or not 1 <= node < n_grid:
            raise ValueError("bump node must be an interior grid index")
        shape = np.zeros(n_grid)
        shape[node] = 1.0
    else:
        raise ValueError(f"unknown profile kind {kind!r}")
    vals = shape[:, None] * direction
    eta = HistoryFunction(grid, vals)
    if norm == 0.0:
        return HistoryFunction(grid, np.zeros_like(vals))
    nsq = weighted_norm_sq(eta, A)
    if nsq <= 0.0:
        raise ValueError("profile has zero weighted norm; cannot scale")
    return HistoryFunction(grid, vals * (norm / math.sqrt(nsq)))

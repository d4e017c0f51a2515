"""Equilibria of the perturbed field, their classification, and continuation.

The perturbed drift is f_eps(x) = grad F(x) + eps (int M) x; its equilibria
move smoothly in eps while hyperbolicity persists, and every routine here
rejects spectra that approach the imaginary axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimChange, LeftBlock, NonHyperbolic
from .kernels import KernelPair
from .dynamics import Potential

HYPERBOLICITY_MARGIN = 1e-6
DEDUP_RADIUS = 1e-6
NEWTON_MAX_ITERS = 50
# ball proxy for the eps=0 isolating neighbourhood used by continuation
BRANCH_RADIUS_FACTOR = 0.25


@dataclass
class Equilibrium:
    """A hyperbolic rest point of the perturbed field."""

    point: np.ndarray
    eps: float
    jacobian: np.ndarray
    spectrum: np.ndarray
    dims: Tuple[int, int, int, int]
    residual: float

    # construction context, attached by find_equilibria / continue_branch
    potential: Optional[Potential] = None
    kernels: Optional[KernelPair] = None

    @property
    def unstable_dim(self) -> int:
        u1, u2, _, _ = self.dims
        return u1 + 2 * u2

    @property
    def stable_dim(self) -> int:
        _, _, s1, s2 = self.dims
        return s1 + 2 * s2

    def as_dict(self) -> dict:
        return {
            "point": self.point.tolist(),
            "eps": self.eps,
            "jacobian": self.jacobian.tolist(),
            "spectrum_re": np.real(self.spectrum).tolist(),
            "spectrum_im": np.imag(self.spectrum).tolist(),
            "dims": list(self.dims),
            "residual": self.residual,
        }


def perturbed_field(P: Potential, kernels: KernelPair, eps: float):
    """(f_eps, Df_eps) callables for the drift with the mean-memory shift."""
    Mtot = kernels.constants.M_total

    def f(x):
        return P.grad_F(x) + eps * (Mtot @ x)

    def Df(x):
        return P.hess_F(x) + eps * Mtot

    return f, Df


def classify_spectrum(spectrum: np.ndarray, point: np.ndarray,
                      margin: float = HYPERBOLICITY_MARGIN) -> Tuple[int, int, int, int]:
    """Counts (u1, u2, s1, s2): real unstable, complex unstable pairs, real
    stable, complex stable pairs. Raises NonHyperbolic near the axis."""
    re = np.real(spectrum)
    im = np.imag(spectrum)
    if np.any(np.abs(re) < margin):
        raise NonHyperbolic(point, float(np.min(np.abs(re))))
    im_tol = 1e-9 * (1.0 + float(np.max(np.abs(spectrum))))
    real_mask = np.abs(im) <= im_tol
    u1 = int(np.sum(real_mask & (re > 0)))
    s1 = int(np.sum(real_mask & (re < 0)))
    # complex eigenvalues come in conjugate pairs; count each pair once
    u2 = int(np.sum(~real_mask & (re > 0) & (im > 0)))
    s2 = int(np.sum(~real_mask & (re < 0) & (im > 0)))
    return u1, u2, s1, s2


def _make_equilibrium(x: np.ndarray, P: Potential, kernels: KernelPair, eps: float,
                      margin: float) -> Equilibrium:
    f, Df = perturbed_field(P, kernels, eps)
    J = np.asarray(Df(x), dtype=float)
    spectrum = np.linalg.eigvals(J)
    order = np.lexsort((np.imag(spectrum), -np.real(spectrum)))
    spectrum = spectrum[order]
    dims = classify_spectrum(spectrum, x, margin)
    return Equilibrium(
        point=x.copy(),
        eps=eps,
        jacobian=J,
        spectrum=spectrum,
        dims=dims,
        residual=float(np.linalg.norm(f(x))),
        potential=P,
        kernels=kernels,
    )


def _newton(f, Df, x0: np.ndarray, bound: float) -> Optional[np.ndarray]:
    x = x0.astype(float).copy()
    for _ in range(NEWTON_MAX_ITERS):
        fx = f(x)
        nrm = float(np.linalg.norm(fx))
        if nrm <= 1e-13 * (1.0 + float(np.linalg.norm(x))):
            return x
        try:
            step = np.linalg.solve(Df(x), fx)
        except np.linalg.LinAlgError:
            return None
        x = x - step
        if not np.all(np.isfinite(x)) or float(np.max(np.abs(x))) > bound:
            return None
    return None


def find_equilibria(P: Potential, kernels: KernelPair, eps: float,
                    box, grid_density: int = 11,
                    hyperbolicity_margin: float = HYPERBOLICITY_MARGIN) -> List[Equilibrium]:
    """Locate all equilibria of f_eps inside a box by seeded Newton iteration.

    Parameters
    ----------
    P, kernels, eps
        System data; the drift is grad F + eps (int M) x.
    box
        Either a scalar half-width or a (lo, hi) pair of d-vectors.
    grid_density : int
        Seed nodes per axis.

    Returns
    -------
    list of Equilibrium
        Deduplicated, classified, sorted lexicographically by coordinates.

    Raises
    ------
    NonHyperbolic
        If any root has an eigenvalue real part inside the margin.
    """
    d = P.dim
    if np.isscalar(box):
        lo, hi = -float(box) * np.ones(d), float(box) * np.ones(d)
    else:
        lo = np.broadcast_to(np.asarray(box[0], dtype=float), (d,))
        hi = np.broadcast_to(np.asarray(box[1], dtype=float), (d,))
    f, Df = perturbed_field(P, kernels, eps)
    axes = [np.linspace(lo[i], hi[i], grid_density) for i in range(d)]
    seeds = np.stack(np.meshgrid(*axes), axis=-1).reshape(-1, d)
    bound = 2.0 * float(np.max(np.abs(np.concatenate([lo, hi])))) + 1.0

    roots: List[np.ndarray] = []
    for seed in seeds:
        x = _newton(f, Df, seed, bound)
        if x is None:
            continue
        if np.any(x < lo - 1e-8) or np.any(x > hi + 1e-8):
            continue
        if all(float(np.linalg.norm(x - r)) > DEDUP_RADIUS for r in roots):
            roots.append(x)

    roots.sort(key=lambda r: tuple(np.round(r, 9)))
    return [_make_equilibrium(x, P, kernels, eps, hyperbolicity_margin) for x in roots]


def continue_branch(e0: Equilibrium, eps_list: Sequence[float]) -> List[Equilibrium]:
    """Continue one equilibrium over an increasing eps schedule.

    Secant predictor plus Newton corrector. The branch must stay inside the
    isolating neighbourhood of the starting point (a ball proxy of radius
    0.25 (1 + |e0|)) and keep its stability classification.

    Raises
    ------
    LeftBlock
        If a branch point drifts out of the neighbourhood.
    DimChange
        If the classification changes along the branch.
    """
    if e0.potential is None or e0.kernels is None:
        raise ValueError("equilibrium carries no potential/kernel context")
    eps_list = [float(e) for e in eps_list]
    if not eps_list or not math.isclose(eps_list[0], e0.eps, abs_tol=1e-12):
        raise ValueError("eps_list must start at the equilibrium's own eps")
    if any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly increasing")

    P, kernels = e0.potential, e0.kernels
    radius = BRANCH_RADIUS_FACTOR * (1.0 + float(np.linalg.norm(e0.point)))
    bound = float(np.max(np.abs(e0.point))) + 2.0 * radius + 1.0

    branch = [e0]
    for i, eps in enumerate(eps_list[1:], start=1):
        prev = branch[-1].point
        if i >= 2:
            d_eps_old = eps_list[i - 1] - eps_list[i - 2]
            slope = (branch[-1].point - branch[-2].point) / d_eps_old
            guess = prev + slope * (eps - eps_list[i - 1])
        else:
            guess = prev
        f, Df = perturbed_field(P, kernels, eps)
        x = _newton(f, Df, guess, bound)
        if x is None:
            raise LeftBlock(f"corrector failed to converge at eps={eps:.4g}")
        if float(np.linalg.norm(x - e0.point)) > radius:
            raise LeftBlock(
                f"branch drifted {np.linalg.norm(x - e0.point):.3g} > {radius:.3g} "
                f"at eps={eps:.4g}"
            )
        e = _make_equilibrium(x, P, kernels, eps, HYPERBOLICITY_MARGIN)
        if e.dims != e0.dims:
            raise DimChange(f"classification changed from {e0.dims} to {e.dims} at eps={eps:.4g}")
        branch.append(e)
    return branch

"""Memory kernels, their certified constants, and history-space quadrature.

The weight kernel A(s) defines the norm of the history space; the coupling
kernel M(s) feeds the memory term of the flow. Both are represented by
evaluators on a truncated horizon [0, s_max] with the tail treated as zero,
which the exponential-domination assumptions justify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import (
    AsymmetricCoupling,
    CouplingTooLarge,
    GridMismatch,
    NoDecay,
    NotPositiveDefinite,
)

TAIL_TOL = 1e-12
SYM_RTOL = 1e-12
SAFETY_FACTOR = 0.9  # margin applied to the decay rate in block-level formulas


@dataclass
class KernelSpec:
    """A matrix kernel on [0, s_max].

    evaluator maps s to a (d, d) matrix; derivative_evaluator maps s to
    d/ds of the kernel and is absent for coupling kernels. scalar_profile,
    when set by a factory, evaluates the isotropic scalar factor on whole
    arrays and unlocks the vectorized code paths.
    """

    evaluator: Callable[[float], np.ndarray]
    derivative_evaluator: Optional[Callable[[float], np.ndarray]]
    s_max: float
    n_quad: int
    dim: int
    family: Optional[dict] = None
    scalar_profile: Optional[Callable[[np.ndarray], np.ndarray]] = None
    scalar_derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.s_max <= 0:
            raise ValueError("s_max must be positive")
        if self.n_quad < 2:
            raise ValueError("n_quad must be at least 2")

    @property
    def is_isotropic(self) -> bool:
        return self.scalar_profile is not None

    def grid(self, n: Optional[int] = None) -> np.ndarray:
        return np.linspace(0.0, self.s_max, n if n is not None else self.n_quad)

    def matrices(self, s: np.ndarray) -> np.ndarray:
        """Evaluate the kernel at every node of s, shape (n, d, d)."""
        s = np.asarray(s, dtype=float)
        if self.scalar_profile is not None:
            prof = self.scalar_profile(s)
            eye = np.eye(self.dim)
            return prof[:, None, None] * eye[None, :, :]
        return np.stack([np.asarray(self.evaluator(si), dtype=float) for si in s])

    def derivative_matrices(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.scalar_derivative is not None:
            prof = self.scalar_derivative(s)
            eye = np.eye(self.dim)
            return prof[:, None, None] * eye[None, :, :]
        if self.derivative_evaluator is None:
            raise ValueError("kernel has no derivative evaluator")
        return np.stack([np.asarray(self.derivative_evaluator(si), dtype=float) for si in s])


def exp_kernel(kappa: float, scale: float = 1.0, dim: int = 1,
               s_max: Optional[float] = None, n_quad: Optional[int] = None) -> KernelSpec:
    """Isotropic kernel scale * e^{-kappa s} * I with its exact derivative."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if s_max is None:
        s_max = -math.log(TAIL_TOL) / kappa
    if n_quad is None:
        n_quad = int(math.ceil(s_max / 0.01)) + 1
    eye = np.eye(dim)

    def profile(s):
        return scale * np.exp(-kappa * np.asarray(s, dtype=float))

    def dprofile(s):
        return -kappa * scale * np.exp(-kappa * np.asarray(s, dtype=float))

    return KernelSpec(
        evaluator=lambda s: scale * math.exp(-kappa * s) * eye,
        derivative_evaluator=lambda s: -kappa * scale * math.exp(-kappa * s) * eye,
        s_max=float(s_max),
        n_quad=int(n_quad),
        dim=dim,
        family={"name": "exp_scalar", "kappa": kappa, "scale": scale},
        scalar_profile=profile,
        scalar_derivative=dprofile,
    )


def growing_kernel(rate: float, dim: int = 1, s_max: float = 5.0) -> KernelSpec:
    """e^{+rate s} * I, violating decay. Exists to exercise NoDecay."""
    eye = np.eye(dim)
    return KernelSpec(
        evaluator=lambda s: math.exp(rate * s) * eye,
        derivative_evaluator=lambda s: rate * math.exp(rate * s) * eye,
        s_max=s_max,
        n_quad=max(2, int(s_max / 0.01) + 1),
        dim=dim,
        family={"name": "exp_scalar", "kappa": -rate, "scale": 1.0},
        scalar_profile=lambda s: np.exp(rate * np.asarray(s, dtype=float)),
        scalar_derivative=lambda s: rate * np.exp(rate * np.asarray(s, dtype=float)),
    )


def zero_kernel(dim: int = 1, s_max: float = 1.0) -> KernelSpec:
    """Identically zero coupling kernel."""
    zeros = np.zeros((dim, dim))
    return KernelSpec(
        evaluator=lambda s: zeros,
        derivative_evaluator=None,
        s_max=s_max,
        n_quad=max(2, int(s_max / 0.01) + 1),
        dim=dim,
        family={"name": "zero"},
        scalar_profile=lambda s: np.zeros_like(np.asarray(s, dtype=float)),
        scalar_derivative=lambda s: np.zeros_like(np.asarray(s, dtype=float)),
    )


def matrix_exp_kernel(kappa: float, matrix: np.ndarray,
                      s_max: Optional[float] = None) -> KernelSpec:
    """Kernel e^{-kappa s} * B for a fixed matrix B (anisotropic tests)."""
    B = np.asarray(matrix, dtype=float)
    if s_max is None:
        s_max = -math.log(TAIL_TOL) / kappa
    return KernelSpec(
        evaluator=lambda s: math.exp(-kappa * s) * B,
        derivative_evaluator=lambda s: -kappa * math.exp(-kappa * s) * B,
        s_max=float(s_max),
        n_quad=int(math.ceil(s_max / 0.01)) + 1,
        dim=B.shape[0],
        family={"name": "exp_matrix", "kappa": kappa},
    )


def table_kernel(s_samples, matrices, derivative_matrices=None) -> KernelSpec:
    """Kernel defined by linear interpolation of matrix samples."""
    s_samples = np.asarray(s_samples, dtype=float)
    mats = np.asarray(matrices, dtype=float)
    if s_samples.ndim != 1 or mats.shape[0] != s_samples.shape[0]:
        raise ValueError("sample count mismatch")
    dim = mats.shape[1]

    def interp(table):
        flat = table.reshape(table.shape[0], -1)

        def ev(s):
            out = np.array([np.interp(s, s_samples, flat[:, j]) for j in range(flat.shape[1])])
            return out.reshape(dim, dim)

        return ev

    dmats = None if derivative_matrices is None else np.asarray(derivative_matrices, dtype=float)
    return KernelSpec(
        evaluator=interp(mats),
        derivative_evaluator=None if dmats is None else interp(dmats),
        s_max=float(s_samples[-1]),
        n_quad=len(s_samples),
        dim=dim,
        family={"name": "table"},
    )


@dataclass
class HistoryFunction:
    """A discretized element of the weighted history space.

    Values beyond the last grid node are treated as zero when
    tail_decay_assumed is set, matching the truncation rule.
    """

    grid: np.ndarray
    values: np.ndarray
    tail_decay_assumed: bool = True

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.grid) != len(self.values):
            raise ValueError("grid length must equal values length")
        if len(self.grid) >= 2 and not np.all(np.diff(self.grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if abs(self.grid[0]) > 0:
            raise ValueError("grid must start at s = 0")

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, grid, dim: int) -> "HistoryFunction":
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.zeros((len(grid), dim)))

    def resample(self, grid) -> "HistoryFunction":
        """Linear resample onto a new grid; zero beyond the old horizon."""
        grid = np.asarray(grid, dtype=float)
        out = np.empty((len(grid), self.dim))
        right = 0.0 if self.tail_decay_assumed else self.values[-1, 0]
        for j in range(self.dim):
            fill = 0.0 if self.tail_decay_assumed else self.values[-1, j]
            out[:, j] = np.interp(grid, self.grid, self.values[:, j], right=fill)
        del right
        return HistoryFunction(grid, out, self.tail_decay_assumed)


@dataclass(frozen=True)
class KernelConstants:
    """Certified constants of a kernel pair."""

    C_A: float
    D_A_bar: float
    D_A: float
    D_M_bar: float
    D_M: float
    int_norm_A: float
    int_norm_M: float
    M_total: np.ndarray

    @property
    def C_A_safe(self) -> float:
        """Decay rate with the 10% safety margin used by block formulas."""
        return SAFETY_FACTOR * self.C_A

    def as_dict(self) -> dict:
        return {
            "C_A": self.C_A,
            "D_A_bar": self.D_A_bar,
            "D_A": self.D_A,
            "D_M_bar": self.D_M_bar,
            "D_M": self.D_M,
            "int_norm_A": self.int_norm_A,
            "int_norm_M": self.int_norm_M,
            "M_total": np.asarray(self.M_total).tolist(),
        }


def _trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.zeros_like(grid)
    if len(grid) < 2:
        return w
    d = np.diff(grid)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def certify_kernels(A: KernelSpec, M: KernelSpec, sample_density: int = 100) -> KernelConstants:
    """Certify the standing kernel assumptions and compute all constants.

    Parameters
    ----------
    A, M : KernelSpec
        Weight and coupling kernels. A needs a derivative evaluator.
    sample_density : int
        Certification samples per unit of s.

    Returns
    -------
    KernelConstants
        The decay rate C_A (minimum over samples of the generalized
        eigenvalue bound), conditioning bound D_A_bar, coupling bound
        D_M_bar, the kernel norm integrals, the matrix integral of M,
        and the derived integral bounds D_A, D_M.
    """
    if A.dim != M.dim:
        raise ValueError("kernel dimensions differ")
    d = A.dim

    nA = max(3, int(math.ceil(sample_density * A.s_max)) + 1)
    sA = np.linspace(0.0, A.s_max, nA)
    nM = max(3, int(math.ceil(sample_density * M.s_max)) + 1)
    sM = np.linspace(0.0, M.s_max, nM)

    if A.is_isotropic and A.scalar_derivative is not None:
        # scalar pencil: every eigen-quantity collapses to the profile
        a = A.scalar_profile(sA)
        da = A.scalar_derivative(sA)
        bad = np.nonzero(a <= 0.0)[0]
        if bad.size:
            raise NotPositiveDefinite(sA[bad[0]], float(a[bad[0]]))
        C_A = float(np.min(-da / a))
        D_A_bar_sq = 1.0
        norm_A = np.abs(a)
        lam_min_A_on_M_grid = np.abs(A.scalar_profile(sM)) if M.s_max <= A.s_max else None
    else:
        mats = A.matrices(sA)
        dmats = A.derivative_matrices(sA)
        C_A = math.inf
        D_A_bar_sq = 0.0
        norm_A = np.empty(nA)
        lam_min_A_on_M_grid = None
        for i, s in enumerate(sA):
            Ai = mats[i]
            scale = np.linalg.norm(Ai, 2) if np.any(Ai) else 0.0
            if scale == 0.0 or np.linalg.norm(Ai - Ai.T, 2) > SYM_RTOL * scale * d:
                raise ValueError(f"weight kernel not symmetric at s={s:.6g}")
            lam = np.linalg.eigvalsh(0.5 * (Ai + Ai.T))
            # tolerance is relative to ||A(s)|| at the same s, so the
            # truncated exponential tail stays admissible
            if lam[0] <= SYM_RTOL * abs(lam[-1]):
                raise NotPositiveDefinite(s, float(lam[0]))
            D_A_bar_sq = max(D_A_bar_sq, float(lam[-1] / lam[0]))
            norm_A[i] = float(lam[-1])
            pencil = scipy.linalg.eigh(-0.5 * (dmats[i] + dmats[i].T), Ai, eigvals_only=True)
            C_A = min(C_A, float(pencil[0]))

    if C_A <= 0:
        raise NoDecay(f"computed decay rate C_A = {C_A:.4g} is not positive")

    # coupling bound:||M(s)|| / lambda_min(A(s)) on M's own sample grid
    if M.is_isotropic:
        norm_M = np.abs(M.scalar_profile(sM))
    else:
        matsM = M.matrices(sM)
        norm_M = np.array([np.linalg.norm(matsM[i], 2) for i in range(nM)])

    if lam_min_A_on_M_grid is None:
        if A.is_isotropic:
            lam_min_A_on_M_grid = np.abs(A.scalar_profile(sM))
        else:
            matsA_on_M = A.matrices(np.minimum(sM, A.s_max))
            lam_min_A_on_M_grid = np.array(
                [np.linalg.eigvalsh(0.5 * (m + m.T))[0] for m in matsA_on_M]
            )

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lam_min_A_on_M_grid > 0, norm_M / lam_min_A_on_M_grid, np.inf)
    D_M_bar_sq = float(np.max(ratio)) if nM else 0.0
    if D_M_bar_sq > 0 and np.isfinite(D_M_bar_sq):
        # sup not attained on the horizon: the ratio is still climbing at s_max
        i_q = int(0.75 * (nM - 1))
        if ratio[-1] >= 0.999 * D_M_bar_sq and ratio[i_q] > 0 and ratio[-1] > 2.0 * ratio[i_q]:
            raise CouplingTooLarge(
                "coupling-to-weight ratio still growing at the horizon; no finite bound"
            )
    if not np.isfinite(D_M_bar_sq):
        raise CouplingTooLarge("coupling-to-weight ratio unbounded on the sample set")

    wA = _trapezoid_weights(sA)
    wM = _trapezoid_weights(sM)
    int_norm_A = float(wA @ norm_A)
    int_norm_M = float(wM @ norm_M)
    if M.is_isotropic:
        M_total = float(wM @ M.scalar_profile(sM)) * np.eye(d)
    else:
        M_total = np.einsum("i,ijk->jk", wM, M.matrices(sM))

    asym = np.linalg.norm(M_total - M_total.T)
    if asym > 1e-10 * (1.0 + np.linalg.norm(M_total)):
        raise AsymmetricCoupling(f"integral of coupling kernel asymmetric by {asym:.3e}")

    D_A_bar = math.sqrt(D_A_bar_sq)
    D_M_bar = math.sqrt(D_M_bar_sq)
    return KernelConstants(
        C_A=C_A,
        D_A_bar=D_A_bar,
        D_A=D_A_bar * math.sqrt(int_norm_A),
        D_M_bar=D_M_bar,
        D_M=D_M_bar * math.sqrt(int_norm_M),
        int_norm_A=int_norm_A,
        int_norm_M=int_norm_M,
        M_total=M_total,
    )


def _check_horizon(eta: HistoryFunction, spec: KernelSpec):
    if eta.grid[-1] > spec.s_max * (1.0 + 1e-9) + 1e-12:
        raise GridMismatch(
            f"history grid reaches s={eta.grid[-1]:.4g} beyond kernel horizon {spec.s_max:.4g}"
        )


def weighted_norm_sq(eta: HistoryFunction, A: KernelSpec) -> float:
    """Squared history norm int (A(s) eta(s), eta(s)) ds by composite trapezoid.

    Parameters
    ----------
    eta : HistoryFunction
        History sampled on a grid inside [0, A.s_max].
    A : KernelSpec
        Weight kernel.

    Returns
    -------
    float
        Nonnegative quadrature value.
    """
    _check_horizon(eta, A)
    w = _trapezoid_weights(eta.grid)
    if A.is_isotropic:
        prof = A.scalar_profile(eta.grid)
        val = float(np.sum(w * prof * np.sum(eta.values**2, axis=1)))
    else:
        mats = A.matrices(eta.grid)
        val = float(np.einsum("i,ijk,ij,ik->", w, mats, eta.values, eta.values))
    return max(val, 0.0)


def kernel_integral(K: KernelSpec, eta: HistoryFunction) -> np.ndarray:
    """Quadrature of int K(s) eta(s) ds.

    Parameters
    ----------
    K : KernelSpec
        Any kernel of matching dimension.
    eta : HistoryFunction
        History sampled inside [0, K.s_max].

    Returns
    -------
    numpy.ndarray
        d-vector.
    """
    if eta.dim != K.dim:
        raise GridMismatch("history dimension does not match kernel dimension")
    _check_horizon(eta, K)
    w = _trapezoid_weights(eta.grid)
    if K.is_isotropic:
        prof = K.scalar_profile(eta.grid)
        return (w * prof) @ eta.values
    mats = K.matrices(eta.grid)
    return np.einsum("i,ijk,ik->j", w, mats, eta.values)


@dataclass
class KernelPair:
    """Weight and coupling kernels with their certified constants."""

    A: KernelSpec
    M: KernelSpec
    constants: KernelConstants = field(default=None)  # type: ignore[assignment]
    sample_density: int = 100

    def __post_init__(self):
        if self.constants is None:
            self.constants = certify_kernels(self.A, self.M, self.sample_density)

    @property
    def dim(self) -> int:
        return self.A.dim

"""Integration of the memory-perturbed gradient flow in transformed form.

The state is (x, eta) where eta^t(s) = x(t - s) - x(t) is derived from the
trajectory itself; the integrator therefore advances a single timeline of
x samples and splices the user-supplied initial history in front of t = 0.
Everything downstream (Lyapunov values, energy inequalities, tangent flows)
reads from that timeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.signal

from . import _stepping
from .errors import Blowup, BoundsViolated, GridMismatch, StepTooLarge
from .kernels import (
    HistoryFunction,
    KernelPair,
    KernelSpec,
    kernel_integral,
    weighted_norm_sq,
)

RK4_REAL_STABILITY = 2.78


@dataclass
class Potential:
    """A potential F with its gradient field f = grad F and certified bounds.

    third_deriv_bound bounds the second derivative of f (all components)
    over the box |x|_inf <= box_radius. dissipativity = (R, C_F) states
    -f(x).x >= C_F|x|^2 on the max-norm shell [R, 2R]; quad_bound =
    (gamma, delta) states F(x) <= -gamma|x|^2 + delta.
    """

    F: Callable[[np.ndarray], float]
    grad_F: Callable[[np.ndarray], np.ndarray]
    hess_F: Callable[[np.ndarray], np.ndarray]
    third_deriv_bound: float
    dissipativity: Tuple[float, float]
    quad_bound: Tuple[float, float]
    dim: int
    box_radius: float = 0.0
    family: Optional[dict] = None

    def __post_init__(self):
        if self.box_radius <= 0.0:
            self.box_radius = 2.0 * self.dissipativity[0]

    @property
    def is_quartic_diag(self) -> bool:
        return self.family is not None and self.family.get("name") == "quartic_diag"

    def hess_spectral_bound(self, radius: float) -> float:
        """Upper bound for ||hess F|| over the box |x|_inf <= radius."""
        if self.is_quartic_diag:
            a = np.asarray(self.family["a"])
            b = np.asarray(self.family["b"])
            return float(np.max(np.abs(a) + 3.0 * b * radius**2))
        axes = [np.linspace(-radius, radius, 5)] * self.dim
        best = 0.0
        for x in np.stack(np.meshgrid(*axes), axis=-1).reshape(-1, self.dim):
            best = max(best, float(np.linalg.norm(self.hess_F(x), 2)))
        return 1.25 * best


def quartic_diag(a, b) -> Potential:
    """Separable potential sum_i a_i x_i^2/2 - b_i x_i^4/4 with a_i, b_i > 0.

    The closed forms: gamma = min(a)/4, delta = sum 9 a_i^2/(16 b_i), and
    the shell radius R = sqrt(2 max(a/b)). The shell rate C_F is floored
    from a scan of the worst max-norm configuration.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("coefficient arrays must match and be positive")
    d = len(a)
    R = math.sqrt(2.0 * float(np.max(a / b)))

    # worst ratio of -f.x to |x|^2 on the shell: one axis pinned to r,
    # the others free to sit at the most negative point of b x^4 - a x^2
    g_min = -(a**2) / (4.0 * b)
    x_at_min = a / (2.0 * b)  # the squared coordinate at that minimum
    ratio = math.inf
    for r in np.linspace(R, 2.0 * R, 41):
        for j in range(d):
            num = b[j] * r**4 - a[j] * r**2
            den = r**2
            for i in range(d):
                if i != j:
                    num += g_min[i]
                    den += x_at_min[i]
            ratio = min(ratio, num / den)
    C_F = 0.5 if np.all(a == 1.0) and np.all(b == 1.0) else 0.75 * ratio
    if C_F <= 0:
        raise BoundsViolated({"diss2": ratio})

    box = 2.0 * R

    def F(x):
        x = np.asarray(x, dtype=float)
        return float(np.sum(0.5 * a * x**2 - 0.25 * b * x**4))

    def grad_F(x):
        x = np.asarray(x, dtype=float)
        return a * x - b * x**3

    def hess_F(x):
        x = np.asarray(x, dtype=float)
        return np.diag(a - 3.0 * b * x**2)

    return Potential(
        F=F,
        grad_F=grad_F,
        hess_F=hess_F,
        third_deriv_bound=6.0 * float(np.max(b)) * box,
        dissipativity=(R, C_F),
        quad_bound=(float(np.min(a)) / 4.0, float(np.sum(9.0 * a**2 / (16.0 * b)))),
        dim=d,
        box_radius=box,
        family={"name": "quartic_diag", "a": a.copy(), "b": b.copy()},
    )


def toy_1d() -> Potential:
    return quartic_diag([1.0], [1.0])


def toy_2d() -> Potential:
    return quartic_diag([1.0, 1.0], [1.0, 1.0])


def validate_potential(P: Potential, n_samples: int = 200, seed: int = 0):
    """Spot-check the stated bounds; raises BoundsViolated on failure."""
    rng = np.random.default_rng(seed)
    R, C_F = P.dissipativity
    gamma, delta = P.quad_bound
    failed = {}
    for _ in range(n_samples):
        x = rng.uniform(-P.box_radius, P.box_radius, P.dim)
        H = P.hess_F(x)
        if not np.allclose(H, H.T, atol=1e-9 * (1.0 + np.abs(H).max())):
            failed["hess_symmetric"] = x
            break
    for _ in range(n_samples):
        r = rng.uniform(R, 2.0 * R)
        x = rng.uniform(-r, r, P.dim)
        x[rng.integers(P.dim)] = r * rng.choice([-1.0, 1.0])
        if -float(P.grad_F(x) @ x) < C_F * float(x @ x) - 1e-9:
            failed["diss2"] = x
            break
    for _ in range(n_samples):
        x = rng.uniform(-1.5 * P.box_radius, 1.5 * P.box_radius, P.dim)
        if P.F(x) > -gamma * float(x @ x) + delta + 1e-9:
            failed["quad_bound"] = x
            break
    if failed:
        raise BoundsViolated(failed)


@dataclass
class HistoryState:
    """Current point with its memory variable.

    Flow-generated states always satisfy eta(0) = 0; the constructor does
    not force it so that arbitrary history-space pairs can be evaluated,
    but integrate() rejects incompatible initial data.
    """

    x: np.ndarray
    eta: Optional[HistoryFunction]
    t: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))


@dataclass
class VariationalState:
    """Tangent vector with its tangent memory variable."""

    w: np.ndarray
    theta: Optional[HistoryFunction] = None

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))


def _check_head(eta: Optional[HistoryFunction], what: str):
    if eta is None:
        return
    head = float(np.max(np.abs(eta.values[0])))
    scale = 1.0 + float(np.max(np.abs(eta.values)))
    if head > 1e-10 * scale:
        raise ValueError(f"{what} must vanish at s = 0 to be flow-compatible")


class _StateSeq(Sequence):
    """Lazy view of trajectory snapshots; eta materialized on the stride."""

    def __init__(self, traj: "Trajectory"):
        self._traj = traj

    def __len__(self):
        return self._traj.timeline.shape[0] - self._traj.n_pre

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        n = len(self)
        if k < 0:
            k += n
        if not 0 <= k < n:
            raise IndexError(k)
        t = self._traj.times[k]
        x = self._traj.timeline[self._traj.n_pre + k]
        eta = None
        if k % self._traj.eta_stride == 0:
            eta = self._traj.eta_at(k)
        return HistoryState(x=x.copy(), eta=eta, t=float(t))


class Trajectory:
    """Uniform-step trajectory backed by a single timeline array.

    Row n_pre of the timeline is t = 0; earlier rows hold the spliced
    initial history. Snapshots, memory norms, and Lyapunov values are all
    derived views.
    """

    def __init__(self, timeline: np.ndarray, n_pre: int, dt: float, eps: float = 0.0,
                 potential: Optional[Potential] = None, kernels: Optional[KernelPair] = None,
                 eta_stride: int = 1):
        self.timeline = timeline
        self.n_pre = n_pre
        self.dt = dt
        self.eps = eps
        self.potential = potential
        self.kernels = kernels
        self.eta_stride = max(1, int(eta_stride))
        self.times = np.arange(timeline.shape[0] - n_pre) * dt
        self.states = _StateSeq(self)
        self._norm_cache = None

    @property
    def dim(self) -> int:
        return self.timeline.shape[1]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def x(self) -> np.ndarray:
        """(n_steps + 1, d) array of points from t = 0 on."""
        return self.timeline[self.n_pre:]

    def eta_at(self, k: int) -> HistoryFunction:
        """Memory variable at step k on the full retained window."""
        p = self.n_pre + k
        grid = np.arange(self.n_pre + 1) * self.dt
        vals = self.timeline[p - self.n_pre:p + 1][::-1] - self.timeline[p]
        return HistoryFunction(grid, vals.copy())

    def state(self, k: int) -> HistoryState:
        return HistoryState(self.timeline[self.n_pre + k].copy(), self.eta_at(k),
                            float(self.times[k]))

    def final_state(self) -> HistoryState:
        return self.state(self.n_steps)

    def eta_norm_sq_series(self) -> np.ndarray:
        """Squared weighted memory norm at every step (cached)."""
        if self._norm_cache is None:
            if self.kernels is None:
                raise ValueError("trajectory carries no kernel context")
            self._norm_cache = _eta_norm_sq_series(self.timeline, self.n_pre,
                                                   self.dt, self.kernels.A)
        return self._norm_cache

    def lyapunov_series(self, E: float, eps: Optional[float] = None) -> np.ndarray:
        if self.potential is None or self.kernels is None:
            raise ValueError("trajectory carries no potential/kernel context")
        e = self.eps if eps is None else eps
        nsq = self.eta_norm_sq_series()
        Mtot = self.kernels.constants.M_total
        xs = self.x
        quad = np.einsum("ij,jk,ik->i", xs, Mtot, xs)
        pot = np.array([self.potential.F(x) for x in xs])
        return E * nsq - 2.0 * pot - e * quad


def _window_counts(kernels: KernelPair, dt: float, mem_on: bool) -> Tuple[int, int]:
    nA = max(1, int(round(kernels.A.s_max / dt)))
    nM = max(1, int(round(kernels.M.s_max / dt))) if mem_on else 1
    return nA, nM


def _scalar_weights(M: KernelSpec, h: float, nM: int):
    j = np.arange(1, nM + 1, dtype=float)
    w = np.full(nM, h)
    w[-1] = 0.5 * h
    rw1 = (w * M.scalar_profile(j * h))[::-1].copy()
    rwh = (h * M.scalar_profile((j - 0.5) * h))[::-1].copy()
    wsum1 = float(rw1.sum())
    wsumh = float(rwh.sum())
    mtot = wsum1 + 0.5 * h * float(M.scalar_profile(np.zeros(1))[0])
    return rw1, rwh, wsum1, wsumh, mtot


def _matrix_weights(M: KernelSpec, h: float, nM: int, d: int):
    j = np.arange(1, nM + 1, dtype=float)
    w = np.full(nM, h)
    w[-1] = 0.5 * h
    if M.is_isotropic:
        eye = np.eye(d)
        m1 = M.scalar_profile(j * h)
        mh = M.scalar_profile((j - 0.5) * h)
        RW1 = (w * m1)[::-1, None, None] * eye
        RWH = (h * mh)[::-1, None, None] * eye
        M0 = float(M.scalar_profile(np.zeros(1))[0]) * eye
    else:
        RW1 = (w[:, None, None] * M.matrices(j * h))[::-1].copy()
        RWH = (h * M.matrices((j - 0.5) * h))[::-1].copy()
        M0 = M.matrices(np.zeros(1))[0]
    W1 = RW1.sum(axis=0)
    Wh = RWH.sum(axis=0)
    Mtot = W1 + 0.5 * h * M0
    return RW1, RWH, W1, Wh, Mtot


def _zero_memory(M: KernelSpec) -> bool:
    return M.family is not None and M.family.get("name") == "zero"


def _splice_prehistory(X: np.ndarray, n_pre: int, dt: float, x0: np.ndarray,
                       eta0: Optional[HistoryFunction]):
    if eta0 is None:
        X[:n_pre + 1] = x0
        return
    if eta0.grid[-1] > n_pre * dt * (1.0 + 1e-9) + 1e-12:
        raise GridMismatch("initial history extends beyond the retained window")
    grid = np.arange(n_pre + 1) * dt
    vals = eta0.resample(grid).values
    X[:n_pre + 1] = x0 + vals[::-1]


def integrate(initial: HistoryState, P: Potential, kernels: KernelPair, eps: float,
              T: float, dt: float) -> Trajectory:
    """Advance the memory-perturbed flow x' = f(x) + eps[(int M)x + int M eta].

    Fixed-step RK4 by the method of steps: the history buffer is the past
    trajectory on the dt grid spliced with the initial memory tail, and the
    memory integrals are window quadratures on that same grid (trapezoid at
    whole steps, midpoint at half steps, both skipping the vanishing s = 0
    node).

    Parameters
    ----------
    initial : HistoryState
        Starting point and initial memory variable (None means zero).
    P : Potential
        Gradient system data.
    kernels : KernelPair
        Certified weight/coupling pair.
    eps : float
        Memory coupling strength, >= 0.
    T, dt : float
        Horizon and step; T is rounded to a whole number of steps.

    Returns
    -------
    Trajectory

    Raises
    ------
    Blowup
        If |x| exceeds 10x the bound implied by the Lyapunov lower bound.
    StepTooLarge
        If dt is outside the explicit stability range for the stiffness
        seen on the invariant region, or a step moves grossly too far.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1:
        raise ValueError("horizon shorter than one step")
    x0 = np.atleast_1d(np.asarray(initial.x, dtype=float))
    d = len(x0)
    if kernels.dim != d or P.dim != d:
        raise GridMismatch("state, potential, and kernel dimensions must agree")

    mem_on = eps > 0 and not _zero_memory(kernels.M)
    nA, nM = _window_counts(kernels, dt, mem_on)
    n_pre = max(nA, nM)

    _check_head(initial.eta, "initial memory variable")
    X = np.empty((n_pre + n_steps + 1, d))
    _splice_prehistory(X, n_pre, dt, x0, initial.eta)

    # invariant-region radius from the Lyapunov lower bound
    gamma, delta = P.quad_bound
    E0, _ = lyapunov_budget(P, kernels)
    L0 = lyapunov_value(initial, eps, 0.5 * E0, P, kernels)
    denom = 2.0 * gamma - eps * kernels.constants.int_norm_M
    R = P.dissipativity[0]
    if denom > 0:
        bound_x = math.sqrt(max(L0 + 2.0 * delta, 0.0) / denom)
    else:
        bound_x = 10.0 * (1.0 + R)
    bound_x = max(bound_x, float(np.max(np.abs(x0))), R, 1.0)

    lam = P.hess_spectral_bound(bound_x)
    if mem_on:
        lam += eps * (float(np.linalg.norm(kernels.constants.M_total, 2))
                      + kernels.constants.int_norm_M)
    if dt * lam > RK4_REAL_STABILITY:
        raise StepTooLarge(
            f"dt = {dt:.3g} exceeds the stability step {RK4_REAL_STABILITY / lam:.3g} "
            f"for stiffness {lam:.3g}"
        )

    blow_bound = 10.0 * bound_x
    if mem_on and kernels.M.is_isotropic and P.is_quartic_diag:
        rw1, rwh, ws1, wsh, mtot = _scalar_weights(kernels.M, dt, nM)
        a = np.asarray(P.family["a"], dtype=float)
        b = np.asarray(P.family["b"], dtype=float)
        bad = _stepping.run_steps(X, n_pre, n_steps, dt, eps, a, b, rw1, rwh,
                                  ws1, wsh, mtot, blow_bound)
    elif not mem_on and P.is_quartic_diag:
        zero = np.zeros(1)
        a = np.asarray(P.family["a"], dtype=float)
        b = np.asarray(P.family["b"], dtype=float)
        bad = _stepping.run_steps(X, n_pre, n_steps, dt, eps, a, b, zero, zero,
                                  0.0, 0.0, 0.0, blow_bound)
    else:
        if mem_on:
            RW1, RWH, W1, Wh, Mtot = _matrix_weights(kernels.M, dt, nM, d)
        else:
            RW1 = RWH = np.zeros((1, d, d))
            W1 = Wh = Mtot = np.zeros((d, d))
        bad = _stepping.run_steps_generic(X, n_pre, n_steps, dt, eps, P.grad_F,
                                          Mtot, RW1, RWH, W1, Wh, blow_bound)

    if bad >= 0:
        t_bad = (bad - n_pre) * dt
        raise Blowup(t_bad, float(np.max(np.abs(X[bad]))), blow_bound)

    steps = np.abs(np.diff(X[n_pre:], axis=0))
    if steps.size and float(steps.max()) > 0.5 * (1.0 + bound_x):
        raise StepTooLarge("a single step moved a macroscopic distance; reduce dt")

    return Trajectory(X, n_pre, dt, eps=eps, potential=P, kernels=kernels)


def lyapunov_value(state: HistoryState, eps: float, E: float, P: Potential,
                   kernels: KernelPair) -> float:
    """E ||eta||^2 - 2 F(x) - eps (int M ds x, x); decreasing along the flow
    for E below the budget and eps below eps0_of(E)."""
    x = np.atleast_1d(np.asarray(state.x, dtype=float))
    nsq = 0.0 if state.eta is None else weighted_norm_sq(state.eta, kernels.A)
    Mtot = kernels.constants.M_total
    return float(E * nsq - 2.0 * P.F(x) - eps * (x @ Mtot @ x))


def lyapunov_budget(P: Potential, kernels: KernelPair):
    """Admissible Lyapunov weight and coupling range.

    Returns
    -------
    (E0, eps0_of)
        E0 = G2/(2 G1) with G1 = D_A_bar^2 int||A||, G2 = C_A. eps0_of(E)
        is the largest eps with eps G3 G2/(2 G1) + eps^2 G4 <= E G2/4,
        where G3 = D_M_bar^2 int||A|| + D_A_bar^2 int||M|| and
        G4 = D_M_bar^2 int||M||; infinite when the coupling vanishes.
    """
    c = kernels.constants
    G1 = c.D_A_bar**2 * c.int_norm_A
    G2 = c.C_A
    G3 = c.D_M_bar**2 * c.int_norm_A + c.D_A_bar**2 * c.int_norm_M
    G4 = c.D_M_bar**2 * c.int_norm_M
    E0 = G2 / (2.0 * G1)

    def eps0_of(E: float) -> float:
        lin = G3 * G2 / (2.0 * G1)
        rhs = E * G2 / 4.0
        if G4 == 0.0:
            return math.inf if lin == 0.0 else rhs / lin
        return (-lin + math.sqrt(lin * lin + 4.0 * G4 * rhs)) / (2.0 * G4)

    return E0, eps0_of


def _eta_norm_sq_series(X: np.ndarray, n_pre: int, dt: float, A: KernelSpec) -> np.ndarray:
    """||eta||_A^2 at every step via sliding-window correlation."""
    nA = min(n_pre, max(1, int(round(A.s_max / dt))))
    j = np.arange(nA + 1, dtype=float)
    w = np.full(nA + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    n_rows = X.shape[0]
    ks = np.arange(n_pre, n_rows)
    if A.is_isotropic:
        wa = w * A.scalar_profile(j * dt)
        q = np.sum(X**2, axis=1)
        S1 = scipy.signal.fftconvolve(q, wa, mode="full")[ks]
        S2 = np.stack(
            [scipy.signal.fftconvolve(X[:, i], wa, mode="full")[ks] for i in range(X.shape[1])],
            axis=1,
        )
        wsum = float(wa.sum())
        xk = X[ks]
        out = S1 - 2.0 * np.sum(xk * S2, axis=1) + wsum * np.sum(xk**2, axis=1)
        return np.maximum(out, 0.0)
    WM = w[:, None, None] * A.matrices(j * dt)
    out = np.empty(len(ks))
    for i, k in enumerate(ks):
        vals = X[k - nA:k + 1][::-1] - X[k]
        out[i] = max(0.0, float(np.einsum("sij,si,sj->", WM, vals, vals)))
    return out


def _coupling_series(X: np.ndarray, n_pre: int, dt: float, A: KernelSpec) -> np.ndarray:
    """(int A eta, x') at every step; one-sided differences at the ends."""
    nA = min(n_pre, max(1, int(round(A.s_max / dt))))
    j = np.arange(nA + 1, dtype=float)
    w = np.full(nA + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    ks = np.arange(n_pre, X.shape[0])
    if A.is_isotropic:
        wa = w * A.scalar_profile(j * dt)
        S2 = np.stack(
            [scipy.signal.fftconvolve(X[:, i], wa, mode="full")[ks] for i in range(X.shape[1])],
            axis=1,
        )
        intA = S2 - float(wa.sum()) * X[ks]
    else:
        WM = w[:, None, None] * A.matrices(j * dt)
        intA = np.empty((len(ks), X.shape[1]))
        for i, k in enumerate(ks):
            vals = X[k - nA:k + 1][::-1] - X[k]
            intA[i] = np.einsum("sij,sj->i", WM, vals)
    xs = X[n_pre:]
    dx = np.gradient(xs, dt, axis=0)
    return np.sum(intA * dx, axis=1)


def energy_residual(traj: Trajectory, kernels: KernelPair) -> np.ndarray:
    """Central-difference residual of the memory energy balance.

    r_k = D(||eta||^2)/dt + C_A ||eta||^2 + 2 (int A eta, x'), evaluated at
    interior steps. For a weight kernel with exact exponential decay the
    continuous balance is an equality, so r is pure discretization error;
    in general the continuous form is <= 0 and r stays below K dt.
    """
    X, n_pre, dt = traj.timeline, traj.n_pre, traj.dt
    nsq = _eta_norm_sq_series(X, n_pre, dt, kernels.A)
    coup = _coupling_series(X, n_pre, dt, kernels.A)
    C_A = kernels.constants.C_A
    dn = (nsq[2:] - nsq[:-2]) / (2.0 * dt)
    return dn + C_A * nsq[1:-1] + 2.0 * coup[1:-1]


def energy_series(traj: Trajectory, kernels: KernelPair) -> Tuple[np.ndarray, np.ndarray]:
    """(||eta||^2, (int A eta, x')) at every step, for inequality checks."""
    X, n_pre, dt = traj.timeline, traj.n_pre, traj.dt
    return (_eta_norm_sq_series(X, n_pre, dt, kernels.A),
            _coupling_series(X, n_pre, dt, kernels.A))


class _VarSeq(Sequence):
    """Lazy sequence of tangent snapshots over a variational timeline."""

    def __init__(self, W: np.ndarray, n_pre: int, dt: float):
        self._W = W
        self._n_pre = n_pre
        self._dt = dt

    @property
    def w(self) -> np.ndarray:
        """(n_steps + 1, d) tangent vectors from t = 0 on."""
        return self._W[self._n_pre:]

    def theta_at(self, k: int) -> HistoryFunction:
        p = self._n_pre + k
        grid = np.arange(self._n_pre + 1) * self._dt
        vals = self._W[p - self._n_pre:p + 1][::-1] - self._W[p]
        return HistoryFunction(grid, vals.copy())

    def __len__(self):
        return self._W.shape[0] - self._n_pre

    def __getitem__(self, k):
        if isinstance(k, slice):
            return [self[i] for i in range(*k.indices(len(self)))]
        n = len(self)
        if k < 0:
            k += n
        if not 0 <= k < n:
            raise IndexError(k)
        return VariationalState(self._W[self._n_pre + k].copy(), self.theta_at(k))


def _half_step_points(xs_ext: np.ndarray, n_steps: int) -> np.ndarray:
    """Midpoint values of the base path; xs_ext starts one row before t=0."""
    xh = np.empty((n_steps, xs_ext.shape[1]))
    if n_steps > 1:
        xh[:-1] = (-xs_ext[:n_steps - 1] + 9.0 * xs_ext[1:n_steps]
                   + 9.0 * xs_ext[2:n_steps + 1] - xs_ext[3:n_steps + 2]) / 16.0
    # last midpoint: quadratic through the three final nodes
    xh[-1] = (-xs_ext[n_steps - 1] + 6.0 * xs_ext[n_steps] + 3.0 * xs_ext[n_steps + 1]) / 8.0
    return xh


def integrate_variational(base: Trajectory, v0: VariationalState, eps: float) -> _VarSeq:
    """Advance the tangent equation w' = Df(x(t)) w + eps[(int M) w + int M theta]
    along a frozen base trajectory.

    The base path at half steps is interpolated from four neighbouring
    timeline rows; the tangent memory variable theta is reconstructed from
    the w-timeline exactly as eta is from x.
    """
    if base.potential is None or base.kernels is None:
        raise ValueError("base trajectory carries no potential/kernel context")
    P, kernels = base.potential, base.kernels
    n_pre, n_steps, dt, d = base.n_pre, base.n_steps, base.dt, base.dim

    W = np.empty((n_pre + n_steps + 1, d))
    w0 = np.atleast_1d(np.asarray(v0.w, dtype=float))
    if len(w0) != d:
        raise GridMismatch("tangent vector dimension mismatch")
    _check_head(v0.theta, "initial tangent memory variable")
    _splice_prehistory(W, n_pre, dt, w0, v0.theta)

    mem_on = eps > 0 and not _zero_memory(kernels.M)
    nM = max(1, int(round(kernels.M.s_max / dt))) if mem_on else 1
    if mem_on:
        RW1, RWH, W1, Wh, Mtot = _matrix_weights(kernels.M, dt, nM, d)
    else:
        RW1 = RWH = np.zeros((1, d, d))
        W1 = Wh = Mtot = np.zeros((d, d))

    xs = base.timeline[n_pre:]
    xs_ext = base.timeline[n_pre - 1:]
    xh = _half_step_points(xs_ext, n_steps)
    if P.is_quartic_diag:
        a = np.asarray(P.family["a"], dtype=float)
        b = np.asarray(P.family["b"], dtype=float)
        H_full = np.zeros((n_steps + 1, d, d))
        H_half = np.zeros((n_steps, d, d))
        idx = np.arange(d)
        H_full[:, idx, idx] = a - 3.0 * b * xs**2
        H_half[:, idx, idx] = a - 3.0 * b * xh**2
    else:
        H_full = np.stack([P.hess_F(x) for x in xs])
        H_half = np.stack([P.hess_F(x) for x in xh])
    A_full = H_full + eps * (Mtot - W1)
    A_half = H_half + eps * (Mtot - Wh)

    blow = 1e9 * (1.0 + float(np.max(np.abs(W[:n_pre + 1]))))
    bad = _stepping.run_var_steps(W, n_pre, n_steps, dt, eps, A_full, A_half,
                                  RW1, RWH, blow)
    if bad >= 0:
        raise Blowup((bad - n_pre) * dt, float(np.max(np.abs(W[bad]))), blow)
    return _VarSeq(W, n_pre, dt)


def two_solution_divergence(trajA: Trajectory, trajB: Trajectory,
                            eps1: float, eps2: float) -> Tuple[float, float]:
    """Fit an envelope C_pre * D0 * exp(C_rate t) over the pathwise gap.

    The gap is |xA - xB| + ||etaA - etaB||_A per step and D0 is the initial
    data distance plus |eps1 - eps2|. The returned envelope dominates the
    measured curve at every step by construction.
    """
    if trajA.dt != trajB.dt or trajA.n_steps != trajB.n_steps:
        raise GridMismatch("trajectories must share dt and horizon")
    if trajA.n_pre != trajB.n_pre or trajA.dim != trajB.dim:
        raise GridMismatch("trajectories must share history window and dimension")
    if trajA.kernels is None:
        raise ValueError("trajectories carry no kernel context")
    D = trajA.timeline - trajB.timeline
    nsq = _eta_norm_sq_series(D, trajA.n_pre, trajA.dt, trajA.kernels.A)
    gap = np.linalg.norm(D[trajA.n_pre:], axis=1) + np.sqrt(nsq)
    D0 = gap[0] + abs(eps1 - eps2)
    if float(np.max(gap)) == 0.0:
        return 0.0, 0.0
    t = trajA.times
    mask = gap > 1e-300
    logg = np.log(gap[mask])
    tm = t[mask]
    if len(tm) >= 2 and tm[-1] > tm[0]:
        rate = float(np.polyfit(tm, logg, 1)[0])
    else:
        rate = 0.0
    shift = float(np.max(logg - rate * tm))
    scale = D0 if D0 > 0 else 1.0
    return math.exp(shift) / scale, rate

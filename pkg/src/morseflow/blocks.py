"""Isolating blocks and cone certificates around hyperbolic rest points.

A block is a product neighborhood B_u x B_s in linearizing coordinates
y = T^{-1}(x - x0) together with a memory ball of radius R. Verification
checks the entry/exit sign conditions on the box faces against a uniform
bound for the memory coupling, and the memory ball is chosen so that the
weighted norm of eta cannot cross R while the point stays in the box.

The cone machinery certifies that the quadratic form
Q(dy) - E ||d eta||^2 (+ L deps^2 in the parameterized variant) increases
along pairs of solutions, which is what the manifold and connection layers
rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._sampling import halton, profile_history
from .dynamics import HistoryState, Potential, _eta_norm_sq_series, integrate
from .equilibria import Equilibrium, perturbed_field
from .errors import (BoundsViolated, EpsTooLarge, IllConditioned, NoCoercivity,
                     NonHyperbolic)
from .kernels import (HistoryFunction, KernelConstants, KernelPair,
                      _trapezoid_weights, kernel_integral)

DEFAULT_KAPPA = 0.05
DEFAULT_BOUNDARY_SAMPLES = 2000
COND_LIMIT = 1e12
DELTA_SEARCH_FACTOR = 0.2
MAX_DELTA_HALVINGS = 10
SUP_SAMPLES = 512


# ---------------------------------------------------------------------------
# coordinate frames


@dataclass
class CoordinateFrame:
    """Real linearizing frame T with its (near) normal form.

    jordan = T^{-1} J T is block diagonal: 1x1 entries for real
    eigenvalues and [[alpha, beta], [-beta, alpha]] for complex pairs,
    ordered real unstable, complex unstable, real stable, complex stable.
    Off-diagonal residue outside the 2x2 blocks is at most kappa.
    """

    T: np.ndarray
    T_inv: np.ndarray
    kappa: float
    jordan: np.ndarray

    def __post_init__(self):
        # construction context: spectral layout of the columns
        if not hasattr(self, "dims"):
            self.dims: Optional[Tuple[int, int, int, int]] = None

    @property
    def dim(self) -> int:
        return self.T.shape[0]


def _complex_block_pairs(dims: Tuple[int, int, int, int]) -> List[Tuple[int, int]]:
    u1, u2, s1, s2 = dims
    pairs = [(u1 + 2 * i, u1 + 2 * i + 1) for i in range(u2)]
    off = u1 + 2 * u2 + s1
    pairs += [(off + 2 * i, off + 2 * i + 1) for i in range(s2)]
    return pairs


def _offdiag_mask(d: int, dims: Tuple[int, int, int, int]) -> np.ndarray:
    mask = ~np.eye(d, dtype=bool)
    for i, j in _complex_block_pairs(dims):
        mask[i, j] = mask[j, i] = False
    return mask


def build_frame(J, kappa: float = DEFAULT_KAPPA,
                margin: float = 1e-6) -> CoordinateFrame:
    """Linearizing coordinates for a hyperbolic Jacobian.

    Columns come from the real/imaginary parts of the eigenvectors, sorted
    unstable before stable with real eigenvalues ahead of complex pairs in
    each half and decreasing real part within a group. When the residual
    off-diagonal mass of T^{-1} J T exceeds kappa, a diagonal similarity
    shrinks it geometrically; if that drives cond(T) past 1e12 the matrix
    is effectively defective and IllConditioned is raised.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    d = J.shape[0]
    lam, V = np.linalg.eig(J)
    if np.any(np.abs(lam.real) < margin):
        raise NonHyperbolic(np.zeros(d), float(np.min(np.abs(lam.real))))

    im_tol = 1e-9 * (1.0 + float(np.max(np.abs(lam))))

    def group(ev: complex) -> int:
        if ev.real > 0:
            return 0 if abs(ev.imag) <= im_tol else 1
        return 2 if abs(ev.imag) <= im_tol else 3

    order = sorted(range(d), key=lambda i: (group(lam[i]), -lam[i].real,
                                            -abs(lam[i].imag)))
    cols: List[np.ndarray] = []
    blocks: List[Tuple[int, complex]] = []  # (size, eigenvalue)
    used = np.zeros(d, dtype=bool)
    for i in order:
        if used[i]:
            continue
        ev, v = lam[i], V[:, i]
        if abs(ev.imag) <= im_tol:
            used[i] = True
            col = np.real(v)
            cols.append(col / np.linalg.norm(col))
            blocks.append((1, complex(ev.real, 0.0)))
        else:
            if ev.imag < 0:
                ev, v = np.conj(ev), np.conj(v)
            used[i] = True
            # retire the conjugate partner so the pair is used once
            j = int(np.argmin(np.abs(lam - np.conj(ev)) + used * 1e9))
            used[j] = True
            re, im = np.real(v), np.imag(v)
            cols.append(re / np.linalg.norm(re))
            cols.append(im / np.linalg.norm(im))
            blocks.append((2, ev))
    T = np.column_stack(cols)
    if np.linalg.cond(T) > COND_LIMIT:
        raise IllConditioned(f"frame condition number {np.linalg.cond(T):.3e} exceeds {COND_LIMIT:.0e}")

    u1 = sum(1 for n, ev in blocks if n == 1 and ev.real > 0)
    u2 = sum(1 for n, ev in blocks if n == 2 and ev.real > 0)
    s1 = sum(1 for n, ev in blocks if n == 1 and ev.real < 0)
    s2 = sum(1 for n, ev in blocks if n == 2 and ev.real < 0)
    dims = (u1, u2, s1, s2)
    mask = _offdiag_mask(d, dims)

    T_inv = np.linalg.inv(T)
    jordan = T_inv @ J @ T
    # geometric damping of any residual coupling above the budget
    for _ in range(200):
        off = float(np.max(np.abs(jordan[mask]))) if mask.any() else 0.0
        if off <= kappa:
            break
        scale = np.power(0.5, np.arange(d, dtype=float))
        T = T * scale
        if np.linalg.cond(T) > COND_LIMIT:
            raise IllConditioned(f"frame condition number {np.linalg.cond(T):.3e} exceeds {COND_LIMIT:.0e}")
        T_inv = np.linalg.inv(T)
        jordan = T_inv @ J @ T
    else:
        raise IllConditioned(f"frame condition number {np.linalg.cond(T):.3e} exceeds {COND_LIMIT:.0e}")

    frame = CoordinateFrame(T=T, T_inv=T_inv, kappa=float(kappa), jordan=jordan)
    frame.dims = dims
    return frame


# ---------------------------------------------------------------------------
# block geometry


@dataclass
class IsolatingBlock:
    """Product block B_u(delta) x B_s(delta) with memory ball radius R."""

    center: Equilibrium
    frame: CoordinateFrame
    delta: float
    R: float
    dims: Tuple[int, int, int, int]
    margins: Optional["MarginsReport"] = None

    @property
    def dim(self) -> int:
        return self.frame.dim

    def to_frame(self, x: np.ndarray) -> np.ndarray:
        return self.frame.T_inv @ (np.asarray(x, dtype=float) - self.center.point)

    def from_frame(self, y: np.ndarray) -> np.ndarray:
        return self.center.point + self.frame.T @ np.asarray(y, dtype=float)

    def groups(self) -> List[Tuple[str, List[int]]]:
        """Coordinate groups in frame order: ('u'|'s', index list)."""
        u1, u2, s1, s2 = self.dims
        out: List[Tuple[str, List[int]]] = []
        k = 0
        for _ in range(u1):
            out.append(("u", [k])); k += 1
        for _ in range(u2):
            out.append(("u", [k, k + 1])); k += 2
        for _ in range(s1):
            out.append(("s", [k])); k += 1
        for _ in range(s2):
            out.append(("s", [k, k + 1])); k += 2
        return out

    def q_signs(self) -> np.ndarray:
        """Cone form signature: +1 on unstable coordinates, -1 on stable."""
        signs = np.empty(self.dim)
        for kind, idx in self.groups():
            signs[idx] = 1.0 if kind == "u" else -1.0
        return signs

    def contains(self, y: np.ndarray, inflate: float = 1.0) -> bool:
        """Membership of a frame point in B_u(delta) x B_s(delta)."""
        r = self.delta * inflate
        for _, idx in self.groups():
            if np.linalg.norm(y[idx]) > r * (1.0 + 1e-12):
                return False
        return True


@dataclass
class MarginsReport:
    """Worst-case slacks from the last isolation check; all > 0 certifies."""

    entry: float
    exit: float
    memory: float
    per_face: Dict[str, float]
    g_bound: float
    n_samples: int
    eps: float

    @property
    def certified(self) -> bool:
        return self.entry > 0.0 and self.exit > 0.0 and self.memory > 0.0

    def as_dict(self) -> dict:
        return {"entry": self.entry, "exit": self.exit, "memory": self.memory,
                "per_face": dict(self.per_face), "g_bound": self.g_bound,
                "n_samples": self.n_samples, "eps": self.eps,
                "certified": self.certified}


@dataclass
class ConeForm:
    """Quadratic cone Q(dy) - E ||d eta||^2 with its parameter budget.

    Q is diagonal +1 on unstable and -1 on stable coordinates (optionally
    rescaled); L_param and Delta extend the form to solution pairs at
    different coupling strengths via + L_param (eps1 - eps2)^2, valid for
    |eps_i| <= Delta.
    """

    Q: np.ndarray
    E: float
    G: float
    L_param: float = 0.0
    Delta: float = 0.0
    e_max: float = float("inf")
    e_max_coupled: bool = True  # E_max was evaluated on this block's field

    def value(self, dy: np.ndarray, deta_norm_sq: float,
              deps: float = 0.0) -> float:
        dy = np.asarray(dy, dtype=float)
        return float(dy @ self.Q @ dy - self.E * deta_norm_sq
                     + self.L_param * deps * deps)


# ---------------------------------------------------------------------------
# sampling helpers


def _grad_rows(P: Potential, X: np.ndarray) -> np.ndarray:
    if P.is_quartic_diag:
        a = np.asarray(P.family["a"], dtype=float)
        b = np.asarray(P.family["b"], dtype=float)
        return a * X - b * X ** 3
    return np.stack([P.grad_F(x) for x in X])


def _box_corners(block: IsolatingBlock, radius: float) -> np.ndarray:
    """Extreme points of the product set (compass points on disks)."""
    axes: List[np.ndarray] = []
    for _, idx in block.groups():
        if len(idx) == 1:
            axes.append(np.array([[-radius], [radius]]))
        else:
            th = np.linspace(0.0, 2.0 * math.pi, 8, endpoint=False)
            axes.append(radius * np.column_stack([np.cos(th), np.sin(th)]))
    counts = [len(a) for a in axes]
    out = np.zeros((int(np.prod(counts)), block.dim))
    for row, combo in enumerate(np.ndindex(*counts)):
        out[row] = np.concatenate([axes[g][c] for g, c in enumerate(combo)])
    return out


def _sup_samples(block: IsolatingBlock, radius: float, seed: int = 0) -> np.ndarray:
    """Frame points covering the box of the given radius (corners + Halton)."""
    d = block.dim
    u = halton(SUP_SAMPLES, d, seed=seed)
    pts = [np.zeros((1, d)), _box_corners(block, radius)]
    interior = np.empty((SUP_SAMPLES, d))
    for kind_idx, (_, idx) in enumerate(block.groups()):
        if len(idx) == 1:
            interior[:, idx[0]] = radius * (2.0 * u[:, idx[0]] - 1.0)
        else:
            rr = radius * np.sqrt(u[:, idx[0]])
            th = 2.0 * math.pi * u[:, idx[1]]
            interior[:, idx[0]] = rr * np.cos(th)
            interior[:, idx[1]] = rr * np.sin(th)
    pts.append(interior)
    return np.vstack(pts)


def _field_sups(block: IsolatingBlock, P: Potential, radius: float,
                seed: int = 0) -> Tuple[float, float]:
    """(sup |grad F|, sup |x|) over the block box of the given frame radius."""
    Y = _sup_samples(block, radius, seed=seed)
    X = Y @ block.frame.T.T + block.center.point
    g = _grad_rows(P, X)
    return (float(np.max(np.linalg.norm(g, axis=1))),
            float(np.max(np.linalg.norm(X, axis=1))))


# ---------------------------------------------------------------------------
# memory ball radius


def memory_radius(block: IsolatingBlock, eps: float, P: Potential,
                  kconst: KernelConstants) -> float:
    """Radius R of the invariant memory ball over the block.

    While the point stays in the box, d/dt ||eta||^2 <= -C_A ||eta||^2
    + 2 D_A ||eta|| |x'|, so the ball of radius
    2 D_A (sup|f| + eps int||M|| sup|x|) / (C_A - 2 eps D_A D_M)
    absorbs the memory; a 10% margin is added on top. EpsTooLarge when
    the coupling eats the whole decay rate.
    """
    C_A = kconst.C_A_safe
    denom = C_A - 2.0 * eps * kconst.D_A * kconst.D_M
    if denom <= 0.0:
        raise EpsTooLarge(f"eps={eps:.4g} at or beyond the decay budget "
                          f"{C_A / (2.0 * kconst.D_A * kconst.D_M):.4g}")
    sup_f, sup_x = _field_sups(block, P, 2.0 * block.delta)
    core = 2.0 * kconst.D_A * (sup_f + eps * kconst.int_norm_M * sup_x) / denom
    return 1.1 * core


# ---------------------------------------------------------------------------
# isolation verification


def _face_samples(block: IsolatingBlock, own: int, n: int,
                  seed: int) -> np.ndarray:
    """Boundary samples with the own group on its shell.

    Unstable own group: magnitude in [delta, 2 delta], other unstable
    groups anywhere in B(2 delta), stable groups in B(delta). Stable own
    group: magnitude exactly delta, other stable in B(delta), unstable in
    B(2 delta).
    """
    groups = block.groups()
    kind_own = groups[own][0]
    delta = block.delta
    u = halton(n, block.dim + 1, seed=seed)
    y = np.empty((n, block.dim))
    col = 0
    for g, (kind, idx) in enumerate(groups):
        if g == own:
            if kind == "u":
                mag = delta * (1.0 + u[:, col])
            else:
                mag = np.full(n, delta)
            if len(idx) == 1:
                sign = np.where(u[:, col + 1] < 0.5, -1.0, 1.0)
                y[:, idx[0]] = sign * mag
            else:
                th = 2.0 * math.pi * u[:, col + 1]
                y[:, idx[0]] = mag * np.cos(th)
                y[:, idx[1]] = mag * np.sin(th)
            col += 2
        else:
            r = 2.0 * delta if kind == "u" else delta
            if len(idx) == 1:
                y[:, idx[0]] = r * (2.0 * u[:, col] - 1.0)
                col += 1
            else:
                rr = r * np.sqrt(u[:, col])
                th = 2.0 * math.pi * u[:, col + 1]
                y[:, idx[0]] = rr * np.cos(th)
                y[:, idx[1]] = rr * np.sin(th)
                col += 2
    return y


def verify_isolation(block: IsolatingBlock, eps: float, P: Potential,
                     kernels: KernelPair,
                     n_boundary_samples: int = DEFAULT_BOUNDARY_SAMPLES,
                     seed: int = 0) -> MarginsReport:
    """Sample the box faces and check the entry/exit sign conditions.

    The transformed drift h(y) = T^{-1} grad F(x0 + T y) must push every
    unstable shell coordinate outward and every stable boundary coordinate
    inward by more than the uniform memory-coupling bound
    |g| <= eps ||T^{-1}|| (int||M|| (|x0| + sup|Ty|) + D_M R).
    The memory-ball condition is checked in closed form from the kernel
    constants. Never raises: the report carries the worst slack per face.
    """
    kc = kernels.constants
    frame = block.frame
    delta = block.delta
    d = block.dim
    norm_T = float(np.linalg.norm(frame.T, 2))
    norm_Ti = float(np.linalg.norm(frame.T_inv, 2))
    x0 = block.center.point
    r_sup = norm_T * 2.0 * delta * math.sqrt(d)
    g_bound = eps * norm_Ti * (kc.int_norm_M * (np.linalg.norm(x0) + r_sup)
                               + kc.D_M * block.R)

    per_face: Dict[str, float] = {}
    groups = block.groups()
    for own, (kind, idx) in enumerate(groups):
        Y = _face_samples(block, own, n_boundary_samples, seed=seed + own)
        X = Y @ frame.T.T + x0
        H = _grad_rows(P, X) @ frame.T_inv.T
        own_y = Y[:, idx]
        own_h = H[:, idx]
        radial = np.einsum("ij,ij->i", own_y, own_h) / np.linalg.norm(own_y, axis=1)
        if kind == "u":
            slack = radial - g_bound
            per_face[f"exit_{own}"] = float(np.min(slack))
        else:
            slack = -radial - g_bound
            per_face[f"entry_{own}"] = float(np.min(slack))

    exits = [v for k, v in per_face.items() if k.startswith("exit")]
    entries = [v for k, v in per_face.items() if k.startswith("entry")]
    exit_slack = float(np.min(exits)) if exits else float("inf")
    entry_slack = float(np.min(entries)) if entries else float("inf")

    sup_f, sup_x = _field_sups(block, P, 2.0 * delta)
    R = block.R
    memory_slack = (kc.C_A_safe * R * R
                    - 2.0 * kc.D_A * R * (sup_f + eps * kc.int_norm_M * sup_x
                                          + eps * kc.D_M * R))

    report = MarginsReport(entry=entry_slack, exit=exit_slack,
                           memory=float(memory_slack), per_face=per_face,
                           g_bound=float(g_bound),
                           n_samples=n_boundary_samples, eps=float(eps))
    block.margins = report
    return report


def build_block(eq: Equilibrium, P: Potential, kernels: KernelPair,
                eps: float = 0.0, kappa: float = DEFAULT_KAPPA,
                delta: Optional[float] = None,
                others: Optional[Sequence[Equilibrium]] = None,
                n_boundary_samples: int = DEFAULT_BOUNDARY_SAMPLES) -> IsolatingBlock:
    """Construct and certify a block around an equilibrium.

    The initial half-width is 0.2 times the gap to the nearest other rest
    point (or the explicit delta); it is halved until verify_isolation
    certifies, at most 10 times.
    """
    frame = build_frame(eq.jacobian, kappa=kappa)
    if delta is None:
        gap = float("inf")
        for other in others or []:
            dist = float(np.linalg.norm(other.point - eq.point))
            if dist > 1e-12:
                gap = min(gap, dist)
        if not math.isfinite(gap):
            gap = 1.0 + float(np.linalg.norm(eq.point))
        delta = DELTA_SEARCH_FACTOR * gap
    block = IsolatingBlock(center=eq, frame=frame, delta=float(delta),
                           R=0.0, dims=frame.dims)
    for _ in range(MAX_DELTA_HALVINGS + 1):
        block.R = memory_radius(block, eps, P, kernels.constants)
        report = verify_isolation(block, eps, P, kernels,
                                  n_boundary_samples=n_boundary_samples)
        if report.certified:
            return block
        block.delta *= 0.5
    raise BoundsViolated({"delta": block.delta, "entry": report.entry,
                          "exit": report.exit, "memory": report.memory})


# ---------------------------------------------------------------------------
# cone certificates


def cone_certificate(block: IsolatingBlock, eps: float, E: float, P: Potential,
                     kconst: KernelConstants,
                     q_scale: float = 1.0) -> Tuple[float, np.ndarray, bool]:
    """Coercivity constant and the 2x2 closing matrix of the cone argument.

    G is the worst eigenvalue of Df^T Q + Q Df over the block (in frame
    coordinates) and must be positive: NoCoercivity otherwise. The form
    Q(dx) - E ||d eta||^2 increases along solution pairs when

        B = [[G, -(eps D_M ||Q|| + E D_A ||Df||)],
             [ ",  C_A E - 2 eps D_A D_M      ]]

    is positive definite; returns (G, B, positive).
    """
    Q = np.diag(q_scale * block.q_signs())
    Y = _sup_samples(block, block.delta)
    X = Y @ block.frame.T.T + block.center.point
    G = float("inf")
    norm_df = 0.0
    for x in X:
        Jx = P.hess_F(x) + eps * kconst.M_total
        Jy = block.frame.T_inv @ Jx @ block.frame.T
        S = Jy.T @ Q + Q @ Jy
        G = min(G, float(np.linalg.eigvalsh(0.5 * (S + S.T))[0]))
        norm_df = max(norm_df, float(np.linalg.norm(Jy, 2)))
    if G <= 0.0:
        raise NoCoercivity(f"worst symmetrized eigenvalue {G:.4g} is not positive")
    C_A = kconst.C_A_safe
    norm_Q = abs(q_scale)
    off = -(eps * kconst.D_M * norm_Q + E * kconst.D_A * norm_df)
    B = np.array([[G, off], [off, C_A * E - 2.0 * eps * kconst.D_A * kconst.D_M]])
    positive = bool(np.trace(B) > 0.0 and np.linalg.det(B) > 0.0)
    return G, B, positive


def _cone_field_data(block: IsolatingBlock, kconst: KernelConstants,
                     P: Potential, q_scale: float) -> Tuple[float, float, float]:
    """(G, ||Df||, E_max) for the parameterized budget, evaluated at eps=0."""
    Q = np.diag(q_scale * block.q_signs())
    Y = _sup_samples(block, block.delta)
    X = Y @ block.frame.T.T + block.center.point
    G = float("inf")
    norm_df = 0.0
    for x in X:
        Jy = block.frame.T_inv @ P.hess_F(x) @ block.frame.T
        S = Jy.T @ Q + Q @ Jy
        G = min(G, float(np.linalg.eigvalsh(0.5 * (S + S.T))[0]))
        norm_df = max(norm_df, float(np.linalg.norm(Jy, 2)))
    if G <= 0.0:
        raise NoCoercivity(f"worst symmetrized eigenvalue {G:.4g} is not positive")
    C_A = kconst.C_A_safe
    e_max = C_A * G / (kconst.D_A ** 2 * norm_df ** 2)
    return G, norm_df, e_max


def parameterized_cone_budget(block: IsolatingBlock, E: float,
                              kconst: KernelConstants, P: Potential,
                              q_scale: float = 1.0) -> Tuple[float, float]:
    """Parameter weight L0 and coupling half-width Delta for the extended cone.

    The form Q(dx) - E ||d eta||^2 + L (eps1 - eps2)^2 increases along any
    pair of solutions at couplings |eps_i| <= Delta once L >= L0. With
    R_bar = int||M|| sup|x| + D_M R the closing argument needs

        sqrt(L) >= max{4 ||Q||^{3/2} R_bar / G, 8 sqrt(E_max) D_A R_bar / C_A}
        L >= 100 R_bar^2 ||Q|| max{E_max D_A^2, ||Q||} / (C_A G)
        Delta <= C_A / (8 D_A D_M)
        Delta^2 <= min{E C_A G / (100 ||Q||^2 D_M^2),
                       C_A G / (100 E D_A^2 (int||M||)^2)}

    and the weight itself must satisfy E <= E_max / 100. Zero memory
    collapses to L0 = 0 and an unconstrained Delta.
    """
    G, _, e_max = _cone_field_data(block, kconst, P, q_scale)
    if E > e_max / 100.0:
        raise NoCoercivity(f"E={E:.4g} exceeds the closing budget {e_max / 100.0:.4g}")
    norm_Q = abs(q_scale)
    _, sup_x = _field_sups(block, P, block.delta)
    R_bar = kconst.int_norm_M * sup_x + kconst.D_M * block.R

    L0 = max(budget_terms(G, e_max, R_bar, kconst, norm_Q)) if R_bar > 0.0 else 0.0

    C_A = kconst.C_A_safe
    D_A, D_M, int_M = kconst.D_A, kconst.D_M, kconst.int_norm_M
    caps = []
    if D_M > 0.0:
        caps.append(C_A / (8.0 * D_A * D_M))
        caps.append(math.sqrt(E * C_A * G / (100.0 * norm_Q ** 2 * D_M ** 2)))
    if int_M > 0.0:
        caps.append(math.sqrt(C_A * G / (100.0 * E * D_A ** 2 * int_M ** 2)))
    Delta = float(min(caps)) if caps else float("inf")
    return float(L0), Delta


def budget_terms(G: float, e_max: float, R_bar: float,
                 kconst: KernelConstants, norm_Q: float = 1.0) -> Tuple[float, float, float, float]:
    """The four lower bounds whose maximum is L0.

    Two from the square-root constraints, two from the closing argument;
    at fixed G the last one scales like ||Q||^2.
    """
    C_A = kconst.C_A_safe
    D_A = kconst.D_A
    return ((4.0 * norm_Q ** 1.5 * R_bar / G) ** 2,
            (8.0 * math.sqrt(e_max) * D_A * R_bar / C_A) ** 2,
            100.0 * e_max * norm_Q * D_A ** 2 * R_bar ** 2 / (C_A * G),
            100.0 * norm_Q ** 2 * R_bar ** 2 / (C_A * G))


# ---------------------------------------------------------------------------
# dynamic cone check


def _pair_on_boundary(block: IsolatingBlock, E: float, L: float, deps: float,
                      rng: np.random.Generator) -> Optional[Tuple[np.ndarray, np.ndarray, float]]:
    """(y_center, dy, |d eta|) with Q(dy) - E|d eta|^2 + L deps^2 = 0.

    Both endpoints y_center -+ dy/2 stay in B(delta) and the memory
    offsets leave room under the ball radius R. Returns None when the
    sampled magnitudes admit no real solution (resampled by the caller).
    """
    d = block.dim
    delta = block.delta
    signs = block.q_signs()
    u_idx = np.where(signs > 0)[0]
    s_idx = np.where(signs < 0)[0]
    yc = rng.uniform(-delta / (3.0 * math.sqrt(d)),
                     delta / (3.0 * math.sqrt(d)), size=d)
    shift = L * deps * deps

    b = rng.uniform(0.0, delta / 4.0) if len(s_idx) else 0.0
    deta = rng.uniform(0.0, block.R)
    if len(u_idx) == 0:
        # no unstable part: rescale (b, |d eta|) onto the boundary sphere
        target = shift
        total = b * b + E * deta * deta
        if target <= 0.0 or total <= 0.0:
            return None
        scale = math.sqrt(target / total)
        b *= scale
        deta *= scale
        if b > delta / 2.0 or deta > 0.95 * block.R:
            return None
        a = 0.0
    else:
        a_sq = b * b + E * deta * deta - shift
        if a_sq < 0.0:
            return None
        a = math.sqrt(a_sq)
        if a > delta / 2.0:
            return None
    dy = np.zeros(d)
    if len(u_idx):
        du = rng.normal(size=len(u_idx))
        dy[u_idx] = a * du / np.linalg.norm(du)
    if len(s_idx) and b > 0.0:
        ds = rng.normal(size=len(s_idx))
        dy[s_idx] = b * ds / np.linalg.norm(ds)
    if not (block.contains(yc - dy / 2.0) and block.contains(yc + dy / 2.0)):
        return None
    return yc, dy, deta


def _d_eta_norm_sq_dt(deta: HistoryFunction, dxp: np.ndarray,
                      kernels: KernelPair) -> float:
    """d/dt ||d eta||^2 = int (A' d eta, d eta) - 2 (int A d eta, dx')."""
    A = kernels.A
    grid = deta.grid
    vals = deta.values
    w = _trapezoid_weights(grid)
    if A.is_isotropic and A.scalar_derivative is not None:
        da = A.scalar_derivative(grid)
        quad = float(np.sum(w * da * np.einsum("ij,ij->i", vals, vals)))
    else:
        dAs = A.derivative_matrices(grid)
        quad = float(np.sum(w * np.einsum("sij,si,sj->s", dAs, vals, vals)))
    return float(quad - 2.0 * (kernel_integral(A, deta) @ dxp))


def verify_cone_dynamic(block: IsolatingBlock, eps_pair: Tuple[float, float],
                        E: float, L: float, n_pairs: int = 100,
                        t_span: float = 1.0, dt: float = 0.01,
                        seed: int = 0, q_scale: float = 1.0) -> float:
    """Monotonicity check of the parameterized cone form along solution pairs.

    Pairs start on the cone boundary (form = 0); for each the analytic
    time derivative at t = 0 and the minimum of the form along the pair of
    trajectories (while both remain in the block and under the memory
    ball) are recorded. Returns the worst slack over all pairs; a
    certificate needs it > -tol for the caller's tolerance.
    """
    eq = block.center
    P, kernels = eq.potential, eq.kernels
    if P is None or kernels is None:
        raise ValueError("block center carries no potential/kernel context")
    eps1, eps2 = float(eps_pair[0]), float(eps_pair[1])
    deps = eps1 - eps2
    signs = q_scale * block.q_signs()
    rng = np.random.default_rng(seed)
    d = block.dim
    worst = float("inf")
    f1, _ = perturbed_field(P, kernels, eps1)
    f2, _ = perturbed_field(P, kernels, eps2)

    # profiles live on the integration grid so the boundary equality at
    # t = 0 survives the trajectory-side quadrature bitwise
    nA = max(1, int(round(kernels.A.s_max / dt)))
    grid = np.arange(nA + 1) * dt

    made = 0
    attempts = 0
    while made < n_pairs and attempts < 50 * n_pairs:
        attempts += 1
        pick = _pair_on_boundary(block, E, L, deps, rng)
        if pick is None:
            continue
        yc, dy, deta_norm = pick
        made += 1

        dir_c = rng.normal(size=d)
        dir_c /= np.linalg.norm(dir_c)
        dir_d = rng.normal(size=d)
        dir_d /= np.linalg.norm(dir_d)
        c_mag = rng.uniform(0.0, max(0.0, 0.95 * block.R - 0.5 * deta_norm))
        eta_c = profile_history(kernels.A, dir_c, c_mag, grid=grid)
        half = profile_history(kernels.A, dir_d, 0.5 * deta_norm, grid=grid)
        eta1 = HistoryFunction(grid, eta_c.values - half.values)
        eta2 = HistoryFunction(grid, eta_c.values + half.values)

        x1 = block.from_frame(yc - dy / 2.0)
        x2 = block.from_frame(yc + dy / 2.0)

        # analytic derivative of the form at t = 0
        dx = x1 - x2
        dxp = (f1(x1) + eps1 * kernel_integral(kernels.M, eta1)
               - f2(x2) - eps2 * kernel_integral(kernels.M, eta2))
        dyv = block.frame.T_inv @ dx
        dyp = block.frame.T_inv @ dxp
        deta = HistoryFunction(grid, eta1.values - eta2.values)
        slope = (2.0 * float((signs * dyv) @ dyp)
                 - E * _d_eta_norm_sq_dt(deta, dxp, kernels))
        worst = min(worst, slope)

        # the form along the integrated pair, while both stay in the block
        tr1 = integrate(HistoryState(x1, eta1), P, kernels, eps1, t_span, dt)
        tr2 = integrate(HistoryState(x2, eta2), P, kernels, eps2, t_span, dt)
        D = tr1.timeline - tr2.timeline
        nsq = _eta_norm_sq_series(D, tr1.n_pre, dt, kernels.A)
        Y1 = (tr1.x - eq.point) @ block.frame.T_inv.T
        Y2 = (tr2.x - eq.point) @ block.frame.T_inv.T
        n1 = tr1.eta_norm_sq_series()
        n2 = tr2.eta_norm_sq_series()
        q_vals = (np.einsum("ij,j,ij->i", Y1 - Y2, signs, Y1 - Y2)
                  - E * nsq + L * deps * deps)
        for k in range(len(q_vals)):
            ok = (block.contains(Y1[k]) and block.contains(Y2[k])
                  and n1[k] <= block.R ** 2 * (1.0 + 1e-9)
                  and n2[k] <= block.R ** 2 * (1.0 + 1e-9))
            if not ok:
                break
            worst = min(worst, float(q_vals[k]))
    if made == 0:
        return 0.0
    return float(worst)

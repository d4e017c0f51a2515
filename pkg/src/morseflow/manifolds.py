"""Local invariant manifolds by graph transform on a time-T flow map.

The flow inside a certified block is sampled by a fixed-step time-T map in
frame coordinates. Horizontal (unstable) and vertical (stable) Lipschitz
disks are fixed points of the associated graph transforms, found by sweeping
implicit per-node solves; derivative fields ride on top by fiber contraction.
The memory variable stays part of the stable fiber throughout: a horizontal
disk stores a full discretized history per node, while a vertical disk is
sampled over a finite probe set of history directions (gridding the history
ball itself is infeasible).
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from . import dynamics
from ._sampling import halton, profile_history
from .blocks import IsolatingBlock
from .dynamics import HistoryState, VariationalState, _window_counts, _zero_memory
from .errors import (BoundsViolated, FiberNotContracting, GridMismatch,
                     NewtonStall, NotContracting)
from .kernels import HistoryFunction, weighted_norm_sq

GRID_NODES = 17
TOL_FIXED_POINT = 1e-9
MAX_SWEEPS = 200
NEWTON_ITERS = 50
NEWTON_HALVINGS = 8
L_MAX = 64.0
# measured iterate ratios are allowed this much slack over the predicted rate
CONTRACTION_SLACK = 1.1


# -- time-T map ----------------------------------------------------------

@dataclass(eq=False)
class TimeTMap:
    """Time-T map of the perturbed flow in block frame coordinates.

    The evaluator takes (eta_values, y_local) and returns the image pair;
    eta values live on ``eta_grid`` in ambient coordinates, y_local in the
    block frame. The derivative evaluator takes an additional tangent pair
    (dtheta_values, dy) and returns the Jacobian action computed by the
    variational integrator along the base trajectory.
    """

    block: IsolatingBlock
    eps: float
    T: float
    evaluator: Callable
    derivative_evaluator: Callable
    dt: float = 0.0
    eta_grid: Optional[np.ndarray] = None
    n_steps: int = 0

    # construction context
    potential: object = None
    kernels: object = None

    @property
    def dims(self) -> Tuple[int, int]:
        """(unstable, stable) coordinate counts of the frame."""
        du = self.block.center.unstable_dim
        return du, self.block.dim - du

    def zero_eta(self) -> np.ndarray:
        return np.zeros((self.eta_grid.shape[0], self.block.dim))

    def eta_norm_sq(self, vals: np.ndarray) -> float:
        """Weighted squared norm of history values on the map grid."""
        return weighted_norm_sq(HistoryFunction(self.eta_grid, vals),
                                self.kernels.A)

    def fiber_norm(self, dys: np.ndarray, deta: Optional[np.ndarray]) -> float:
        """Stable-fiber metric: frame coordinates plus weighted history norm."""
        s = float(np.dot(dys, dys))
        if deta is not None:
            s += self.eta_norm_sq(deta)
        return math.sqrt(s)


def make_time_T_map(block: IsolatingBlock, eps: float, T: float,
                    dt: float) -> TimeTMap:
    """Wrap the integrator as a time-T map in the block's frame.

    Parameters
    ----------
    block : IsolatingBlock
        Certified block whose center carries potential/kernel context.
    eps : float
        Memory coupling strength, >= 0.
    T : float
        Flow time of the map; must be a positive multiple of dt.
    dt : float
        Integrator step, also the history grid step.

    Returns
    -------
    TimeTMap

    Raises
    ------
    ValueError
        On T not a positive multiple of dt or a context-free block.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if T <= 0:
        raise ValueError("T must be positive")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a positive multiple of dt")
    P = block.center.potential
    kernels = block.center.kernels
    if P is None or kernels is None:
        raise ValueError("block center carries no potential/kernel context")

    mem_on = eps > 0 and not _zero_memory(kernels.M)
    nA, nM = _window_counts(kernels, dt, mem_on)
    n_pre = max(nA, nM)
    grid = np.arange(n_pre + 1) * dt

    def _base(eta_vals, y):
        y = np.asarray(y, dtype=float)
        x0 = block.from_frame(y)
        eta = None
        if eta_vals is not None and np.any(eta_vals):
            eta = HistoryFunction(grid, np.asarray(eta_vals, dtype=float))
        return dynamics.integrate(HistoryState(x=x0, eta=eta), P, kernels,
                                  eps, T, dt)

    def evaluator(eta_vals, y):
        tr = _base(eta_vals, y)
        fin = tr.eta_at(tr.n_steps)
        if fin.grid.shape[0] != grid.shape[0]:
            raise GridMismatch("integrator window disagrees with the map grid")
        return fin.values, block.to_frame(tr.timeline[-1])

    def derivative_evaluator(eta_vals, y, dtheta_vals, dy, base=None):
        tr = base if base is not None else _base(eta_vals, y)
        w0 = block.frame.T @ np.asarray(dy, dtype=float)
        theta = None
        if dtheta_vals is not None and np.any(dtheta_vals):
            theta = HistoryFunction(grid, np.asarray(dtheta_vals, dtype=float))
        var = dynamics.integrate_variational(tr, VariationalState(w0, theta),
                                             eps)
        out = var.theta_at(tr.n_steps)
        return out.values, block.frame.T_inv @ var.w[-1]

    mp = TimeTMap(block=block, eps=eps, T=T, evaluator=evaluator,
                  derivative_evaluator=derivative_evaluator, dt=dt,
                  eta_grid=grid, n_steps=n_steps, potential=P,
                  kernels=kernels)
    mp._base = _base
    return mp


# -- transform constants -------------------------------------------------

@dataclass
class TransformConstants:
    """The five graph-transform constants at a given aperture L.

    xi and xi1 must exceed 1 (horizontal expansion), mu, beta and mu1 must
    stay below 1 (fiber contraction); construction raises otherwise, so an
    instance certifies the bounds.
    """

    xi: float
    mu: float
    beta: float
    xi1: float
    mu1: float
    L: float
    derivative_norm_samples: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {"xi": self.xi, "mu": self.mu, "beta": self.beta,
               "xi1": self.xi1, "mu1": self.mu1, "L": self.L}
        out.update({f"norm_{k}": v for k, v in
                    self.derivative_norm_samples.items()})
        return out


def _memory_probes(mp: TimeTMap, norm: float, axis_offset: int = 0):
    """Unit probe histories: two extremal hats and one smooth tail shape.

    Directions cycle through the ambient axes starting at axis_offset so
    repeated calls jointly cover all components.
    """
    A = mp.kernels.A
    grid = mp.eta_grid
    d = mp.block.dim
    shapes = [("bump", 1), ("bump", grid.shape[0] - 1), ("smooth", None)]
    out = []
    for j, (kind, node) in enumerate(shapes):
        direction = np.zeros(d)
        direction[(j + axis_offset) % d] = 1.0
        h = profile_history(A, direction, norm, kind=kind, node=node,
                            grid=grid)
        out.append(h.values)
    return out


def _unit(d: int, i: int) -> np.ndarray:
    e = np.zeros(d)
    e[i] = 1.0
    return e


def transform_constants(mp: TimeTMap, L: float,
                        n_samples: int = 12, seed: int = 0) -> TransformConstants:
    """Sample the four block derivative norms and form the five constants.

    The unstable component of the map is f_x, the (stable, memory) pair is
    the fiber f_y; the memory rows and columns are measured in the weighted
    history norm through variational runs against the probe set. With a zero
    coupling family the memory direction is dynamically decoupled and is
    dropped from the fiber, reducing to the finite-dimensional map.

    Raises
    ------
    BoundsViolated
        Listing the failing constants; signals to enlarge T, shrink delta,
        or shrink eps.
    """
    if L <= 0:
        raise ValueError("aperture L must be positive")
    du, ds = mp.dims
    d = du + ds
    blk = mp.block
    delta = blk.delta
    include_eta = not _zero_memory(mp.kernels.M)

    pts = (2.0 * halton(n_samples, d, seed) - 1.0) * delta
    base_etas: List[Optional[np.ndarray]] = [None]
    if include_eta:
        shapes = _memory_probes(mp, 0.5 * blk.R)
        base_etas += [shapes[2], shapes[0]]  # smooth tail, near hat

    m_vals: List[float] = []
    fx_y = 0.0
    fy_x = 0.0
    fy_y = 0.0
    for k, y in enumerate(pts):
        eta0 = base_etas[k % len(base_etas)]
        tr = mp._base(eta0, y)

        # unstable inputs: assemble the exact f_x block, fiber rows give fy_x
        if du:
            A_uu = np.empty((du, du))
            for i in range(du):
                th, dy_out = mp.derivative_evaluator(eta0, y, None,
                                                     _unit(d, i), base=tr)
                A_uu[:, i] = dy_out[:du]
                fy_x = max(fy_x, mp.fiber_norm(dy_out[du:],
                                               th if include_eta else None))
            m_vals.append(float(np.linalg.svd(A_uu, compute_uv=False)[-1]))

        # fiber inputs: stable basis plus memory probes, all unit size
        fiber_dirs: List[Tuple[Optional[np.ndarray], np.ndarray]] = []
        for j in range(ds):
            fiber_dirs.append((None, _unit(d, du + j)))
        if ds == 2:
            diag = np.zeros(d)
            diag[du:] = 1.0 / math.sqrt(2.0)
            fiber_dirs.append((None, diag))
        if include_eta:
            for p in _memory_probes(mp, 1.0, axis_offset=k):
                fiber_dirs.append((p, np.zeros(d)))
        for dtheta, dy in fiber_dirs:
            th, dy_out = mp.derivative_evaluator(eta0, y, dtheta, dy, base=tr)
            fx_y = max(fx_y, float(np.linalg.norm(dy_out[:du])))
            fy_y = max(fy_y, mp.fiber_norm(dy_out[du:],
                                           th if include_eta else None))

    m = min(m_vals) if m_vals else math.inf
    xi = m - L * fx_y
    mu = fy_x / L + fy_y
    beta = (mu / xi) * L * fx_y + fy_y if xi > 0 else math.inf
    xi1 = m - fy_x / L
    mu1 = fy_y + L * fx_y

    failed: Dict[str, float] = {}
    if not xi > 1.0:
        failed["xi"] = xi
    if not mu < 1.0:
        failed["mu"] = mu
    if not beta < 1.0:
        failed["beta"] = beta
    if not xi1 > 1.0:
        failed["xi1"] = xi1
    if not mu1 < 1.0:
        failed["mu1"] = mu1
    if failed:
        raise BoundsViolated(failed)
    samples = {"m_fx_x": m, "fx_y": fx_y, "fy_x": fy_x, "fy_y": fy_y}
    return TransformConstants(xi=xi, mu=mu, beta=beta, xi1=xi1, mu1=mu1,
                              L=L, derivative_norm_samples=samples)


def select_aperture(mp: TimeTMap, L0: float = 1.0, L_max: float = L_MAX,
                    n_samples: int = 12, seed: int = 0):
    """Double the aperture until all five constants pass.

    A large fiber-to-base norm is tamed by a large L; the bound scan stops
    at the first admissible aperture and returns (L, constants).
    """
    L = float(L0)
    last = None
    while L <= L_max * (1 + 1e-12):
        try:
            return L, transform_constants(mp, L, n_samples=n_samples,
                                          seed=seed)
        except BoundsViolated as err:
            last = err
            L *= 2.0
    raise last


# -- disks ---------------------------------------------------------------

@dataclass(eq=False)
class DiskFunction:
    """A Lipschitz graph over the block's base box.

    Horizontal disks map unstable coordinates to (stable coords, history
    values); vertical disks map (stable coords, probe history) to unstable
    coordinates. Node order is C order over the axes, with the probe index
    minor for vertical disks.
    """

    orientation: str
    domain_grid: Tuple[np.ndarray, ...]
    values_y: np.ndarray
    values_eta: Optional[np.ndarray]
    lip_estimate: float
    L_bound: float
    probes: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        if self.orientation not in ("horizontal", "vertical"):
            raise ValueError("orientation must be horizontal or vertical")

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(ax) for ax in self.domain_grid)

    def validate(self):
        """Check the declared Lipschitz budget; raise BoundsViolated."""
        bound = self.L_bound if self.orientation == "horizontal" \
            else 1.0 / self.L_bound
        if self.lip_estimate > bound * (1 + 1e-9):
            raise BoundsViolated({"lip": self.lip_estimate})

    def eval_horizontal(self, xu):
        """Multilinear fiber at an unstable base point: (y_s, eta values)."""
        if self.orientation != "horizontal":
            raise ValueError("not a horizontal disk")
        if not self.domain_grid:
            return self.values_y[0], self.values_eta[0]
        ys = np.zeros(self.values_y.shape[1])
        eta = np.zeros(self.values_eta.shape[1:])
        for idx, w in _cell_weights(self.domain_grid, self.shape,
                                    np.atleast_1d(xu)):
            ys += w * self.values_y[idx]
            eta += w * self.values_eta[idx]
        return ys, eta

    def eval_vertical(self, ys, probe_index: int):
        """Unstable fiber at (stable coords, probe index)."""
        if self.orientation != "vertical":
            raise ValueError("not a vertical disk")
        n_probes = len(self.probes)
        if not self.domain_grid:
            return self.values_y[probe_index].copy()
        u = np.zeros(self.values_y.shape[1])
        for idx, w in _cell_weights(self.domain_grid, self.shape,
                                    np.atleast_1d(ys)):
            u += w * self.values_y[idx * n_probes + probe_index]
        return u


def _cell_weights(axes, shape, x):
    """Multilinear cell weights: pairs (flat node index, weight)."""
    per_axis = []
    for ax, xi in zip(axes, x):
        j = int(np.searchsorted(ax, xi)) - 1
        j = min(max(j, 0), len(ax) - 2)
        t = (float(xi) - ax[j]) / (ax[j + 1] - ax[j])
        t = min(max(t, 0.0), 1.0)
        per_axis.append(((j, 1.0 - t), (j + 1, t)))
    out = []
    for combo in itertools.product(*per_axis):
        idx = tuple(c[0] for c in combo)
        w = 1.0
        for c in combo:
            w *= c[1]
        if w:
            out.append((int(np.ravel_multi_index(idx, shape)), w))
    return out


def _solve_implicit(F, seed, atol, radius, bisect_1d=False):
    """Damped quasi-Newton root solve clipped to the base box.

    F(u) -> (residual, aux). Finite-difference Jacobian with Broyden
    updates and step halving; an optional bracketing fallback covers the
    one-dimensional case. Returns (u, aux, residual) with u None on stall.
    """
    u = np.array(seed, dtype=float)
    n = u.shape[0]
    phi, aux = F(u)
    J = None
    refreshed = 0
    for _ in range(NEWTON_ITERS):
        res = float(np.linalg.norm(phi))
        if res <= atol:
            return u, aux, res
        if J is None:
            J = np.empty((n, n))
            h = 1e-6 * (1.0 + float(np.linalg.norm(u)))
            for c in range(n):
                phi_c, _ = F(u + h * _unit(n, c))
                J[:, c] = (phi_c - phi) / h
        try:
            p = -np.linalg.solve(J, phi)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        accepted = False
        for _ in range(NEWTON_HALVINGS):
            cand = np.clip(u + lam * p, -radius, radius)
            phi_c, aux_c = F(cand)
            if (np.linalg.norm(phi_c) < (1 - 0.25 * lam) * res
                    or np.linalg.norm(phi_c) <= atol):
                s = cand - u
                ss = float(np.dot(s, s))
                if ss > 0:
                    J += np.outer(phi_c - phi - J @ s, s) / ss
                u, phi, aux = cand, phi_c, aux_c
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            J = None
            refreshed += 1
            if refreshed > 2:
                break
    res = float(np.linalg.norm(phi))
    if res <= atol:
        return u, aux, res
    if bisect_1d and n == 1:
        g = lambda t: F(np.array([t]))[0][0]
        ga, gb = g(-radius), g(radius)
        if ga * gb < 0:
            root = brentq(g, -radius, radius, xtol=1e-13)
            u = np.array([root])
            phi, aux = F(u)
            return u, aux, float(np.linalg.norm(phi))
    return None, None, res


def _spectral_rate(block: IsolatingBlock, unstable: bool) -> float:
    re = [lam.real for lam in block.center.spectrum
          if (lam.real > 0) == unstable]
    if not re:
        return 1.0
    return min(abs(r) for r in re)


def unstable_manifold(mp: TimeTMap, L: float,
                      tol_fixed_point: float = TOL_FIXED_POINT,
                      max_iters: int = MAX_SWEEPS,
                      n_nodes: int = GRID_NODES,
                      initial_offset: Optional[np.ndarray] = None) -> DiskFunction:
    """Graph-transform fixed point over the unstable coordinates.

    Starting from the flat disk, each sweep pulls every base node back
    through the map: the implicit equation f_x(xbar, h(xbar)) = x is solved
    per node by damped Newton seeded from the previous preimage (bracketing
    fallback in one unstable dimension, continuation from the nearest solved
    neighbor otherwise), and the fiber at the preimage becomes the new
    value. Sweeps run center outward so continuation seeds are available.

    Returns a horizontal DiskFunction carrying the preimages and the
    measured iterate ratios. initial_offset shifts the seed disk's stable
    coordinates away from flat, for convergence diagnostics.

    Raises
    ------
    NewtonStall
        A node solve failed after all fallbacks.
    NotContracting
        Iterate distances stopped shrinking, or max_iters was exhausted.
    BoundsViolated
        The converged disk breaks its declared Lipschitz budget.
    """
    du, ds = mp.dims
    blk = mp.block
    delta = blk.delta
    n_eta = mp.eta_grid.shape[0]
    d = du + ds
    if du == 0:
        disk = DiskFunction("horizontal", (), np.zeros((1, ds)),
                            np.zeros((1, n_eta, d)), 0.0, float(L))
        disk._map = mp
        disk._preimages = np.zeros((1, 0))
        disk._base_points = np.zeros((1, 0))
        disk.iterate_ratios = []
        return disk

    axes = tuple(np.linspace(-delta, delta, n_nodes) for _ in range(du))
    shape = (n_nodes,) * du
    base = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, du)
    N = base.shape[0]
    order = np.argsort(np.linalg.norm(base, axis=1), kind="stable")

    vy = np.zeros((N, ds))
    if initial_offset is not None:
        vy += np.asarray(initial_offset, dtype=float)
    veta = np.zeros((N, n_eta, d))
    pre = base * math.exp(-mp.T * _spectral_rate(blk, unstable=True))
    atol = 0.05 * tol_fixed_point

    ratios: List[float] = []
    prev_dist = None
    for sweep in range(max_iters):
        frozen = DiskFunction("horizontal", axes, vy, veta, 0.0, float(L))
        nvy = np.empty_like(vy)
        nveta = np.empty_like(veta)
        npre = pre.copy()
        solved = np.zeros(N, dtype=bool)
        for i in order:
            def F(xu, _i=i):
                ys, eta = frozen.eval_horizontal(xu)
                eta_out, y_out = mp.evaluator(eta, np.concatenate([xu, ys]))
                return y_out[:du] - base[_i], (y_out[du:], eta_out)

            xbar, aux, res = _solve_implicit(F, npre[i], atol, delta,
                                             bisect_1d=(du == 1))
            if xbar is None and solved.any():
                # continuation: reseed from the nearest already solved node
                done = np.flatnonzero(solved)
                j = done[np.argmin(np.linalg.norm(base[done] - base[i],
                                                  axis=1))]
                xbar, aux, res = _solve_implicit(F, npre[j], atol, delta,
                                                 bisect_1d=(du == 1))
            if xbar is None:
                raise NewtonStall(tuple(base[i]), res)
            npre[i] = xbar
            nvy[i], nveta[i] = aux
            solved[i] = True

        dist = max(mp.fiber_norm(nvy[i] - vy[i], nveta[i] - veta[i])
                   for i in range(N))
        vy, veta, pre = nvy, nveta, npre
        if prev_dist is not None and prev_dist > 0:
            r = dist / prev_dist
            ratios.append(r)
            if sweep >= 2 and r >= 1.0 and dist > tol_fixed_point:
                raise NotContracting(
                    f"iterate ratio {r:.4f} at sweep {sweep}")
        prev_dist = dist
        if dist <= tol_fixed_point:
            break
    else:
        raise NotContracting(
            f"no convergence after {max_iters} sweeps (last {dist:.2e})")

    lip = _horizontal_lip(mp, axes, shape, vy, veta)
    disk = DiskFunction("horizontal", axes, vy, veta, lip, float(L))
    disk.validate()
    disk._map = mp
    disk._preimages = pre
    disk._base_points = base
    disk.iterate_ratios = ratios
    disk.sweeps = sweep + 1
    return disk


def _horizontal_lip(mp, axes, shape, vy, veta):
    """Max fiber change over base change across grid-neighbor pairs."""
    lip = 0.0
    for a, ax in enumerate(axes):
        h = ax[1] - ax[0]
        for idx in np.ndindex(*shape):
            if idx[a] + 1 >= shape[a]:
                continue
            jdx = list(idx)
            jdx[a] += 1
            i = int(np.ravel_multi_index(idx, shape))
            j = int(np.ravel_multi_index(tuple(jdx), shape))
            lip = max(lip, mp.fiber_norm(vy[j] - vy[i],
                                         veta[j] - veta[i]) / h)
    return lip


def _vertical_probes(mp: TimeTMap) -> List[np.ndarray]:
    """Base probe set for vertical disks: flat plus three shapes at R/2."""
    return [mp.zero_eta()] + _memory_probes(mp, 0.5 * mp.block.R)


def stable_manifold(mp: TimeTMap, L: float, tol: float = TOL_FIXED_POINT,
                    max_iters: int = MAX_SWEEPS,
                    n_nodes: int = GRID_NODES) -> DiskFunction:
    """Graph-transform fixed point over the (stable, memory) base.

    The base grids the stable coordinates and carries the finite probe set
    of history directions; per node the implicit equation
    f_x(u, y) = v(f_y(u, y)) is solved for the unstable fiber u, evaluating
    the current disk at the image's stable coordinates under the same probe
    index. With no unstable directions the disk degenerates to the full box
    with zero fiber.
    """
    du, ds = mp.dims
    blk = mp.block
    delta = blk.delta
    probes = _vertical_probes(mp)
    nP = len(probes)
    axes = tuple(np.linspace(-delta, delta, n_nodes) for _ in range(ds))
    shape = (n_nodes,) * ds
    if ds:
        sbase = np.stack(np.meshgrid(*axes, indexing="ij"),
                         axis=-1).reshape(-1, ds)
    else:
        sbase = np.zeros((1, 0))
    Ns = sbase.shape[0]
    N = Ns * nP

    if du == 0:
        disk = DiskFunction("vertical", axes, np.zeros((N, 0)), None,
                            0.0, float(L), probes=probes)
        disk._map = mp
        disk._base_points = sbase
        disk.iterate_ratios = []
        return disk

    vals = np.zeros((N, du))
    atol = 0.05 * tol
    ratios: List[float] = []
    prev_dist = None
    for sweep in range(max_iters):
        frozen = DiskFunction("vertical", axes, vals, None, 0.0, float(L),
                              probes=probes)
        nvals = np.empty_like(vals)
        for si in range(Ns):
            for p in range(nP):
                node = si * nP + p

                def F(u, _si=si, _p=p):
                    y = np.concatenate([u, sbase[_si]])
                    eta_out, y_out = mp.evaluator(probes[_p], y)
                    target = frozen.eval_vertical(y_out[du:], _p)
                    return y_out[:du] - target, None

                u, _, res = _solve_implicit(F, vals[node], atol, delta,
                                            bisect_1d=(du == 1))
                if u is None:
                    raise NewtonStall((tuple(sbase[si]), p), res)
                nvals[node] = u
        dist = float(np.max(np.linalg.norm(nvals - vals, axis=1)))
        vals = nvals
        if prev_dist is not None and prev_dist > 0:
            r = dist / prev_dist
            ratios.append(r)
            if sweep >= 2 and r >= 1.0 and dist > tol:
                raise NotContracting(
                    f"iterate ratio {r:.4f} at sweep {sweep}")
        prev_dist = dist
        if dist <= tol:
            break
    else:
        raise NotContracting(
            f"no convergence after {max_iters} sweeps (last {dist:.2e})")

    lip = _vertical_lip(mp, axes, shape, probes, vals)
    disk = DiskFunction("vertical", axes, vals, None, lip, float(L),
                        probes=probes)
    disk.validate()
    disk._map = mp
    disk._base_points = sbase
    disk.iterate_ratios = ratios
    disk.sweeps = sweep + 1
    return disk


def _vertical_lip(mp, axes, shape, probes, vals):
    """Slope over stable-axis neighbors and probe pairs at fixed nodes."""
    nP = len(probes)
    lip = 0.0
    for a, ax in enumerate(axes):
        h = ax[1] - ax[0]
        for idx in np.ndindex(*shape):
            if idx[a] + 1 >= shape[a]:
                continue
            jdx = list(idx)
            jdx[a] += 1
            i = int(np.ravel_multi_index(idx, shape))
            j = int(np.ravel_multi_index(tuple(jdx), shape))
            for p in range(nP):
                du_fib = np.linalg.norm(vals[j * nP + p] - vals[i * nP + p])
                lip = max(lip, float(du_fib) / h)
    pd = np.zeros((nP, nP))
    for a in range(nP):
        for b in range(a + 1, nP):
            pd[a, b] = math.sqrt(mp.eta_norm_sq(probes[a] - probes[b]))
    Ns = vals.shape[0] // nP
    for si in range(Ns):
        for a in range(nP):
            for b in range(a + 1, nP):
                if pd[a, b] > 0:
                    du_fib = np.linalg.norm(vals[si * nP + a]
                                            - vals[si * nP + b])
                    lip = max(lip, float(du_fib) / pd[a, b])
    return lip


# -- derivative (slope) fields -------------------------------------------

@dataclass(eq=False)
class SlopeField:
    """Per-node linear maps from the unstable base into the fiber.

    slopes is a pair: the stable-coordinate part (N, ds, du) and the
    history part (N, du, n_eta, d); column c is the fiber derivative along
    the c-th unstable axis.
    """

    domain_grid: Tuple[np.ndarray, ...]
    slopes: Tuple[np.ndarray, np.ndarray]
    lip_M: float

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(ax) for ax in self.domain_grid)


def derivative_field(mp: TimeTMap, disk: DiskFunction, L: float, L_M: float,
                     tol: float = 1e-8,
                     max_iters: int = MAX_SWEEPS) -> SlopeField:
    """Fiber-contraction fixed point: the disk's derivative per node.

    Iterates the derivative transform M_new = B A^{-1} from zero slopes,
    where the columns of A and B are the base and fiber parts of the map
    derivative along (e_c, M(xbar) e_c) at the stored preimages. Base
    trajectories are integrated once per node and reused across sweeps.

    Raises
    ------
    FiberNotContracting
        Slope iterates stopped shrinking before tol.
    BoundsViolated
        A converged slope exceeds L, or the slope field's own Lipschitz
        estimate exceeds L_M.
    """
    if disk.orientation != "horizontal":
        raise ValueError("slope fields are computed for horizontal disks")
    du, ds = mp.dims
    d = du + ds
    n_eta = mp.eta_grid.shape[0]
    axes = disk.domain_grid
    shape = disk.shape
    N = disk.values_y.shape[0]
    if du == 0:
        return SlopeField((), (np.zeros((1, ds, 0)),
                               np.zeros((1, 0, n_eta, d))), 0.0)

    pre = disk._preimages
    node_tr = []
    node_cells = []
    for i in range(N):
        ys, eta = disk.eval_horizontal(pre[i])
        y = np.concatenate([pre[i], ys])
        node_tr.append(mp._base(eta, y))
        node_cells.append(_cell_weights(axes, shape, pre[i]))

    Ms = np.zeros((N, ds, du))
    Me = np.zeros((N, du, n_eta, d))
    ratios: List[float] = []
    prev_dist = None
    for sweep in range(max_iters):
        nMs = np.empty_like(Ms)
        nMe = np.empty_like(Me)
        for i in range(N):
            Msb = np.zeros((ds, du))
            Meb = np.zeros((du, n_eta, d))
            for idx, w in node_cells[i]:
                Msb += w * Ms[idx]
                Meb += w * Me[idx]
            A = np.empty((du, du))
            Bs = np.empty((ds, du))
            Be = np.empty((du, n_eta, d))
            for c in range(du):
                dy = np.concatenate([_unit(du, c), Msb[:, c]])
                th, dy_out = mp.derivative_evaluator(None, None, Meb[c], dy,
                                                     base=node_tr[i])
                A[:, c] = dy_out[:du]
                Bs[:, c] = dy_out[du:]
                Be[c] = th
            Ainv = np.linalg.inv(A)
            nMs[i] = Bs @ Ainv
            nMe[i] = np.einsum("cnd,ck->knd", Be, Ainv)
        dist = 0.0
        for i in range(N):
            for c in range(du):
                dist = max(dist, mp.fiber_norm(nMs[i, :, c] - Ms[i, :, c],
                                               nMe[i, c] - Me[i, c]))
        Ms, Me = nMs, nMe
        if prev_dist is not None and prev_dist > 0:
            r = dist / prev_dist
            ratios.append(r)
            if sweep >= 2 and r >= 1.0 and dist > tol:
                raise FiberNotContracting(
                    f"slope iterate ratio {r:.4f} at sweep {sweep}")
        prev_dist = dist
        if dist <= tol:
            break
    else:
        raise FiberNotContracting(
            f"no convergence after {max_iters} sweeps (last {dist:.2e})")

    worst = max(mp.fiber_norm(Ms[i, :, c], Me[i, c])
                for i in range(N) for c in range(du))
    if worst > L * (1 + 1e-9):
        raise BoundsViolated({"slope_norm": worst})
    lip_M = _slope_lip(mp, axes, shape, Ms, Me)
    if lip_M > L_M * (1 + 1e-9):
        raise BoundsViolated({"lip_M": lip_M})
    sf = SlopeField(axes, (Ms, Me), lip_M)
    sf._map = mp
    sf._disk = disk
    sf.iterate_ratios = ratios
    return sf


def _slope_lip(mp, axes, shape, Ms, Me):
    lip = 0.0
    du = Ms.shape[2]
    for a, ax in enumerate(axes):
        h = ax[1] - ax[0]
        for idx in np.ndindex(*shape):
            if idx[a] + 1 >= shape[a]:
                continue
            jdx = list(idx)
            jdx[a] += 1
            i = int(np.ravel_multi_index(idx, shape))
            j = int(np.ravel_multi_index(tuple(jdx), shape))
            for c in range(du):
                lip = max(lip, mp.fiber_norm(Ms[j, :, c] - Ms[i, :, c],
                                             Me[j, c] - Me[i, c]) / h)
    return lip


# -- diagnostics ---------------------------------------------------------

def invariance_defect(mp: TimeTMap, disk: DiskFunction) -> float:
    """Sup fiber defect of the fixed-point identity at stored preimages.

    For each node, the map applied at (preimage, disk fiber) must land on
    the node's base point with the node's stored fiber; returns the worst
    fiber distance (the base mismatch is bounded by the solver tolerance).
    """
    if disk.orientation != "horizontal":
        raise ValueError("defect is defined for horizontal disks")
    du, _ = mp.dims
    worst = 0.0
    for i in range(disk.values_y.shape[0]):
        ys, eta = disk.eval_horizontal(disk._preimages[i])
        eta_out, y_out = mp.evaluator(eta,
                                      np.concatenate([disk._preimages[i], ys]))
        worst = max(worst, mp.fiber_norm(y_out[du:] - disk.values_y[i],
                                         eta_out - disk.values_eta[i]))
    return worst


def backward_orbit(mp: TimeTMap, disk: DiskFunction, xu,
                   n: int) -> List[np.ndarray]:
    """Base points of the backward orbit of a graph point under the map.

    Each step solves the implicit preimage equation on the converged disk;
    along the unstable manifold the sequence contracts to the equilibrium.
    """
    du, _ = mp.dims
    out = [np.atleast_1d(np.asarray(xu, dtype=float))]
    for _ in range(n):
        target = out[-1]

        def F(cand):
            ys, eta = disk.eval_horizontal(cand)
            _, y_out = mp.evaluator(eta, np.concatenate([cand, ys]))
            return y_out[:du] - target, None

        seed = target * math.exp(-mp.T * _spectral_rate(mp.block,
                                                        unstable=True))
        u, _, res = _solve_implicit(F, seed, 1e-11, mp.block.delta,
                                    bisect_1d=(du == 1))
        if u is None:
            raise NewtonStall(tuple(target), res)
        out.append(u)
    return out


def finite_difference_defect(mp: TimeTMap, disk: DiskFunction,
                             sf: SlopeField) -> float:
    """Worst gap between slopes and centered differences of disk values."""
    axes = disk.domain_grid
    shape = disk.shape
    Ms, Me = sf.slopes
    worst = 0.0
    for a, ax in enumerate(axes):
        h = ax[1] - ax[0]
        for idx in np.ndindex(*shape):
            if idx[a] == 0 or idx[a] + 1 >= shape[a]:
                continue
            lo = list(idx)
            hi = list(idx)
            lo[a] -= 1
            hi[a] += 1
            i = int(np.ravel_multi_index(idx, shape))
            il = int(np.ravel_multi_index(tuple(lo), shape))
            ih = int(np.ravel_multi_index(tuple(hi), shape))
            fd_y = (disk.values_y[ih] - disk.values_y[il]) / (2 * h)
            fd_e = (disk.values_eta[ih] - disk.values_eta[il]) / (2 * h)
            worst = max(worst, mp.fiber_norm(fd_y - Ms[i, :, a],
                                             fd_e - Me[i, a]))
    return worst


def disk_distance(mp: TimeTMap, d1: DiskFunction, d2: DiskFunction) -> float:
    """Sup-node fiber distance between two disks on the same grid."""
    if d1.orientation != d2.orientation:
        raise ValueError("orientation mismatch")
    if len(d1.domain_grid) != len(d2.domain_grid) or any(
            not np.array_equal(a, b)
            for a, b in zip(d1.domain_grid, d2.domain_grid)):
        raise GridMismatch("disks live on different base grids")
    if d1.orientation == "vertical":
        return float(np.max(np.linalg.norm(d1.values_y - d2.values_y,
                                           axis=1))) if d1.values_y.size \
            else 0.0
    if d1.values_eta.shape != d2.values_eta.shape:
        raise GridMismatch("disks carry different history windows")
    return max(mp.fiber_norm(d1.values_y[i] - d2.values_y[i],
                             d1.values_eta[i] - d2.values_eta[i])
               for i in range(d1.values_y.shape[0]))


def slope_distance(mp: TimeTMap, s1: SlopeField, s2: SlopeField) -> float:
    """Sup-node, sup-column fiber distance between two slope fields."""
    Ms1, Me1 = s1.slopes
    Ms2, Me2 = s2.slopes
    if Ms1.shape != Ms2.shape or Me1.shape != Me2.shape:
        raise GridMismatch("slope fields have different shapes")
    out = 0.0
    for i in range(Ms1.shape[0]):
        for c in range(Ms1.shape[2]):
            out = max(out, mp.fiber_norm(Ms1[i, :, c] - Ms2[i, :, c],
                                         Me1[i, c] - Me2[i, c]))
    return out


# -- eps continuity ------------------------------------------------------

@dataclass
class EpsContinuityReport:
    """Distances of eps-disks and their slope fields to the eps=0 pair."""

    rows: List[Tuple[float, float, float]]
    value_slope: float
    slope_slope: float

    @property
    def passes(self) -> bool:
        """First-order continuity: both fitted log-log slopes >= 0.9."""
        return (not math.isnan(self.value_slope)
                and not math.isnan(self.slope_slope)
                and self.value_slope >= 0.9 and self.slope_slope >= 0.9)

    def as_dict(self) -> dict:
        return {"rows": [{"eps": e, "value_dist": v, "slope_dist": s}
                         for e, v, s in self.rows],
                "value_slope": self.value_slope,
                "slope_slope": self.slope_slope,
                "passes": self.passes}


def _fit_loglog(pairs):
    pts = [(e, v) for e, v in pairs if e > 0 and v > 0]
    if len(pts) < 2:
        return math.nan
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def eps_continuity_report(block: IsolatingBlock, eps_list: Sequence[float],
                          L: float, T: float, dt: float = 0.01,
                          L_M: Optional[float] = None,
                          tol: float = TOL_FIXED_POINT,
                          n_nodes: int = GRID_NODES) -> EpsContinuityReport:
    """Unstable-disk and slope-field distances to the eps=0 reference.

    All maps are built on the given block so every disk shares one frame
    and one history window; the kernels must therefore have matching
    horizons across the eps values. Fitted log-log slopes near 1 witness
    first-order continuity in eps.
    """
    if L_M is None:
        L_M = 16.0 * L
    mp0 = make_time_T_map(block, 0.0, T, dt)
    disk0 = unstable_manifold(mp0, L, tol_fixed_point=tol, n_nodes=n_nodes)
    sf0 = derivative_field(mp0, disk0, L, L_M)
    rows: List[Tuple[float, float, float]] = []
    for eps in eps_list:
        if eps == 0:
            rows.append((0.0, 0.0, 0.0))
            continue
        mpe = make_time_T_map(block, eps, T, dt)
        if mpe.eta_grid.shape[0] != mp0.eta_grid.shape[0]:
            raise GridMismatch(
                "kernel horizons disagree across eps; windows do not match")
        diske = unstable_manifold(mpe, L, tol_fixed_point=tol,
                                  n_nodes=n_nodes)
        sfe = derivative_field(mpe, diske, L, L_M)
        rows.append((float(eps), disk_distance(mp0, diske, disk0),
                     slope_distance(mp0, sfe, sf0)))
    return EpsContinuityReport(
        rows=rows,
        value_slope=_fit_loglog([(e, v) for e, v, _ in rows]),
        slope_slope=_fit_loglog([(e, s) for e, _, s in rows]))

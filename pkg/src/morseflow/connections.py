"""Heteroclinic connections between certified equilibria.

The pipeline: sample a local unstable manifold as an embedded disk, push it
along the flow with its tangent frames, rewrite it as a graph over a frame
adapted to an intersection point, and intersect it with the target's stable
manifold by a composed fixed-point iteration whose contraction factor is
measured, not assumed. At eps = 0 connections are first found by shooting a
fan of trajectories and bisecting on the fan parameter. Edge evidence is
assembled into a directed graph that can be compared across eps.
"""

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import dynamics
from .blocks import IsolatingBlock, build_block
from .dynamics import (HistoryState, Potential, VariationalState, integrate,
                       integrate_variational, lyapunov_budget, lyapunov_value)
from .equilibria import Equilibrium, find_equilibria
from .errors import (AmbiguousMatching, Blowup, ContractionFailed,
                     EtaBallViolated, GridMismatch, InsufficientSamples,
                     LipschitzUnreachable, NoEntry, NotTransversal)
from .kernels import HistoryFunction, KernelPair, weighted_norm_sq
from .manifolds import (DiskFunction, _cell_weights, _solve_implicit,
                        _spectral_rate, make_time_T_map, select_aperture,
                        stable_manifold, unstable_manifold)

DEFAULT_CONFIG = {
    "T": 1.0,
    "dt": 0.01,
    "t_max": 12.0,
    "fan": 64,
    "refine": 4,
    "land_tol": 1e-5,
    "depth_frac": 0.6,
    "L_target": 0.25,
    "n_reparam_nodes": 7,
    "wu_nodes": 9,
    "ws_nodes": 9,
    "pull_time": 1.0,
    "patch_nodes": 9,
    "contract_tol": 1e-10,
    "max_contract_iters": 60,
    "box_radius": 1.6,
    "ordering_margin": 1e-9,
}

ANGLE_TOL = 1e-6  # principal angle below which two directions count as one
FRAME_RANK_TOL = 1e-8


def _merge_config(config):
    cfg = dict(DEFAULT_CONFIG)
    if config:
        cfg.update(config)
    return cfg


# -- embedded disks ------------------------------------------------------

@dataclasses.dataclass(eq=False)
class EmbeddedDisk:
    """Sampled k-disk in state space with tangent frames per sample.

    points[i] is the ambient image of params[i]; frames[i] has k columns
    spanning the tangent there. etas and theta_frames, when present, carry
    the memory component of each sample and of each tangent column on the
    grid eta_grid (spacing must match the integrator step on transport).
    """

    params: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    lip_estimate: float
    etas: Optional[np.ndarray] = None
    theta_frames: Optional[np.ndarray] = None
    eta_grid: Optional[np.ndarray] = None
    eta_norms: Optional[np.ndarray] = None
    potential: Optional[Potential] = None
    kernels: Optional[KernelPair] = None

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]

    @property
    def base_dim(self) -> int:
        return self.frames.shape[2]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]

    def tangent_frame_at(self, i: int) -> np.ndarray:
        return self.frames[i]

    def nearest_sample(self, x: np.ndarray) -> int:
        return int(np.argmin(np.linalg.norm(self.points - x, axis=1)))

    def validate(self):
        if self.base_dim > 0:
            for i in range(self.n_samples):
                s = np.linalg.svd(self.frames[i], compute_uv=False)
                if s[-1] <= FRAME_RANK_TOL:
                    raise ValueError(
                        f"tangent frame at sample {i} is rank deficient "
                        f"(smallest singular value {s[-1]:.3e})")
        return self


def _interp_disk_fiber(disk: DiskFunction, p: np.ndarray, h: float = 1e-5):
    """Graph value and centered-difference tangent data at base point p."""
    ys, eta = disk.eval_horizontal(p)
    k = len(disk.domain_grid)
    dys = np.zeros((len(ys), k))
    deta = np.zeros((k,) + eta.shape)
    for c in range(k):
        e = np.zeros(k)
        e[c] = h
        yp, ep = disk.eval_horizontal(p + e)
        ym, em = disk.eval_horizontal(p - e)
        dys[:, c] = (yp - ym) / (2 * h)
        deta[c] = (ep - em) / (2 * h)
    return ys, eta, dys, deta


def unstable_to_embedded(mp, disk: DiskFunction, params: np.ndarray) -> EmbeddedDisk:
    """Sample a local unstable graph at the given base points.

    Tangent frames come from centered differences of the graph, so no
    slope field is required; the memory fiber and its tangent come along.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    blk = mp.block
    du = params.shape[1]
    n = params.shape[0]
    d = blk.center.point.shape[0]
    pts = np.zeros((n, d))
    frames = np.zeros((n, d, du))
    etas = np.zeros((n,) + disk.values_eta.shape[1:])
    thetas = np.zeros((n, du) + disk.values_eta.shape[1:])
    for i in range(n):
        ys, eta, dys, deta = _interp_disk_fiber(disk, params[i])
        pts[i] = blk.from_frame(np.concatenate([params[i], ys]))
        etas[i] = eta
        for c in range(du):
            e = np.zeros(du)
            e[c] = 1.0
            frames[i][:, c] = blk.frame.T @ np.concatenate([e, dys[:, c]])
            thetas[i, c] = deta[c]
    return EmbeddedDisk(params=params, points=pts, frames=frames,
                        lip_estimate=disk.lip_estimate, etas=etas,
                        theta_frames=thetas, eta_grid=mp.eta_grid,
                        potential=mp.potential, kernels=mp.kernels).validate()


def stable_to_embedded(mp, disk: DiskFunction) -> EmbeddedDisk:
    """Sample a local stable graph (zero-history probe section)."""
    blk = mp.block
    du, ds = mp.dims
    d = du + ds
    if ds == 0:
        raise ValueError("stable side is trivial; nothing to embed")
    axes = disk.domain_grid
    nP = max(1, len(disk.probes or [None]))
    grids = np.meshgrid(*axes, indexing="ij") if axes else []
    base = (np.stack([g.ravel() for g in grids], axis=-1)
            if axes else np.zeros((1, 0)))
    n = base.shape[0]
    pts = np.zeros((n, d))
    frames = np.zeros((n, d, ds))
    h = 1e-5
    for i in range(n):
        ys = base[i]
        u = disk.eval_vertical(ys, 0) if du else np.zeros(0)
        pts[i] = blk.from_frame(np.concatenate([u, ys]))
        for c in range(ds):
            e = np.zeros(ds)
            e[c] = h
            if du:
                dv = (disk.eval_vertical(ys + e, 0)
                      - disk.eval_vertical(ys - e, 0)) / (2 * h)
            else:
                dv = np.zeros(0)
            ec = np.zeros(ds)
            ec[c] = 1.0
            frames[i][:, c] = blk.frame.T @ np.concatenate([dv, ec])
    del nP
    return EmbeddedDisk(params=base, points=pts, frames=frames,
                        lip_estimate=disk.lip_estimate, eta_grid=mp.eta_grid,
                        potential=mp.potential,
                        kernels=mp.kernels).validate()


def transport_disk(disk: EmbeddedDisk, eps: float, t: float, dt: float) -> EmbeddedDisk:
    """Push every sample and its tangent frame along the flow for time t.

    Frames ride the variational equation and are re-orthonormalized by QR
    afterwards; tangent memory columns are mixed by the same change of
    basis. Transported memory norms are recorded for the target-ball check.
    A blowup in any sample propagates.
    """
    if disk.potential is None or disk.kernels is None:
        raise ValueError("disk carries no potential/kernel context")
    if t == 0.0:
        return disk
    n_steps = int(round(t / dt))
    if n_steps < 1 or abs(n_steps * dt - t) > 1e-9 * max(t, 1.0):
        raise ValueError("transport time must be a positive multiple of dt")
    if disk.etas is not None:
        if disk.eta_grid is None or len(disk.eta_grid) < 2:
            raise GridMismatch("eta samples need their grid")
        if abs((disk.eta_grid[1] - disk.eta_grid[0]) - dt) > 1e-12:
            raise GridMismatch("eta grid spacing must equal the step size")
    P, kern = disk.potential, disk.kernels
    n, d, k = disk.n_samples, disk.ambient_dim, disk.base_dim
    pts = np.zeros((n, d))
    frames = np.zeros((n, d, k))
    has_eta = disk.etas is not None
    etas = np.zeros_like(disk.etas) if has_eta else None
    thetas = (np.zeros_like(disk.theta_frames)
              if disk.theta_frames is not None else None)
    norms = np.zeros(n)
    for i in range(n):
        eta0 = (HistoryFunction(disk.eta_grid, disk.etas[i])
                if has_eta else None)
        tr = integrate(HistoryState(x=disk.points[i], eta=eta0), P, kern,
                       eps, t, dt)
        pts[i] = tr.timeline[-1]
        if has_eta:
            fin = tr.eta_at(tr.n_steps)
            etas[i] = fin.values
            norms[i] = math.sqrt(weighted_norm_sq(fin, kern.A))
        W = np.zeros((d, k))
        th_out = []
        for c in range(k):
            th0 = None
            if disk.theta_frames is not None:
                th0 = HistoryFunction(disk.eta_grid, disk.theta_frames[i, c])
            var = integrate_variational(
                tr, VariationalState(w=disk.frames[i][:, c], theta=th0), eps)
            W[:, c] = var.w[-1]
            if thetas is not None:
                th_out.append(var.theta_at(tr.n_steps).values)
        if k:
            Q, Rm = np.linalg.qr(W)
            sgn = np.sign(np.diag(Rm))
            sgn[sgn == 0] = 1.0
            Q = Q * sgn
            Rm = sgn[:, None] * Rm
            frames[i] = Q
            if thetas is not None:
                Rinv = np.linalg.inv(Rm)
                stack = np.stack(th_out)
                thetas[i] = np.einsum("cnd,cj->jnd", stack, Rinv)
    return EmbeddedDisk(params=disk.params.copy(), points=pts, frames=frames,
                        lip_estimate=math.nan, etas=etas,
                        theta_frames=thetas, eta_grid=disk.eta_grid,
                        eta_norms=norms if has_eta else None,
                        potential=P, kernels=kern).validate()


# -- reparameterization --------------------------------------------------

def _mls_fit(base, rhs, node, bandwidth):
    """Weighted linear fit of rhs(base) around one node.

    Returns (value_row, slope_rows) of the local model or None when the
    neighborhood underdetermines the fit.
    """
    diffs = base - node
    dist = np.linalg.norm(diffs, axis=1)
    w = np.zeros_like(dist)
    near = dist < bandwidth
    w[near] = (1.0 - (dist[near] / bandwidth) ** 2) ** 2
    k = base.shape[1]
    if np.count_nonzero(w > 1e-12) < k + 2:
        return None
    A = np.hstack([np.ones((base.shape[0], 1)), diffs])
    Aw = A * w[:, None]
    G = A.T @ Aw
    try:
        beta = np.linalg.solve(G, Aw.T @ rhs)
    except np.linalg.LinAlgError:
        return None
    return beta[0], beta[1:]


def reparametrize_over_tangent(disk: EmbeddedDisk, frame: np.ndarray,
                               z0: np.ndarray, L_target: float,
                               normal_frame: Optional[np.ndarray] = None,
                               n_nodes: Optional[int] = None,
                               min_radius_factor: float = 2.0 ** -6) -> DiskFunction:
    """Rewrite a sampled disk as a graph over the span of frame at z0.

    Moving least squares fits the normal coordinates (and the memory
    fiber) over a regular grid in the base box; the box is halved until
    the measured finite-coordinate Lipschitz constant meets L_target.
    The achieved radii are attached as _delta1 (base) and _delta2 (sup of
    the graph values); the memory fiber's own slope is reported separately
    as _eta_lip since it is budgeted by a different constant.
    """
    frame = np.atleast_2d(np.asarray(frame, dtype=float))
    z0 = np.asarray(z0, dtype=float)
    d, k = frame.shape
    if n_nodes is None:
        n_nodes = 7
    if normal_frame is None:
        q, _ = np.linalg.qr(np.hstack([frame, np.eye(d)]))
        normal_frame = q[:, k:d]
    B = np.hstack([frame, normal_frame])
    if np.linalg.cond(B) > 1e10:
        raise ValueError("frame plus completion is ill conditioned")
    coords = np.linalg.solve(B, (disk.points - z0).T).T
    base, vals = coords[:, :k], coords[:, k:]

    nn = np.sort(np.linalg.norm(base[:, None, :] - base[None, :, :], axis=2),
                 axis=1)
    med_nn = float(np.median(nn[:, 1])) if base.shape[0] > 1 else 0.0
    if float(np.min(np.linalg.norm(base, axis=1))) > max(1e-6, 3.0 * med_nn):
        raise ValueError("z0 is not within sample tolerance of the disk")

    has_eta = disk.etas is not None
    if has_eta:
        eta_shape = disk.etas.shape[1:]
        eta_flat = disk.etas.reshape(disk.n_samples, -1)
        rhs = np.hstack([vals, eta_flat])
    else:
        eta_shape = (1, d)
        rhs = vals

    # per-axis radii: transported clouds stretch very differently along
    # the flow direction and transverse to it
    radii0 = 0.6 * np.max(np.abs(base), axis=0) if base.size else np.zeros(k)
    if np.any(radii0 <= 0):
        raise InsufficientSamples("samples do not spread around z0")
    shrink = 1.0
    while True:
        radii = shrink * radii0
        axes = tuple(np.linspace(-r, r, n_nodes) for r in radii)
        mesh = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([g.ravel() for g in mesh], axis=-1)
        spacing = 2.0 * float(np.max(radii)) / (n_nodes - 1)
        bw = max(2.6 * spacing, 2.6 * med_nn)
        values = np.zeros((nodes.shape[0], d - k))
        etas = np.zeros((nodes.shape[0],) + eta_shape)
        lip = 0.0
        ok = True
        for j, node in enumerate(nodes):
            fit = _mls_fit(base, rhs, node, bw)
            if fit is None:
                raise InsufficientSamples(
                    f"node {tuple(np.round(node, 4))} has too few samples "
                    f"within bandwidth {bw:.3g}")
            val_row, slope = fit
            values[j] = val_row[:d - k]
            if has_eta:
                etas[j] = val_row[d - k:].reshape(eta_shape)
            sl = slope[:, :d - k]
            lip = max(lip, float(np.linalg.norm(sl.T, 2)) if sl.size else 0.0)
        if lip <= L_target or not ok:
            break
        shrink *= 0.5
        if shrink < min_radius_factor:
            raise LipschitzUnreachable(
                f"lip {lip:.3g} > target {L_target:.3g} at minimum radius")

    eta_lip = 0.0
    if has_eta and disk.kernels is not None and nodes.shape[0] > 1:
        grid = disk.eta_grid
        for j in range(nodes.shape[0] - 1):
            db = float(np.linalg.norm(nodes[j + 1] - nodes[j]))
            if db == 0.0:
                continue
            dn = math.sqrt(weighted_norm_sq(
                HistoryFunction(grid, etas[j + 1] - etas[j]),
                disk.kernels.A))
            eta_lip = max(eta_lip, dn / db)

    out = DiskFunction(orientation="horizontal", domain_grid=axes,
                       values_y=values, values_eta=etas,
                       lip_estimate=lip, L_bound=L_target)
    out._delta1 = float(np.max(radii))
    out._delta2 = float(np.max(np.linalg.norm(values, axis=1))) if values.size else 0.0
    out._eta_lip = eta_lip
    out._frame = B
    out._z0 = z0
    return out


# -- intersection frames -------------------------------------------------

@dataclasses.dataclass
class IntersectionFrame:
    """Frame splitting the ambient space at a connection point.

    Columns of M_frame span, in order: directions only the unstable
    manifold adds (k1), the common tangent directions (c), and directions
    only the stable manifold adds (k2).
    """

    M_frame: np.ndarray
    z: np.ndarray
    dims: Tuple[int, int, int]
    margin: float = math.pi / 2

    def __post_init__(self):
        k1, c, k2 = self.dims
        if c < 1:
            raise NotTransversal("common tangent dimension below 1")
        if self.M_frame.shape != (k1 + c + k2, k1 + c + k2):
            raise ValueError("frame shape does not match dims")
        if np.linalg.cond(self.M_frame) >= 1e10:
            raise NotTransversal("intersection frame is ill conditioned")


def _orthonormal(cols: np.ndarray) -> np.ndarray:
    if cols.shape[1] == 0:
        return cols
    q, _ = np.linalg.qr(cols)
    return q


def build_intersection_frame(Wu_disk: EmbeddedDisk, Ws_disk: EmbeddedDisk,
                             z: np.ndarray) -> IntersectionFrame:
    """Split the ambient space by the two tangent spaces at z.

    Tangents are read off the disks' frames at their nearest samples;
    principal angles below 1e-6 rad identify the common directions, whose
    count must equal u + s - d exactly, else the standing transversality
    assumption fails numerically.
    """
    z = np.asarray(z, dtype=float)
    d = Wu_disk.ambient_dim
    Uu = _orthonormal(Wu_disk.tangent_frame_at(Wu_disk.nearest_sample(z)))
    Us = _orthonormal(Ws_disk.tangent_frame_at(Ws_disk.nearest_sample(z)))
    u, s = Uu.shape[1], Us.shape[1]
    c_exp = u + s - d
    if c_exp < 1:
        raise NotTransversal(
            f"u + s = {u + s} <= d = {d}: no transversal intersection")
    P, sig, Qt = np.linalg.svd(Uu.T @ Us)
    angles = np.arccos(np.clip(sig, -1.0, 1.0))
    n_common = int(np.count_nonzero(angles < ANGLE_TOL))
    if n_common != c_exp:
        raise NotTransversal(
            f"common tangent count {n_common} != expected {c_exp} "
            f"(principal angles {np.round(angles, 8)})")
    pu = Uu @ P
    ps = Us @ Qt.T
    common = pu[:, :c_exp] + ps[:, :c_exp]
    common /= np.linalg.norm(common, axis=0, keepdims=True)
    k1_block = pu[:, c_exp:]
    k2_block = ps[:, c_exp:]
    M = np.hstack([k1_block, common, k2_block])
    k1, k2 = k1_block.shape[1], k2_block.shape[1]
    if k1 and k2:
        _, sig12, _ = np.linalg.svd(k1_block.T @ k2_block)
        margin = float(np.arccos(np.clip(np.max(sig12), -1.0, 1.0)))
    else:
        margin = math.pi / 2
    return IntersectionFrame(M_frame=M, z=z, dims=(k1, c_exp, k2),
                             margin=margin)


# -- evidence types ------------------------------------------------------

@dataclasses.dataclass
class ShootingEvidence:
    """A connection witnessed by a shot trajectory entering the target."""

    point: np.ndarray
    eps: float
    parameter: np.ndarray
    t_flight: float
    landing_gap: float
    lyapunov_gap: float
    frame: Optional[IntersectionFrame] = None


@dataclasses.dataclass
class IntersectionResult:
    """Converged composed-map intersection at eps > 0.

    contraction_factor is the measured sup ratio of the fixed-point
    iteration; the proof-level factorization D1 D3 + D2 E D4 is not
    numerically recoverable, so the single composed factor stands for it.
    """

    point: np.ndarray
    eps: float
    contraction_factor: float
    transversality_margin: float
    iterations: int
    eta_norm: float = 0.0

    def __post_init__(self):
        if self.contraction_factor >= 1.0:
            raise ContractionFailed(
                f"measured contraction {self.contraction_factor:.4g} >= 1")


# -- shooting ------------------------------------------------------------

def _fan_directions(u: int, per_dim: int) -> np.ndarray:
    if u == 0:
        return np.zeros((0, 0))
    if u == 1:
        return np.array([[-1.0], [1.0]])
    if u == 2:
        n = per_dim * u
        th = 2.0 * math.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    rng = np.random.default_rng(0)
    v = rng.normal(size=(per_dim * u, u))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _seed_state(mp, disk: DiskFunction, param: np.ndarray) -> HistoryState:
    ys, eta = disk.eval_horizontal(param)
    x = mp.block.from_frame(np.concatenate([param, ys]))
    hist = HistoryFunction(mp.eta_grid, eta)
    return HistoryState(x=x, eta=hist)


def _entry_threshold(block: IsolatingBlock, eps: float, E: float,
                     P: Potential, kern: KernelPair) -> float:
    """Minimum Lyapunov value over the entry (stable-coordinate) faces."""
    du = block.dims[0]
    d = block.center.point.shape[0]
    lo = math.inf
    free = [np.linspace(-block.delta, block.delta, 7) for _ in range(d - 1)]
    mesh = (np.stack([g.ravel() for g in np.meshgrid(*free, indexing="ij")],
                     axis=-1) if free else np.zeros((1, 0)))
    for j in range(du, d):
        for sgn in (-1.0, 1.0):
            for row in mesh:
                y = np.insert(row, j, sgn * block.delta)
                x = block.from_frame(y)
                val = lyapunov_value(HistoryState(x=x, eta=None), eps, E,
                                     P, kern)
                lo = min(lo, val)
    return lo


def _orbit_record(tr, block: IsolatingBlock, thresh: float, eps: float,
                  E: float, P: Potential, kern: KernelPair,
                  depth_frac: float):
    """Entry diagnostics of one trajectory against one target block."""
    du = block.dims[0]
    rows = tr.timeline[tr.n_pre:]
    entered = False
    side = 0.0
    deep_idx = None
    min_gap = math.inf
    closest = math.inf
    closest_side = 0.0
    was_inside = False
    for k in range(rows.shape[0]):
        y = block.to_frame(rows[k])
        dist = float(np.max(np.abs(y)))
        if dist < closest:
            closest = dist
            closest_side = float(np.sign(y[0])) if du else 0.0
        inside = block.contains(y)
        if inside:
            entered = True
            was_inside = True
            gap = float(np.linalg.norm(y[:du]))
            deep_enough = float(np.max(np.abs(y[du:]), initial=0.0)) \
                <= depth_frac * block.delta
            if deep_enough:
                min_gap = min(min_gap, gap)
                if deep_idx is None:
                    st = tr.states[k]
                    val = lyapunov_value(st, eps, E, P, kern)
                    if val < thresh:
                        deep_idx = k
            if du:
                side = float(np.sign(y[0])) if abs(y[0]) > 0 else side
        elif was_inside:
            break
    return {
        "entered": entered,
        "side": side if entered else closest_side,
        "deep_idx": deep_idx,
        "min_gap": min_gap if du else 0.0,
        "closest": closest,
    }


def _shoot_one(mp, disk, param, eps, t_max, dt):
    state = _seed_state(mp, disk, param)
    return integrate(state, mp.potential, mp.kernels, eps, t_max, dt)


def _evidence_from_record(tr, rec, block, thresh, eps, E, P, kern, param,
                          dt) -> ShootingEvidence:
    k = rec["deep_idx"]
    st = tr.states[k]
    gap = rec["min_gap"] if block.dims[0] else 0.0
    lyap = lyapunov_value(st, eps, E, P, kern)
    return ShootingEvidence(point=st.x.copy(), eps=eps,
                            parameter=np.asarray(param, dtype=float),
                            t_flight=float(k * dt),
                            landing_gap=float(gap),
                            lyapunov_gap=float(thresh - lyap))


def _find_by_shooting(ei, ej, eps, *, block_i, block_j, cfg, wu, E, P, kern):
    """Fan-and-bisect connection search (the eps = 0 detector)."""
    if ei.unstable_dim == 0:
        raise NoEntry("source equilibrium has no unstable directions")
    mp, L, disk = wu
    dt, t_max = cfg["dt"], cfg["t_max"]
    thresh = _entry_threshold(block_j, eps, E, P, kern)
    dirs = _fan_directions(ei.unstable_dim, cfg["fan"])
    delta = mp.block.delta
    u_t = block_j.dims[0]

    def run(param):
        try:
            tr = _shoot_one(mp, disk, param, eps, t_max, dt)
        except Blowup:
            return None, None
        rec = _orbit_record(tr, block_j, thresh, eps, E, P, kern,
                            cfg["depth_frac"])
        return tr, rec

    shots = [run(delta * v) for v in dirs]

    if u_t == 0:
        best = None
        for (tr, rec), v in zip(shots, dirs):
            if rec is None or rec["deep_idx"] is None:
                continue
            if best is None or rec["closest"] < best[1]["closest"]:
                best = (tr, rec, v)
        if best is None:
            raise NoEntry("no fan trajectory settled into the target block")
        tr, rec, v = best
        return _evidence_from_record(tr, rec, block_j, thresh, eps, E, P,
                                     kern, delta * v, dt)

    # landing on a proper stable manifold: find a sign change of the exit
    # side among entering members, refine the bracket, then bisect
    entering = [m for m, (tr, rec) in enumerate(shots)
                if rec is not None and rec["entered"]]
    if not entering:
        raise NoEntry("no fan trajectory entered the target block")

    for m in entering:
        tr, rec = shots[m]
        if rec["deep_idx"] is not None and rec["min_gap"] <= cfg["land_tol"]:
            return _evidence_from_record(tr, rec, block_j, thresh, eps, E,
                                         P, kern, delta * dirs[m], dt)

    if ei.unstable_dim != 2:
        raise NoEntry("landing requires a continuous fan parameter here")

    angles = np.arctan2(dirs[:, 1], dirs[:, 0])
    bracket = None
    for a, b in zip(entering, entering[1:] + entering[:1]):
        sa, sb = shots[a][1]["side"], shots[b][1]["side"]
        if sa != 0 and sb != 0 and sa != sb:
            bracket = (angles[a], angles[b], sa)
            break
    if bracket is None:
        raise NoEntry("no exit-side sign change along the fan")

    def at(theta):
        return run(delta * np.array([math.cos(theta), math.sin(theta)]))

    ta, tb, sa = bracket
    if tb < ta:
        tb += 2.0 * math.pi
    for _ in range(int(math.log2(cfg["refine"]))):  # refine x4 per decision
        probes = np.linspace(ta, tb, 5)
        sides = []
        for th in probes:
            _, rec = at(th)
            sides.append(rec["side"] if rec is not None else 0.0)
        for a, b in zip(range(4), range(1, 5)):
            if sides[a] == sa and sides[b] not in (0.0, sa):
                ta, tb = probes[a], probes[b]
                break
    for _ in range(60):
        tm = 0.5 * (ta + tb)
        _, rec = at(tm)
        sm = rec["side"] if rec is not None else 0.0
        if sm == sa:
            ta = tm
        else:
            tb = tm
        if tb - ta < 1e-14:
            break
    tm = 0.5 * (ta + tb)
    tr, rec = at(tm)
    if rec is None or rec["deep_idx"] is None or \
            rec["min_gap"] > cfg["land_tol"]:
        raise NoEntry("bisection did not land on the stable manifold "
                      "at this resolution")
    param = delta * np.array([math.cos(tm), math.sin(tm)])
    return _evidence_from_record(tr, rec, block_j, thresh, eps, E, P, kern,
                                 param, dt)


# -- seeded intersection at eps > 0 --------------------------------------

def _disk_patch(mp, disk: DiskFunction, direction: np.ndarray, cfg,
                single: bool = False) -> EmbeddedDisk:
    """Embedded patch of the unstable graph around one boundary direction.

    Radial nodes pull the boundary point inward along exp(-lambda tau) so
    that transporting for t_flight + pull_time straddles the old landing
    point; the angular aperture is calibrated by a measured stretch probe.
    The single-sample variant anchors at the boundary itself: pulling back
    would add a parametrization offset independent of eps, drowning the
    O(eps) drift of the transported point.
    """
    delta = mp.block.delta
    lam = _spectral_rate(mp.block, unstable=True)
    pull = cfg["pull_time"]
    n = cfg["patch_nodes"]
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    taus = np.linspace(0.0, 2.0 * pull, n)
    radii = delta * np.exp(-lam * taus)
    if single:
        params = (delta * direction)[None, :]
    elif len(direction) == 1:
        params = radii[:, None] * direction[None, :]
    else:
        th0 = math.atan2(direction[1], direction[0])
        base_pt = _seed_state(mp, disk, delta * direction).x
        h = 1e-4
        dir_h = np.array([math.cos(th0 + h), math.sin(th0 + h)])
        probe = _seed_state(mp, disk, delta * dir_h).x
        t_probe = cfg["_t_transport"]
        dtt = cfg["dt"]
        a = integrate(HistoryState(x=base_pt, eta=None), mp.potential,
                      mp.kernels, 0.0, t_probe, dtt).timeline[-1]
        b = integrate(HistoryState(x=probe, eta=None), mp.potential,
                      mp.kernels, 0.0, t_probe, dtt).timeline[-1]
        stretch = max(float(np.linalg.norm(b - a)) / h, 1e-9)
        half = min(0.2, cfg["_span_target"] / stretch)
        ths = th0 + np.linspace(-half, half, n)
        dirs = np.stack([np.cos(ths), np.sin(ths)], axis=-1)
        params = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
    return unstable_to_embedded(mp, disk, params)


def _eta_at_base(hu: DiskFunction, base: np.ndarray, grid, kern):
    _, eta = hu.eval_horizontal(base)
    return eta, math.sqrt(weighted_norm_sq(HistoryFunction(grid, eta),
                                           kern.A))


def _find_seeded(ei, ej, eps, seed: ShootingEvidence, *, block_i, block_j,
                 cfg, wu, ws, E, P, kern):
    """Composed-graph fixed point at eps > 0 from an eps = 0 seed."""
    frame = seed.frame
    if frame is None:
        return _find_by_shooting(ei, ej, eps, block_i=block_i,
                                 block_j=block_j, cfg=cfg, wu=wu, E=E, P=P,
                                 kern=kern)
    mp, L, disk = wu
    dt = cfg["dt"]
    k1, c, k2 = frame.dims
    z0 = frame.z
    M = frame.M_frame
    trivial = (k1 == 0 and k2 == 0)
    t_tr = seed.t_flight + (0.0 if trivial else cfg["pull_time"])
    t_tr = round(t_tr / dt) * dt
    run_cfg = dict(cfg)
    run_cfg["_t_transport"] = t_tr
    run_cfg["_span_target"] = 0.9 * block_j.delta

    patch = _disk_patch(mp, disk, seed.parameter, run_cfg, single=trivial)
    moved = transport_disk(patch, eps, t_tr, dt)

    if trivial:
        i0 = 0
        point = moved.points[i0]
        nrm = float(moved.eta_norms[i0]) if moved.eta_norms is not None else 0.0
        if nrm >= block_j.R:
            raise EtaBallViolated(
                f"transported memory norm {nrm:.4g} >= R {block_j.R:.4g}")
        return IntersectionResult(point=point, eps=eps,
                                  contraction_factor=0.0,
                                  transversality_margin=frame.margin,
                                  iterations=0, eta_norm=nrm)

    hu = reparametrize_over_tangent(moved, M[:, :k1 + c], z0,
                                    cfg["L_target"],
                                    normal_frame=M[:, k1 + c:],
                                    n_nodes=cfg["n_reparam_nodes"])
    Minv = np.linalg.inv(M)

    def hu_at(a):
        base = np.concatenate([a, np.zeros(c)])
        ys, _ = hu.eval_horizontal(base)
        return ys

    eta0, nrm0 = _eta_at_base(hu, np.zeros(k1 + c), mp.eta_grid, kern)

    if k1 == 0:
        b = hu_at(np.zeros(0))
        point = z0 + hu._frame @ np.concatenate([np.zeros(c), b])
        if nrm0 >= block_j.R:
            raise EtaBallViolated(
                f"transported memory norm {nrm0:.4g} >= R {block_j.R:.4g}")
        return IntersectionResult(point=point, eps=eps,
                                  contraction_factor=0.0,
                                  transversality_margin=frame.margin,
                                  iterations=0, eta_norm=nrm0)

    # proper composed iteration: a -> stable-graph k1-coordinates at the
    # section point (0, h^u(a, 0))
    mp_s, L_s, disk_s = ws
    du_t = block_j.dims[0]
    probes = disk_s.probes
    dists = [math.sqrt(weighted_norm_sq(
        HistoryFunction(mp_s.eta_grid, eta0 - p), kern.A)) for p in probes]
    p_idx = int(np.argmin(dists))

    ys_seed = block_j.to_frame(z0)[du_t:].copy()

    def stable_point(ys):
        u = disk_s.eval_vertical(ys, p_idx)
        return block_j.from_frame(np.concatenate([u, ys]))

    def compose(a, ys_guess):
        b = hu_at(a)
        target = np.concatenate([np.zeros(c), b])

        def F(ys):
            w = Minv @ (stable_point(ys) - z0)
            return w[k1:] - target, None

        ys, _, res = _solve_implicit(F, ys_guess, atol=1e-11,
                                     radius=1.2 * block_j.delta)
        if ys is None:
            raise ContractionFailed(
                f"stable-graph solve stalled (residual {res:.3e})")
        w = Minv @ (stable_point(ys) - z0)
        return w[:k1], ys

    # start off the section center so the contraction is actually
    # exercised; symmetric problems would otherwise converge in one step
    radii_a = np.array([ax[-1] for ax in hu.domain_grid[:k1]])
    a = cfg.get("contract_probe", 0.3) * radii_a
    ys_guess = ys_seed
    steps = []
    factor = 0.0
    iters = 0
    for it in range(cfg["max_contract_iters"]):
        a_new, ys_guess = compose(a, ys_guess)
        step = float(np.linalg.norm(a_new - a))
        if steps and steps[-1] > 0:
            factor = max(factor, step / steps[-1])
        steps.append(step)
        a = a_new
        iters = it + 1
        if step < cfg["contract_tol"]:
            break
    else:
        raise ContractionFailed(
            f"composed iteration did not converge (last step {steps[-1]:.3e})")
    if factor >= 1.0:
        raise ContractionFailed(f"measured contraction {factor:.4g} >= 1")

    b = hu_at(a)
    point = z0 + M @ np.concatenate([a, np.zeros(c), b])
    _, nrm = _eta_at_base(hu, np.concatenate([a, np.zeros(c)]),
                          mp.eta_grid, kern)
    if nrm >= block_j.R:
        raise EtaBallViolated(
            f"transported memory norm {nrm:.4g} >= R {block_j.R:.4g}")
    return IntersectionResult(point=point, eps=eps,
                              contraction_factor=factor,
                              transversality_margin=frame.margin,
                              iterations=iters, eta_norm=nrm)


def find_connection(ei: Equilibrium, ej: Equilibrium, eps: float,
                    seed_from_eps0: Optional[ShootingEvidence] = None, *,
                    potential: Potential, kernels: KernelPair,
                    block_i: IsolatingBlock, block_j: IsolatingBlock,
                    config=None, wu_bundle=None, ws_bundle=None):
    """Search for a connection ei -> ej.

    At eps = 0 a fan of trajectories is shot from the local unstable disk
    of ei; entry into the certified block of ej below its boundary
    Lyapunov minimum marks basin capture, and targets with unstable
    directions are landed on by bisecting the fan parameter. At eps > 0 a
    seed from the eps = 0 run is required (its frame, flight time, and
    parameter), and the composed graph iteration of the transported disks
    is run instead. wu_bundle/ws_bundle are optional precomputed
    (map, aperture, disk) triples for the two sides.
    """
    cfg = _merge_config(config)
    P, kern = potential, kernels
    E = lyapunov_budget(P, kern)[0]
    if wu_bundle is None:
        if ei.unstable_dim == 0:
            wu_bundle = (None, 0.0, None)
        else:
            mp = make_time_T_map(block_i, eps, cfg["T"], cfg["dt"])
            L, _ = select_aperture(mp)
            dsk = unstable_manifold(mp, L, n_nodes=cfg["wu_nodes"])
            wu_bundle = (mp, L, dsk)
    if eps == 0.0:
        return _find_by_shooting(ei, ej, eps, block_i=block_i,
                                 block_j=block_j, cfg=cfg, wu=wu_bundle,
                                 E=E, P=P, kern=kern)
    if seed_from_eps0 is None:
        raise ValueError("eps > 0 requires a seed from the eps = 0 run")
    if ws_bundle is None and ej.unstable_dim > 0 and \
            seed_from_eps0.frame is not None:
        mp_s = make_time_T_map(block_j, eps, cfg["T"], cfg["dt"])
        L_s, _ = select_aperture(mp_s)
        dsk_s = stable_manifold(mp_s, L_s, n_nodes=cfg["ws_nodes"])
        ws_bundle = (mp_s, L_s, dsk_s)
    return _find_seeded(ei, ej, eps, seed_from_eps0, block_i=block_i,
                        block_j=block_j, cfg=cfg, wu=wu_bundle,
                        ws=ws_bundle, E=E, P=P, kern=kern)


# -- graphs --------------------------------------------------------------

@dataclasses.dataclass
class ConnectionGraph:
    """Directed connection graph with per-edge evidence."""

    nodes: List[Equilibrium]
    edges: List[Tuple[int, int, object]]
    eps: float
    lyapunov: List[float] = dataclasses.field(default_factory=list)
    failures: Dict[Tuple[int, int], str] = dataclasses.field(default_factory=dict)

    @property
    def edge_set(self):
        return {(i, j) for i, j, _ in self.edges}

    def closure(self):
        """Reachability pairs implied by chains of detected edges."""
        n = len(self.nodes)
        reach = [set() for _ in range(n)]
        for i, j in self.edge_set:
            reach[i].add(j)
        changed = True
        while changed:
            changed = False
            for i in range(n):
                for j in list(reach[i]):
                    new = reach[j] - reach[i] - {i}
                    if new:
                        reach[i] |= new
                        changed = True
        return {(i, j) for i in range(n) for j in reach[i]}

    def validate(self):
        for i, j, _ in self.edges:
            if i == j:
                raise ValueError(f"self edge at node {i}")
            if self.lyapunov and not (self.lyapunov[i] > self.lyapunov[j]):
                raise ValueError(
                    f"edge {i}->{j} violates the Lyapunov ordering")
        return self


def _node_order(eqs: List[Equilibrium]) -> List[Equilibrium]:
    return sorted(eqs, key=lambda e: tuple(e.point))


def _admissible(ei, ej, Li, Lj, d, margin):
    if not (Li > Lj + margin * (1.0 + abs(Li))):
        return None
    u, s = ei.unstable_dim, ej.stable_dim
    if u + s >= d + 1:
        return "frame"
    if u + s == d:
        return "shooting"
    return None


def connection_graph(P: Potential, kernels: KernelPair, eps: float,
                     config=None) -> ConnectionGraph:
    """Assemble the connection graph of the system at one eps.

    Every Lyapunov-compatible ordered pair is searched; pairs whose index
    sum allows a transversal intersection get the full frame treatment,
    pairs at the borderline are checked by direct shooting only. At
    eps > 0 the eps = 0 graph is computed first (or taken from
    config["seed_graph"]) and each of its edges is re-established by the
    seeded iteration; per-edge failures are recorded, not raised.
    Pair searches run on a thread pool sized by MORSEFLOW_THREADS.
    """
    cfg = _merge_config(config)
    eqs = _node_order(find_equilibria(P, kernels, eps, cfg["box_radius"]))
    d = P.dim
    E = lyapunov_budget(P, kernels)[0]
    lyap = [lyapunov_value(HistoryState(x=e.point, eta=None), eps, E, P,
                           kernels) for e in eqs]
    blocks = [build_block(e, P, kernels, eps=eps,
                          others=[o for o in eqs if o is not e])
              for e in eqs]

    if eps == 0.0:
        pairs = []
        for i, ei in enumerate(eqs):
            for j, ej in enumerate(eqs):
                if i == j:
                    continue
                kind = _admissible(ei, ej, lyap[i], lyap[j], d,
                                   cfg["ordering_margin"])
                if kind:
                    pairs.append((i, j, kind))

        wu_cache = {}
        for i in {i for i, _, _ in pairs}:
            if eqs[i].unstable_dim == 0:
                continue
            mp = make_time_T_map(blocks[i], eps, cfg["T"], cfg["dt"])
            L, _ = select_aperture(mp)
            dsk = unstable_manifold(mp, L, n_nodes=cfg["wu_nodes"])
            wu_cache[i] = (mp, L, dsk)
        ws_cache = {}
        for j in {j for _, j, _ in pairs}:
            if eqs[j].stable_dim == 0:
                continue
            mp = make_time_T_map(blocks[j], eps, cfg["T"], cfg["dt"])
            L = wu_cache[j][1] if j in wu_cache else select_aperture(mp)[0]
            dsk = stable_manifold(mp, L, n_nodes=cfg["ws_nodes"])
            ws_cache[j] = (mp, L, dsk)

        def search(item):
            i, j, kind = item
            try:
                ev = find_connection(
                    eqs[i], eqs[j], eps, potential=P, kernels=kernels,
                    block_i=blocks[i], block_j=blocks[j], config=cfg,
                    wu_bundle=wu_cache.get(i), ws_bundle=ws_cache.get(j))
            except (NoEntry, ContractionFailed, EtaBallViolated,
                    NotTransversal, InsufficientSamples,
                    LipschitzUnreachable, Blowup) as ex:
                return i, j, None, f"{type(ex).__name__}: {ex}"
            if kind == "frame" and j in ws_cache:
                try:
                    patch_cfg = dict(cfg)
                    patch_cfg["_t_transport"] = \
                        round((ev.t_flight + cfg["pull_time"]) / cfg["dt"]) \
                        * cfg["dt"]
                    patch_cfg["_span_target"] = 0.9 * blocks[j].delta
                    mpi, _, dski = wu_cache[i]
                    small = dict(patch_cfg)
                    small["patch_nodes"] = 3
                    patch = _disk_patch(mpi, dski, ev.parameter, small)
                    moved = transport_disk(patch, eps,
                                           patch_cfg["_t_transport"],
                                           cfg["dt"])
                    ws_emb = stable_to_embedded(ws_cache[j][0],
                                                ws_cache[j][2])
                    ev.frame = build_intersection_frame(moved, ws_emb,
                                                        ev.point)
                except (NotTransversal, InsufficientSamples, ValueError) as ex:
                    return i, j, None, f"{type(ex).__name__}: {ex}"
            return i, j, ev, None

        workers = max(1, int(os.environ.get("MORSEFLOW_THREADS", "1")))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(search, pairs))

        edges, failures = [], {}
        for i, j, ev, reason in results:
            if ev is not None:
                edges.append((i, j, ev))
            else:
                failures[(i, j)] = reason
        return ConnectionGraph(nodes=eqs, edges=edges, eps=eps,
                               lyapunov=lyap, failures=failures).validate()

    # eps > 0: re-establish each eps = 0 edge from its seed
    g0 = cfg.get("seed_graph")
    if g0 is None:
        g0 = connection_graph(P, kernels, 0.0, config)
    node_map = {}
    for i0, e0 in enumerate(g0.nodes):
        dists = [float(np.linalg.norm(e.point - e0.point)) for e in eqs]
        node_map[i0] = int(np.argmin(dists))

    wu_cache = {}
    for i0, _, _ in g0.edges:
        i = node_map[i0]
        if i in wu_cache or eqs[i].unstable_dim == 0:
            continue
        mp = make_time_T_map(blocks[i], eps, cfg["T"], cfg["dt"])
        L, _ = select_aperture(mp)
        dsk = unstable_manifold(mp, L, n_nodes=cfg["wu_nodes"])
        wu_cache[i] = (mp, L, dsk)
    ws_cache = {}
    for _, j0, ev in g0.edges:
        j = node_map[j0]
        if j in ws_cache or eqs[j].unstable_dim == 0 or ev.frame is None:
            continue
        mp = make_time_T_map(blocks[j], eps, cfg["T"], cfg["dt"])
        L, _ = select_aperture(mp)
        dsk = stable_manifold(mp, L, n_nodes=cfg["ws_nodes"])
        ws_cache[j] = (mp, L, dsk)

    def reestablish(edge):
        i0, j0, seed = edge
        i, j = node_map[i0], node_map[j0]
        try:
            ev = find_connection(
                eqs[i], eqs[j], eps, seed, potential=P, kernels=kernels,
                block_i=blocks[i], block_j=blocks[j], config=cfg,
                wu_bundle=wu_cache.get(i), ws_bundle=ws_cache.get(j))
        except (NoEntry, ContractionFailed, EtaBallViolated, NotTransversal,
                InsufficientSamples, LipschitzUnreachable, Blowup) as ex:
            return i, j, None, f"{type(ex).__name__}: {ex}"
        return i, j, ev, None

    workers = max(1, int(os.environ.get("MORSEFLOW_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(reestablish, g0.edges))

    edges, failures = [], {}
    for i, j, ev, reason in results:
        if ev is not None:
            edges.append((i, j, ev))
        else:
            failures[(i, j)] = reason
    return ConnectionGraph(nodes=eqs, edges=edges, eps=eps, lyapunov=lyap,
                           failures=failures).validate()


# -- comparison ----------------------------------------------------------

@dataclasses.dataclass
class GraphComparison:
    """Node matching and edge-set diff between two connection graphs."""

    node_map: List[Tuple[int, int]]
    unmatched_ref: List[int]
    unmatched_other: List[int]
    edges_equal: bool
    missing_edges: List[Tuple[int, int]]
    extra_edges: List[Tuple[int, int]]
    closures_equal: Optional[bool]
    point_drifts: Dict[Tuple[int, int], float]
    matching_radius: float

    @property
    def isomorphic(self) -> bool:
        return (not self.unmatched_ref and not self.unmatched_other
                and self.edges_equal)

    def as_dict(self):
        return {
            "isomorphic": self.isomorphic,
            "node_map": [list(p) for p in self.node_map],
            "unmatched_ref": self.unmatched_ref,
            "unmatched_other": self.unmatched_other,
            "edges_equal": self.edges_equal,
            "missing_edges": [list(e) for e in self.missing_edges],
            "extra_edges": [list(e) for e in self.extra_edges],
            "closures_equal": self.closures_equal,
            "point_drifts": {f"{i}->{j}": v
                             for (i, j), v in self.point_drifts.items()},
            "matching_radius": self.matching_radius,
        }


def compare_graphs(g0: ConnectionGraph, g_eps: ConnectionGraph,
                   matching_radius: Optional[float] = None) -> GraphComparison:
    """Match nodes by nearest point and diff the edge sets.

    The default radius is half the minimum pairwise distance between the
    reference nodes. Two nodes of the compared graph claiming the same
    reference node is an error; unmatched nodes or differing edges make
    the verdict non-isomorphic with the discrepancies listed. When the
    direct edge sets differ, the transitive closures are also compared
    (chains may stand in for direct edges).
    """
    ref_pts = [e.point for e in g0.nodes]
    if matching_radius is None:
        dmin = math.inf
        for a in range(len(ref_pts)):
            for b in range(a + 1, len(ref_pts)):
                dmin = min(dmin, float(np.linalg.norm(ref_pts[a] - ref_pts[b])))
        matching_radius = 0.5 * dmin if math.isfinite(dmin) else 1.0

    node_map = []
    taken = {}
    unmatched_other = []
    for j, e in enumerate(g_eps.nodes):
        dists = [float(np.linalg.norm(e.point - p)) for p in ref_pts]
        i = int(np.argmin(dists)) if dists else -1
        if i < 0 or dists[i] > matching_radius:
            unmatched_other.append(j)
            continue
        if i in taken:
            raise AmbiguousMatching(
                f"nodes {taken[i]} and {j} both match reference node {i}")
        taken[i] = j
        node_map.append((i, j))
    unmatched_ref = [i for i in range(len(ref_pts)) if i not in taken]

    to_ref = {j: i for i, j in node_map}
    ref_edges = g0.edge_set
    other_edges = set()
    for i, j, _ in g_eps.edges:
        if i in to_ref and j in to_ref:
            other_edges.add((to_ref[i], to_ref[j]))
    missing = sorted(ref_edges - other_edges)
    extra = sorted(other_edges - ref_edges)
    edges_equal = not missing and not extra

    closures_equal = None
    if not edges_equal:
        relabeled = ConnectionGraph(
            nodes=g0.nodes, eps=g_eps.eps,
            edges=[(i, j, None) for i, j in other_edges])
        closures_equal = g0.closure() == relabeled.closure()

    ev0 = {(i, j): ev for i, j, ev in g0.edges}
    drifts = {}
    for i, j, ev in g_eps.edges:
        key = (to_ref.get(i), to_ref.get(j))
        if None not in key and key in ev0:
            drifts[key] = float(np.linalg.norm(ev.point - ev0[key].point))

    return GraphComparison(node_map=node_map, unmatched_ref=unmatched_ref,
                           unmatched_other=unmatched_other,
                           edges_equal=edges_equal, missing_edges=missing,
                           extra_edges=extra, closures_equal=closures_equal,
                           point_drifts=drifts,
                           matching_radius=float(matching_radius))


# -- serialization helpers ----------------------------------------------

def graph_to_dict(g: ConnectionGraph) -> dict:
    nodes = []
    for k, e in enumerate(g.nodes):
        nodes.append({
            "index": k,
            "point": [float(v) for v in e.point],
            "unstable_dim": e.unstable_dim,
            "lyapunov": g.lyapunov[k] if g.lyapunov else None,
        })
    edges = []
    for i, j, ev in g.edges:
        row = {"from": i, "to": j,
               "point": [float(v) for v in ev.point]}
        if isinstance(ev, IntersectionResult):
            row.update({"type": "intersection",
                        "contraction_factor": ev.contraction_factor,
                        "transversality_margin": ev.transversality_margin,
                        "iterations": ev.iterations,
                        "eta_norm": ev.eta_norm})
        else:
            row.update({"type": "shooting",
                        "t_flight": ev.t_flight,
                        "landing_gap": ev.landing_gap,
                        "lyapunov_gap": ev.lyapunov_gap})
        edges.append(row)
    return {"eps": g.eps, "nodes": nodes, "edges": edges,
            "failures": {f"{i}->{j}": r
                         for (i, j), r in sorted(g.failures.items())}}


def to_dot(g: ConnectionGraph) -> str:
    lines = ["digraph connections {"]
    for k, e in enumerate(g.nodes):
        pt = ", ".join(f"{v:.3g}" for v in e.point)
        lines.append(f'  n{k} [label="{k}: u={e.unstable_dim} ({pt})"];')
    for i, j, ev in g.edges:
        if isinstance(ev, IntersectionResult):
            label = f"margin={ev.transversality_margin:.3g}"
        else:
            mg = (ev.frame.margin if ev.frame is not None else math.nan)
            label = f"margin={mg:.3g}"
        lines.append(f'  n{i} -> n{j} [label="{label}"];')
    lines.append("}")
    return "\n".join(lines)

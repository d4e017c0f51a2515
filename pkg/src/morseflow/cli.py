"""Command-line front end: simulation runs, certificates, and reports.

Every subcommand reads one flat config file; flags override single keys.
Exit codes: 0 success, 1 a certificate or preservation check failed (the
report is still written), 2 input or configuration error.
"""

import argparse
import json
import math
import os
import sys
from typing import Optional

import numpy as np

from . import config as _cfgmod
from ._schema import SCHEMAS, check
from .blocks import (_cone_field_data, build_block, cone_certificate,
                     parameterized_cone_budget, verify_isolation)
from .connections import (compare_graphs, connection_graph, graph_to_dict,
                          to_dot)
from .dynamics import (HistoryState, energy_series, integrate,
                       lyapunov_budget)
from .equilibria import find_equilibria
from .errors import (BoundsViolated, ConfigError, MorseflowError,
                     NoCoercivity)
from .kernels import HistoryFunction, certify_kernels, weighted_norm_sq
from .manifolds import (derivative_field, make_time_T_map, select_aperture,
                        stable_manifold, transform_constants,
                        unstable_manifold)

T_MAX_DOUBLING = 8.0
MAX_DELTA_SHRINKS = 3
N_LYAPUNOV_TRAJECTORIES = 20
LYAPUNOV_STEP_TOL = 1e-6


def _pyify(obj):
    """Plain-python copy of a payload (numpy scalars and arrays unwrapped).

    JSON has no infinities, so non-finite values become null; a vacuous
    margin (a block with no faces of that kind) serializes that way.
    """
    if isinstance(obj, dict):
        return {k: _pyify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_pyify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_pyify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def _write_json(path: str, payload: dict) -> dict:
    payload = _pyify(payload)
    schema = SCHEMAS[payload["schema"]]
    errors = check(payload, schema)
    if errors:
        raise RuntimeError(f"emitted JSON violates its schema: {errors[:3]}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return payload


def _print_json(payload: dict):
    print(json.dumps(_pyify(payload), sort_keys=True, indent=2))


def _fmt_eps(v: float) -> str:
    return f"{v:g}"


def _out_path(cfg, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _csv_row(values) -> str:
    return ",".join(f"{float(v):.17g}" for v in values)


def _ordered_equilibria(cfg):
    return find_equilibria(cfg.potential, cfg.pair(), cfg.eps,
                           cfg.box_radius)


def _pick_equilibrium(cfg, index: int):
    eqs = _ordered_equilibria(cfg)
    if not 0 <= index < len(eqs):
        raise ConfigError(
            f"--eq {index}: only {len(eqs)} equilibria in the search box")
    others = [e for k, e in enumerate(eqs) if k != index]
    return eqs[index], others


# -- subcommands ---------------------------------------------------------

def _cmd_certify_kernels(cfg, args) -> int:
    payload = {"schema": "morseflow.kernel-constants.v1",
               "sample_density": cfg.sample_density}
    try:
        kc = certify_kernels(cfg.A, cfg.M, sample_density=cfg.sample_density)
    except MorseflowError as e:
        payload.update({"certified": False, "error": str(e)})
        code = 1
    else:
        payload.update({"certified": True, **kc.as_dict()})
        code = 0
    out = _write_json(_out_path(cfg, "kernel_constants.json"), payload)
    _print_json(out)
    return code


def _load_history(cfg) -> Optional[HistoryFunction]:
    if cfg.history == "zero":
        return None
    try:
        data = np.loadtxt(cfg.history, delimiter=",", skiprows=1, ndmin=2)
    except OSError as e:
        raise ConfigError(f"history: cannot read {cfg.history}: {e}") from None
    if data.shape[1] != cfg.potential.dim + 1:
        raise ConfigError(
            f"history: expected s plus {cfg.potential.dim} columns")
    eta = HistoryFunction(data[:, 0], data[:, 1:])
    grid = np.arange(0.0, data[-1, 0] + 0.5 * cfg.dt, cfg.dt)
    return eta.resample(grid)


def _cmd_simulate(cfg, args) -> int:
    d = cfg.potential.dim
    header = ["t"] + [f"x_{i + 1}" for i in range(d)] + ["norm_eta", "lyapunov"]
    path = _out_path(cfg, "trajectory.csv")
    if cfg.horizon == 0.0:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
        print(f"wrote {path} (0 steps)")
        return 0
    pair = cfg.pair()
    x0 = np.asarray(cfg.initial, dtype=float) if cfg.initial else np.zeros(d)
    if x0.shape != (d,):
        raise ConfigError(f"initial: expected {d} components")
    tr = integrate(HistoryState(x=x0, eta=_load_history(cfg)),
                   cfg.potential, pair, cfg.eps, cfg.horizon, cfg.dt)
    E = lyapunov_budget(cfg.potential, pair)[0]
    nsq, _ = energy_series(tr, pair)
    X = tr.timeline[tr.n_pre:]
    mtot = pair.constants.M_total
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(0, tr.n_steps + 1, cfg.store_eta_stride):
            x = X[k]
            lyap = (E * nsq[k] - 2.0 * cfg.potential.F(x)
                    - cfg.eps * float(x @ mtot @ x))
            fh.write(_csv_row([tr.times[k], *x, math.sqrt(max(nsq[k], 0.0)),
                               lyap]) + "\n")
    print(f"wrote {path} ({tr.n_steps} steps)")
    return 0


def _cmd_equilibria(cfg, args) -> int:
    eqs = _ordered_equilibria(cfg)
    payload = {"schema": "morseflow.equilibria.v1", "eps": cfg.eps,
               "count": len(eqs), "equilibria": [e.as_dict() for e in eqs]}
    out = _write_json(_out_path(cfg, f"equilibria_eps{_fmt_eps(cfg.eps)}.json"),
                      payload)
    _print_json(out)
    return 0


def _cmd_block(cfg, args) -> int:
    pair = cfg.pair()
    eq, others = _pick_equilibrium(cfg, args.eq)
    payload = {"schema": "morseflow.block-certificate.v1", "eq_index": args.eq,
               "eps": cfg.eps, "point": list(eq.point)}
    code = 0
    try:
        block = build_block(eq, cfg.potential, pair, eps=cfg.eps,
                            kappa=cfg.block_kappa, delta=cfg.block_delta,
                            others=others,
                            n_boundary_samples=cfg.boundary_samples)
        report = verify_isolation(block, cfg.eps, cfg.potential, pair,
                                  n_boundary_samples=cfg.boundary_samples)
        payload.update({"delta": block.delta, "R": block.R,
                        "kappa": cfg.block_kappa, "samples": report.n_samples})
        e_max = _cone_field_data(block, pair.constants, cfg.potential, 1.0)[2]
        E = e_max / 200.0
        G, B, positive = cone_certificate(block, cfg.eps, E, cfg.potential,
                                          pair.constants)
        L0, Delta = parameterized_cone_budget(block, E, pair.constants,
                                              cfg.potential)
        payload.update({
            "E": E, "G": G, "L0": L0, "Delta": Delta,
            "margins": {"entry": report.entry, "exit": report.exit,
                        "memory": report.memory,
                        "cone_det": float(np.linalg.det(B))},
            "certified": bool(report.certified and positive)})
        code = 0 if payload["certified"] else 1
    except (BoundsViolated, NoCoercivity, MorseflowError) as e:
        payload.update({"certified": False, "error": str(e)})
        code = 1
    out = _write_json(
        _out_path(cfg, f"block_eq{args.eq}_eps{_fmt_eps(cfg.eps)}.json"),
        payload)
    _print_json(out)
    return code


def _aperture_with_policy(cfg, pair, eq, others):
    """Time-T map plus certified aperture; double T, then shrink delta."""
    delta = cfg.block_delta
    for shrink in range(MAX_DELTA_SHRINKS + 1):
        block = build_block(eq, cfg.potential, pair, eps=cfg.eps,
                            kappa=cfg.block_kappa, delta=delta, others=others,
                            n_boundary_samples=cfg.boundary_samples)
        T = cfg.manifold_T
        while True:
            mp = make_time_T_map(block, cfg.eps, T, cfg.dt)
            try:
                if cfg.manifold_L is not None:
                    return block, mp, cfg.manifold_L, \
                        transform_constants(mp, cfg.manifold_L), T
                L, tc = select_aperture(mp)
                return block, mp, L, tc, T
            except BoundsViolated as err:
                if T < T_MAX_DOUBLING:
                    T = min(T_MAX_DOUBLING, 2.0 * T)
                    continue
                if shrink == MAX_DELTA_SHRINKS:
                    raise err
                delta = block.delta * 0.5
                break


def _eta_col_norm(eta_values, grid, A) -> float:
    return math.sqrt(weighted_norm_sq(HistoryFunction(grid, eta_values), A))


def _grid_points(axes):
    if not axes:
        return np.zeros((1, 0))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1) \
        .reshape(-1, len(axes))


def _fd_slopes(values, axes, shape):
    """Central-difference slopes of grid values, one-sided at the edges."""
    arr = values.reshape(*shape, -1)
    out = np.zeros(arr.shape + (len(axes),))
    for ax, grid in enumerate(axes):
        out[..., ax] = np.gradient(arr, grid, axis=ax)
    return out.reshape(len(values), -1)


def _cmd_manifold(cfg, args) -> int:
    pair = cfg.pair()
    eq, others = _pick_equilibrium(cfg, args.eq)
    if args.side == "unstable" and eq.unstable_dim == 0:
        raise ConfigError(f"--eq {args.eq} has no unstable directions")
    if args.side == "stable" and eq.stable_dim == 0:
        raise ConfigError(f"--eq {args.eq} has no stable directions")
    block, mp, L, tc, T = _aperture_with_policy(cfg, pair, eq, others)
    du, ds = mp.dims
    A = pair.A
    stem = f"manifold_eq{args.eq}_{args.side}_eps{_fmt_eps(cfg.eps)}"
    csv_path = _out_path(cfg, stem + ".csv")
    slope_error = None

    if args.side == "unstable":
        disk = unstable_manifold(mp, L, tol_fixed_point=cfg.manifold_tol,
                                 n_nodes=cfg.manifold_grid)
        try:
            sf = derivative_field(mp, disk, L, 2.0 * L, tol=cfg.manifold_tol)
        except MorseflowError as e:
            sf, slope_error = None, str(e)
        base = _grid_points(disk.domain_grid)
        cols = [f"base_{i + 1}" for i in range(du)]
        cols += [f"y_{i + 1}" for i in range(ds)]
        cols += ["eta_norm"]
        if sf is not None:
            cols += [f"s_{r + 1}{c + 1}" for r in range(ds) for c in range(du)]
            cols += [f"meta_norm_{c + 1}" for c in range(du)]
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(base.shape[0]):
                row = [*base[k], *disk.values_y[k],
                       _eta_col_norm(disk.values_eta[k], mp.eta_grid, A)]
                if sf is not None:
                    row += list(sf.slopes[0][k].reshape(-1))
                    row += [_eta_col_norm(sf.slopes[1][k, c], mp.eta_grid, A)
                            for c in range(du)]
                fh.write(_csv_row(row) + "\n")
        lip = disk.lip_estimate
        grid_shape = list(disk.shape)
    else:
        disk = stable_manifold(mp, L, tol=cfg.manifold_tol,
                               n_nodes=cfg.manifold_grid)
        n_probes = len(disk.probes)
        base = _grid_points(disk.domain_grid)
        slopes = None
        if ds and du:
            per_probe = [disk.values_y[p::n_probes] for p in range(n_probes)]
            slopes = [_fd_slopes(v, disk.domain_grid, disk.shape)
                      for v in per_probe]
        cols = [f"base_{i + 1}" for i in range(ds)] + ["probe"]
        cols += [f"u_{i + 1}" for i in range(du)]
        if slopes is not None:
            cols += [f"s_{r + 1}{c + 1}" for r in range(du) for c in range(ds)]
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(base.shape[0]):
                for p in range(n_probes):
                    row = [*base[k], p, *disk.values_y[k * n_probes + p]]
                    if slopes is not None:
                        row += list(slopes[p][k])
                    fh.write(_csv_row(row) + "\n")
        lip = disk.lip_estimate
        grid_shape = list(disk.shape) + [n_probes]

    payload = {"schema": "morseflow.manifold-header.v1", "eq_index": args.eq,
               "side": args.side, "eps": cfg.eps, "T": T, "L": L,
               "delta": block.delta, "R": block.R, "grid": grid_shape,
               "lip_estimate": lip, "constants": tc.as_dict(),
               "csv": os.path.basename(csv_path)}
    if slope_error is not None:
        payload["slope_error"] = slope_error
    _write_json(_out_path(cfg, stem + ".json"), payload)
    print(f"wrote {csv_path}")
    print(f"wrote {_out_path(cfg, stem + '.json')}")
    return 0 if slope_error is None else 1


def _graph_config(cfg) -> dict:
    return {"fan": cfg.graph_fan, "box_radius": cfg.box_radius, "dt": cfg.dt}


def _cmd_graph(cfg, args) -> int:
    pair = cfg.pair()
    g = connection_graph(cfg.potential, pair, cfg.eps, config=_graph_config(cfg))
    stem = f"graph_eps{_fmt_eps(cfg.eps)}"
    payload = {"schema": "morseflow.graph.v1", **graph_to_dict(g)}
    _write_json(_out_path(cfg, stem + ".json"), payload)
    dot_path = _out_path(cfg, stem + ".dot")
    with open(dot_path, "w", encoding="utf-8") as fh:
        fh.write(to_dot(g) + "\n")
    print(f"wrote {dot_path}")
    print(f"wrote {_out_path(cfg, stem + '.json')}")
    print(f"{len(g.edges)} edges, {len(g.failures)} failed pairs")
    return 0


def _cmd_compare(cfg, args) -> int:
    eps_list = cfg.eps_list
    if args.eps_list:
        try:
            eps_list = [float(v) for v in args.eps_list.split(",")]
        except ValueError:
            raise ConfigError(f"--eps-list: not numbers: {args.eps_list!r}") \
                from None
    if len(eps_list) < 2:
        raise ConfigError("compare needs at least two eps values "
                          "(--eps-list or the eps_list config key)")
    pair = cfg.pair()
    gcfg = _graph_config(cfg)
    ref = connection_graph(cfg.potential, pair, eps_list[0], config=gcfg)
    seed = ref if eps_list[0] == 0.0 else None
    reports = []
    identical = True
    for eps in eps_list[1:]:
        run_cfg = dict(gcfg)
        if eps > 0.0 and seed is not None:
            run_cfg["seed_graph"] = seed
        g = connection_graph(cfg.potential, pair, eps, config=run_cfg)
        rep = compare_graphs(ref, g, matching_radius=cfg.matching_radius)
        identical = identical and rep.isomorphic
        reports.append({"eps": eps, **rep.as_dict()})
    payload = {"schema": "morseflow.compare.v1", "eps_list": eps_list,
               "verdict": "identical" if identical else "different",
               "reports": reports}
    out = _write_json(_out_path(cfg, "compare.json"), payload)
    _print_json(out)
    return 0 if identical else 1


def _cmd_lyapunov_report(cfg, args) -> int:
    pair = cfg.pair()
    P = cfg.potential
    E, eps0_of = lyapunov_budget(P, pair)
    rng = np.random.default_rng(cfg.seed)
    mtot = pair.constants.M_total
    worst = -math.inf
    for _ in range(N_LYAPUNOV_TRAJECTORIES):
        x0 = rng.uniform(-cfg.box_radius, cfg.box_radius, size=P.dim)
        tr = integrate(HistoryState(x=x0, eta=None), P, pair, cfg.eps,
                       cfg.horizon, cfg.dt)
        nsq, _ = energy_series(tr, pair)
        X = tr.timeline[tr.n_pre:]
        lyap = (E * nsq - 2.0 * np.array([P.F(x) for x in X])
                - cfg.eps * np.einsum("ki,ij,kj->k", X, mtot, X))
        worst = max(worst, float(np.max(np.diff(lyap))))
    monotone = worst <= LYAPUNOV_STEP_TOL
    payload = {"schema": "morseflow.lyapunov.v1", "E": E, "eps": cfg.eps,
               "eps0": eps0_of(E), "n_trajectories": N_LYAPUNOV_TRAJECTORIES,
               "seed": cfg.seed, "dt": cfg.dt, "horizon": cfg.horizon,
               "max_violation": worst, "monotone": monotone}
    out = _write_json(_out_path(cfg, "lyapunov_report.json"), payload)
    _print_json(out)
    return 0 if monotone else 1


_HANDLERS = {
    "certify-kernels": _cmd_certify_kernels,
    "simulate": _cmd_simulate,
    "equilibria": _cmd_equilibria,
    "block": _cmd_block,
    "manifold": _cmd_manifold,
    "graph": _cmd_graph,
    "compare": _cmd_compare,
    "lyapunov-report": _cmd_lyapunov_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morseflow",
        description="Gradient flows with memory: simulation, isolating "
                    "blocks, invariant manifolds, connection graphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **extra):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="flat key=value file")
        p.add_argument("--eps", type=float, default=None,
                       help="override the configured coupling strength")
        p.add_argument("--seed", type=int, default=None,
                       help="override the sampling seed")
        p.add_argument("--out", default=None,
                       help="override the output directory")
        for flag, kw in extra.items():
            p.add_argument(flag, **kw)
        return p

    add("certify-kernels", "certify the kernel pair and report constants")
    add("simulate", "integrate one trajectory and write the CSV")
    add("equilibria", "locate and classify all equilibria")
    add("block", "build and certify one isolating block",
        **{"--eq": {"type": int, "required": True,
                    "help": "equilibrium index (lexicographic point order)"}})
    add("manifold", "compute one local invariant manifold",
        **{"--eq": {"type": int, "required": True},
           "--side": {"choices": ["stable", "unstable"], "required": True}})
    add("graph", "assemble the connection graph at one eps")
    add("compare", "compare connection graphs across eps values",
        **{"--eps-list": {"default": "", "help": "comma-separated eps values"}})
    add("lyapunov-report", "check Lyapunov monotonicity on random runs")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    overrides = {}
    if args.eps is not None:
        overrides["eps"] = repr(args.eps)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["output.dir"] = args.out
    try:
        cfg = _cfgmod.parse_config(args.config, overrides)
        return _HANDLERS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MorseflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

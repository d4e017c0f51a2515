"""Flat key=value run configuration for the command line.

Dotted keys group options (potential.*, kernel.A.*, integrator.*). Values
are scalars, comma-separated lists, file paths, or the word "auto"; there
is no nesting and no include mechanism, so configs diff line by line.
"""

import dataclasses
import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dynamics import Potential, quartic_diag, toy_1d, toy_2d
from .errors import ConfigError
from .kernels import KernelPair, KernelSpec, exp_kernel, table_kernel, zero_kernel

_DEFAULTS = {
    "eps": "0",
    "eps_list": "",
    "integrator.dt": "0.01",
    "integrator.horizon": "10",
    "initial": "",
    "history": "zero",
    "store_eta_stride": "1",
    "seed": "0",
    "output.dir": "out",
    "search.box_radius": "1.6",
    "block.kappa": "0.05",
    "block.delta": "auto",
    "block.boundary_samples": "2000",
    "manifold.L": "auto",
    "manifold.T": "1.0",
    "manifold.grid": "9",
    "manifold.tol": "1e-10",
    "graph.fan": "64",
    "graph.matching_radius": "auto",
    "kernel.sample_density": "1000",
}

_POTENTIAL_KEYS = {"potential.family", "potential.a", "potential.b",
                   "potential.dim"}
_KERNEL_KEYS = {f"kernel.{w}.{p}" for w in ("A", "M")
                for p in ("family", "kappa", "scale", "dimension", "table")}
_KNOWN = set(_DEFAULTS) | _POTENTIAL_KEYS | _KERNEL_KEYS


@dataclasses.dataclass
class RunConfig:
    """Parsed and validated run options; kernel pair built on demand."""

    potential: Potential
    A: KernelSpec
    M: KernelSpec
    eps: float
    eps_list: List[float]
    dt: float
    horizon: float
    initial: List[float]
    history: str
    store_eta_stride: int
    seed: int
    out_dir: str
    box_radius: float
    block_kappa: float
    block_delta: Optional[float]
    boundary_samples: int
    manifold_L: Optional[float]
    manifold_T: float
    manifold_grid: int
    manifold_tol: float
    graph_fan: int
    matching_radius: Optional[float]
    sample_density: int
    raw: Dict[str, str]

    def pair(self) -> KernelPair:
        """Certified kernel pair; raises the kernel module's errors."""
        return KernelPair(self.A, self.M, sample_density=self.sample_density)


def _err(lineno, key, msg) -> ConfigError:
    where = f"line {lineno}: " if lineno else ""
    return ConfigError(f"{where}{key}: {msg}")


def _parse_lines(text: str) -> Tuple[Dict[str, str], Dict[str, int]]:
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {n}: expected key = value, got {stripped!r}")
        key, _, val = stripped.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in values:
            raise _err(n, key, f"duplicate (first set on line {lines[key]})")
        if key not in _KNOWN:
            raise _err(n, key, "unknown key")
        values[key] = val
        lines[key] = n
    return values, lines


class _Reader:
    """Typed access to raw values with line diagnostics."""

    def __init__(self, values, lines):
        self.values = values
        self.lines = lines

    def has(self, key):
        return key in self.values

    def get(self, key, default=None):
        if key in self.values:
            return self.values[key]
        if key in _DEFAULTS:
            return _DEFAULTS[key]
        if default is not None:
            return default
        raise ConfigError(f"{key}: required key missing")

    def _line(self, key):
        return self.lines.get(key, 0)

    def floatv(self, key, positive=False, nonnegative=False):
        raw = self.get(key)
        try:
            v = float(raw)
        except ValueError:
            raise _err(self._line(key), key, f"not a number: {raw!r}") from None
        if not math.isfinite(v):
            raise _err(self._line(key), key, "must be finite")
        if positive and v <= 0:
            raise _err(self._line(key), key, "must be positive")
        if nonnegative and v < 0:
            raise _err(self._line(key), key, "must be nonnegative")
        return v

    def intv(self, key, minimum=None):
        raw = self.get(key)
        try:
            v = int(raw)
        except ValueError:
            raise _err(self._line(key), key, f"not an integer: {raw!r}") from None
        if minimum is not None and v < minimum:
            raise _err(self._line(key), key, f"must be >= {minimum}")
        return v

    def autov(self, key, positive=True):
        if self.get(key) == "auto":
            return None
        return self.floatv(key, positive=positive)

    def listv(self, key):
        raw = self.get(key)
        if not raw:
            return []
        out = []
        for part in raw.split(","):
            try:
                out.append(float(part.strip()))
            except ValueError:
                raise _err(self._line(key), key,
                           f"not a number in list: {part.strip()!r}") from None
        return out


def _build_potential(r: _Reader) -> Potential:
    family = r.get("potential.family")
    if family == "toy_1d":
        return toy_1d()
    if family == "toy_2d":
        return toy_2d()
    if family == "quartic_diag":
        a = r.listv("potential.a") if r.has("potential.a") else None
        b = r.listv("potential.b") if r.has("potential.b") else None
        if not a or not b:
            raise ConfigError("potential.a/potential.b: required for quartic_diag")
        if len(a) != len(b):
            raise ConfigError("potential.a/potential.b: length mismatch")
        if any(v <= 0 for v in a + b):
            raise ConfigError("potential.a/potential.b: coefficients must be positive")
        return quartic_diag(np.array(a), np.array(b))
    raise _err(r._line("potential.family"), "potential.family",
               f"unknown family {family!r}")


def _load_table(path: str, lineno: int, key: str):
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as e:
        raise _err(lineno, key, f"cannot read table: {e}") from None
    if data.shape[0] < 2:
        raise _err(lineno, key, "table needs at least two samples")
    s = data[:, 0]
    d = int(round(math.sqrt(data.shape[1] - 1)))
    if d * d != data.shape[1] - 1:
        raise _err(lineno, key,
                   f"{data.shape[1] - 1} entry columns is not a square matrix")
    mats = data[:, 1:].reshape(-1, d, d)
    return s, mats


def _build_kernel(r: _Reader, which: str, dim: int,
                  s_max: Optional[float]) -> KernelSpec:
    base = f"kernel.{which}"
    family = r.get(f"{base}.family")
    lineno = r._line(f"{base}.family")
    kdim = r.intv(f"{base}.dimension", minimum=1) \
        if r.has(f"{base}.dimension") else dim
    if family == "exp_scalar":
        kappa = r.floatv(f"{base}.kappa", positive=True)
        scale = r.floatv(f"{base}.scale", positive=True) \
            if r.has(f"{base}.scale") else 1.0
        return exp_kernel(kappa, scale=scale, dim=kdim, s_max=s_max)
    if family == "zero":
        return zero_kernel(kdim, s_max=s_max if s_max is not None else 1.0)
    if family == "table":
        path = r.get(f"{base}.table", default="")
        if not path:
            raise _err(lineno, f"{base}.table", "required for the table family")
        s, mats = _load_table(path, r._line(f"{base}.table"), f"{base}.table")
        # certification needs d'; the file carries only samples of d
        return table_kernel(s, mats,
                            derivative_matrices=np.gradient(mats, s, axis=0))
    raise _err(lineno, f"{base}.family", f"unknown family {family!r}")


def parse_text(text: str, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Parse config text, apply raw overrides, validate, build objects."""
    values, lines = _parse_lines(text)
    for key, val in (overrides or {}).items():
        if key not in _KNOWN:
            raise ConfigError(f"{key}: unknown key")
        values[key] = val
    r = _Reader(values, lines)

    P = _build_potential(r)
    A = _build_kernel(r, "A", P.dim, None)
    M = _build_kernel(r, "M", P.dim, A.s_max)
    if A.dim != P.dim or M.dim != P.dim:
        raise ConfigError(
            f"kernel dimensions ({A.dim}, {M.dim}) must match the "
            f"potential dimension {P.dim}")

    grid = r.intv("manifold.grid", minimum=3)
    return RunConfig(
        potential=P, A=A, M=M,
        eps=r.floatv("eps", nonnegative=True),
        eps_list=r.listv("eps_list"),
        dt=r.floatv("integrator.dt", positive=True),
        horizon=r.floatv("integrator.horizon", nonnegative=True),
        initial=r.listv("initial"),
        history=r.get("history"),
        store_eta_stride=r.intv("store_eta_stride", minimum=1),
        seed=r.intv("seed", minimum=0),
        out_dir=r.get("output.dir"),
        box_radius=r.floatv("search.box_radius", positive=True),
        block_kappa=r.floatv("block.kappa", positive=True),
        block_delta=r.autov("block.delta"),
        boundary_samples=r.intv("block.boundary_samples", minimum=8),
        manifold_L=r.autov("manifold.L"),
        manifold_T=r.floatv("manifold.T", positive=True),
        manifold_grid=grid,
        manifold_tol=r.floatv("manifold.tol", positive=True),
        graph_fan=r.intv("graph.fan", minimum=2),
        matching_radius=r.autov("graph.matching_radius"),
        sample_density=r.intv("kernel.sample_density", minimum=2),
        raw=dict(values))


def parse_config(path: str, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_text(text, overrides)

"""Schemas for every JSON report plus a small checker for them.

The checker covers the subset the reports use: type, properties,
required, additionalProperties, items, enum, const, minimum, maximum.
The dicts here are the source of truth; docs/schemas/ ships rendered
copies and a test keeps them in sync.
"""

from typing import Any, List

_TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "boolean": bool,
    "null": type(None),
}


def _type_ok(value, name):
    if name == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if name == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, _TYPES[name])


def check(instance: Any, schema: dict, path: str = "$") -> List[str]:
    """Validation errors of instance against schema; empty means valid."""
    errors: List[str] = []
    t = schema.get("type")
    if t is not None:
        names = t if isinstance(t, list) else [t]
        if not any(_type_ok(instance, n) for n in names):
            errors.append(f"{path}: expected {t}, got {type(instance).__name__}")
            return errors
    if "const" in schema and instance != schema["const"]:
        errors.append(f"{path}: must equal {schema['const']!r}")
    if "enum" in schema and instance not in schema["enum"]:
        errors.append(f"{path}: not one of {schema['enum']!r}")
    if isinstance(instance, (int, float)) and not isinstance(instance, bool):
        if "minimum" in schema and instance < schema["minimum"]:
            errors.append(f"{path}: {instance} < minimum {schema['minimum']}")
        if "maximum" in schema and instance > schema["maximum"]:
            errors.append(f"{path}: {instance} > maximum {schema['maximum']}")
    if isinstance(instance, dict):
        props = schema.get("properties", {})
        for key in schema.get("required", []):
            if key not in instance:
                errors.append(f"{path}: missing required key {key!r}")
        for key, value in instance.items():
            if key in props:
                errors.extend(check(value, props[key], f"{path}.{key}"))
            elif schema.get("additionalProperties") is False:
                errors.append(f"{path}: unexpected key {key!r}")
            elif isinstance(schema.get("additionalProperties"), dict):
                errors.extend(check(value, schema["additionalProperties"],
                                    f"{path}.{key}"))
    if isinstance(instance, list) and "items" in schema:
        for k, item in enumerate(instance):
            errors.extend(check(item, schema["items"], f"{path}[{k}]"))
    return errors


def _num():
    return {"type": "number"}


def _numarr():
    return {"type": "array", "items": _num()}


_MATRIX = {"type": "array", "items": _numarr()}

KERNEL_CONSTANTS_V1 = {
    "type": "object",
    "required": ["schema", "certified"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "morseflow.kernel-constants.v1"},
        "certified": {"type": "boolean"},
        "error": {"type": "string"},
        "sample_density": {"type": "integer", "minimum": 2},
        "C_A": _num(),
        "D_A_bar": _num(),
        "D_A": _num(),
        "D_M_bar": _num(),
        "D_M": _num(),
        "int_norm_A": _num(),
        "int_norm_M": _num(),
        "M_total": _MATRIX,
    },
}

_EQUILIBRIUM = {
    "type": "object",
    "required": ["point", "eps", "dims", "residual"],
    "additionalProperties": False,
    "properties": {
        "point": _numarr(),
        "eps": _num(),
        "jacobian": _MATRIX,
        "spectrum_re": _numarr(),
        "spectrum_im": _numarr(),
        "dims": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "residual": _num(),
    },
}

EQUILIBRIA_V1 = {
    "type": "object",
    "required": ["schema", "eps", "count", "equilibria"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "morseflow.equilibria.v1"},
        "eps": _num(),
        "count": {"type": "integer", "minimum": 0},
        "equilibria": {"type": "array", "items": _EQUILIBRIUM},
    },
}

BLOCK_CERTIFICATE_V1 = {
    "type": "object",
    "required": ["schema", "eq_index", "eps", "certified"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "morseflow.block-certificate.v1"},
        "eq_index": {"type": "integer", "minimum": 0},
        "eps": _num(),
        "point": _numarr(),
        "certified": {"type": "boolean"},
        "error": {"type": "string"},
        "delta": {"type": "number", "minimum": 0},
        "R": {"type": "number", "minimum": 0},
        "kappa": {"type": "number", "minimum": 0},
        "E": {"type": "number", "minimum": 0},
        "G": _num(),
        "L0": {"type": "number", "minimum": 0},
        "Delta": {"type": ["number", "null"]},
        "margins": {
            "type": "object",
            "required": ["entry", "exit", "memory", "cone_det"],
            "additionalProperties": False,
            "properties": {"entry": {"type": ["number", "null"]},
                           "exit": {"type": ["number", "null"]},
                           "memory": {"type": ["number", "null"]},
                           "cone_det": _num()},
        },
        "samples": {"type": "integer", "minimum": 0},
    },
}

MANIFOLD_HEADER_V1 = {
    "type": "object",
    "required": ["schema", "eq_index", "side", "eps", "T", "L", "delta",
                 "R", "grid", "lip_estimate", "constants", "csv"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "morseflow.manifold-header.v1"},
        "eq_index": {"type": "integer", "minimum": 0},
        "side": {"enum": ["stable", "unstable"]},
        "eps": _num(),
        "T": {"type": "number", "minimum": 0},
        "L": {"type": "number", "minimum": 0},
        "delta": {"type": "number", "minimum": 0},
        "R": {"type": "number", "minimum": 0},
        "grid": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "lip_estimate": _num(),
        "constants": {"type": "object",
                      "additionalProperties": {"type": ["number", "null"]}},
        "csv": {"type": "string"},
        "slope_error": {"type": "string"},
    },
}

_GRAPH_NODE = {
    "type": "object",
    "required": ["index", "point", "unstable_dim"],
    "additionalProperties": False,
    "properties": {
        "index": {"type": "integer", "minimum": 0},
        "point": _numarr(),
        "unstable_dim": {"type": "integer", "minimum": 0},
        "lyapunov": {"type": ["number", "null"]},
    },
}

_GRAPH_EDGE = {
    "type": "object",
    "required": ["from", "to", "point", "type"],
    "additionalProperties": False,
    "properties": {
        "from": {"type": "integer", "minimum": 0},
        "to": {"type": "integer", "minimum": 0},
        "point": _numarr(),
        "type": {"enum": ["shooting", "intersection"]},
        "t_flight": _num(),
        "landing_gap": _num(),
        "lyapunov_gap": _num(),
        "contraction_factor": _num(),
        "transversality_margin": _num(),
        "iterations": {"type": "integer", "minimum": 0},
        "eta_norm": _num(),
    },
}

GRAPH_V1 = {
    "type": "object",
    "required": ["schema", "eps", "nodes", "edges", "failures"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "morseflow.graph.v1"},
        "eps": _num(),
        "nodes": {"type": "array", "items": _GRAPH_NODE},
        "edges": {"type": "array", "items": _GRAPH_EDGE},
        "failures": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}

_COMPARE_REPORT = {
    "type": "object",
    "required": ["eps", "isomorphic", "edges_equal"],
    "additionalProperties": False,
    "properties": {
        "eps": _num(),
        "isomorphic": {"type": "boolean"},
        "node_map": {"type": "array",
                     "items": {"type": "array", "items": {"type": "integer"}}},
        "unmatched_ref": {"type": "array", "items": {"type": "integer"}},
        "unmatched_other": {"type": "array", "items": {"type": "integer"}},
        "edges_equal": {"type": "boolean"},
        "missing_edges": {"type": "array",
                          "items": {"type": "array", "items": {"type": "integer"}}},
        "extra_edges": {"type": "array",
                        "items": {"type": "array", "items": {"type": "integer"}}},
        "closures_equal": {"type": ["boolean", "null"]},
        "point_drifts": {"type": "object", "additionalProperties": _num()},
        "matching_radius": _num(),
    },
}

COMPARE_V1 = {
    "type": "object",
    "required": ["schema", "eps_list", "verdict", "reports"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "morseflow.compare.v1"},
        "eps_list": _numarr(),
        "verdict": {"enum": ["identical", "different"]},
        "reports": {"type": "array", "items": _COMPARE_REPORT},
    },
}

LYAPUNOV_V1 = {
    "type": "object",
    "required": ["schema", "E", "eps", "eps0", "n_trajectories", "seed",
                 "dt", "horizon", "max_violation", "monotone"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": "morseflow.lyapunov.v1"},
        "E": {"type": "number", "minimum": 0},
        "eps": _num(),
        "eps0": {"type": ["number", "null"]},
        "n_trajectories": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "dt": {"type": "number", "minimum": 0},
        "horizon": {"type": "number", "minimum": 0},
        "max_violation": _num(),
        "monotone": {"type": "boolean"},
    },
}

SCHEMAS = {
    "morseflow.kernel-constants.v1": KERNEL_CONSTANTS_V1,
    "morseflow.equilibria.v1": EQUILIBRIA_V1,
    "morseflow.block-certificate.v1": BLOCK_CERTIFICATE_V1,
    "morseflow.manifold-header.v1": MANIFOLD_HEADER_V1,
    "morseflow.graph.v1": GRAPH_V1,
    "morseflow.compare.v1": COMPARE_V1,
    "morseflow.lyapunov.v1": LYAPUNOV_V1,
}

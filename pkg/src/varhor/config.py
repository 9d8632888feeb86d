"""Run configuration: JSON schema, defaults and ``key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from typing import Any

import jsonschema

from .errors import SchemaError

_NUM = {"type": "number"}
_NUMS = {"type": "array", "items": _NUM, "minItems": 1}
_EXPR = {"type": "string"}
_EXPRS = {"oneOf": [_EXPR, {"type": "array", "items": _EXPR, "minItems": 1}]}
_POS_INT = {"type": "integer", "minimum": 1}

PROBLEM_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "dims": {
            "type": "object",
            "properties": {g: _POS_INT for g in ("n", "m", "d", "k")},
            "additionalProperties": False,
        },
        "f": _EXPRS,
        "sigma": {"oneOf": [_EXPR, {"type": "array", "items": _EXPRS, "minItems": 1}]},
        "g": _EXPRS,
        "Psi": _EXPRS,
        "l": _EXPR,
        "beta": _EXPR,
        "gamma": _EXPR,
        "Phi": _EXPR,
    },
    "required": ["f", "Phi"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "problem": {"oneOf": [{"type": "string"}, PROBLEM_SCHEMA]},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "alpha": {"oneOf": [_NUM, {"enum": ["inf", "+inf", "Infinity"]}]},
        "x0": _NUMS,
        "control": {
            "type": "object",
            "properties": {
                "init": {"oneOf": [_NUM, _NUMS]},
                "box": {
                    "type": "object",
                    "properties": {"lo": _NUMS, "hi": _NUMS},
                    "required": ["lo", "hi"],
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "grid": {
            "type": "object",
            "properties": {"steps": _POS_INT},
            "additionalProperties": False,
        },
        "mc": {
            "type": "object",
            "properties": {"paths": _POS_INT, "seed": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "bsde": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["auto", "deterministic", "regression"]},
                "basis_degree": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "stopping": {
            "type": "object",
            "properties": {"at_T_band_cells": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "smp": {
            "type": "object",
            "properties": {
                "u_probes": {"type": "array", "minItems": 1},
                "t_nodes": _POS_INT,
                "rho_list": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                             "minItems": 1},
                "direction": {"oneOf": [_NUM, _NUMS]},
            },
            "additionalProperties": False,
        },
        "optimizer": {
            "type": "object",
            "properties": {
                "step0": {"type": "number", "exclusiveMinimum": 0},
                "max_iters": _POS_INT,
                "armijo_c": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "shrink": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "grad_tol": {"type": "number", "exclusiveMinimum": 0},
                "steps": _POS_INT,
            },
            "additionalProperties": False,
        },
        "output": {"type": "string"},
    },
    "required": ["problem"],
    "additionalProperties": False,
}

DEFAULTS: dict[str, Any] = {
    "grid": {"steps": 10000},
    "mc": {"paths": 1, "seed": 20240101},
    "bsde": {"mode": "auto", "basis_degree": 2},
    "stopping": {"at_T_band_cells": 2},
    "smp": {
        "u_probes": [1.0, 1.25, 1.5, 1.75, 2.0],
        "t_nodes": 50,
        "rho_list": [0.1, 0.05, 0.025, 0.0125],
        "direction": 1.0,
    },
    "optimizer": {
        "step0": 1.0e5,
        "max_iters": 200,
        "armijo_c": 1.0e-4,
        "shrink": 0.5,
        "grad_tol": 1.0e-6,
        "steps": 1000,
    },
    "output": "out",
}


def validate(config: dict) -> None:
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(path, exc.message) from None


def with_defaults(config: dict) -> dict:
    """Fill in run sections that the config leaves out."""
    out = copy.deepcopy(config)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            merged = dict(val)
            merged.update(out.get(key, {}))
            out[key] = merged
        else:
            out.setdefault(key, val)
    return out


def parse_alpha(value) -> float:
    if isinstance(value, str):
        return math.inf
    return float(value)


def apply_override(config: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; the value is read as JSON when possible."""
    if "=" not in assignment:
        raise SchemaError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(config)
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        if not isinstance(child, dict):
            raise SchemaError(key, f"{part} is not a section")
        node = child
    node[parts[-1]] = value
    return out


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()

"""JSON run configuration: schema, defaults and validation."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .errors import InvalidArgument

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "generator": {"enum": ["two_cluster", "blobs", "linear_gaussian", "csv"]},
                "d": _int1, "m": _int1, "K": {"type": "integer", "minimum": 2},
                "per_class": _int1, "spread": _nonneg, "noise": _nonneg,
                "path": {"type": "string"}, "test_path": {"type": "string"},
                "test_m": _int1, "test_per_class": _int1,
            },
            "required": ["generator"],
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["linear_ridge", "kernel_ridge", "svm_reg", "softmax_head",
                                    "two_layer"]},
                "lam": _pos, "kernel": {"enum": ["bilinear", "rbf"]}, "gamma": _pos,
                "p": _int1, "k": _int1, "epochs": _int1, "lr": _pos, "batch": _int1,
                "tau": _nonneg, "iters": _int1,
            },
            "required": ["family", "lam"],
        },
        "influence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "damping": {"oneOf": [_nonneg, {"const": "auto"}]},
                "solver": {"enum": ["cg", "dense"]},
                "cg_tol": _pos,
                "hessian_method": {"enum": ["analytic", "fd"]},
            },
        },
        "sensitivity": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["influence", "exact_loo", "stepwise"]},
                "n_train": _int1, "n_test": _int1, "eta_probe": _pos,
                "fresh": {"type": "boolean"},
            },
        },
        "validate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"sample": _int1, "min_delta": _nonneg},
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 2},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "M_l": _nonneg, "sup_E_beta": _nonneg, "M_beta": _nonneg,
                "eta_slack": _nonneg, "beta_H": _nonneg,
                "kernel": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: _nonneg for k in ("sigma", "kappa", "E_kappa", "lam", "B")},
                },
                "sgd": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        **{k: _nonneg for k in ("L", "L_i", "L_z", "alpha", "c", "mu",
                                                "eta_schedule_sum")},
                        "T": _int1,
                    },
                },
            },
            "required": ["m", "delta"],
        },
        "sgd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["linear", "toy_exp"]},
                "T": {"type": "integer", "minimum": 0},
                "schedule": {"enum": ["constant", "inverse"]},
                "eta": _pos, "c": _pos, "alpha": _pos, "batch": _int1,
                "projection_radius": _pos, "l2": _nonneg,
                "trials": {"type": "integer", "minimum": 2},
                "removed_index": {"type": "integer", "minimum": 0},
                "probe_index": {"type": "integer", "minimum": 0},
                "envelope": {"enum": ["none", "convex", "strongly_convex"]},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "dataset": {"generator": "two_cluster", "d": 5, "m": 200, "K": 10, "per_class": 20,
                "spread": 0.5, "noise": 1.0, "test_m": 100, "test_per_class": 10},
    "model": {"family": "linear_ridge", "lam": 1e-2, "kernel": "bilinear", "gamma": 1.0,
              "p": 64, "k": 50, "epochs": 50, "lr": 1.0, "batch": 100, "tau": 0.1,
              "iters": 2000},
    "influence": {"damping": None, "solver": "cg", "cg_tol": 1e-10,
                  "hessian_method": "analytic"},
    "sensitivity": {"method": "influence", "n_train": 100, "n_test": 100, "eta_probe": 1e-6,
                    "fresh": True},
    "validate": {"sample": 100, "min_delta": 1e-12},
    "sgd": {"family": "linear", "T": 200, "schedule": "constant", "eta": 0.01, "c": 1.0,
            "batch": 1, "l2": 0.0, "trials": 100, "removed_index": 0, "envelope": "none"},
}

CONFIG_ERRORS = (InvalidArgument, jsonschema.ValidationError, json.JSONDecodeError, OSError)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate(obj: dict) -> None:
    try:
        jsonschema.validate(obj, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidArgument(f"config error at {where}: {exc.message}") from None


def load_config(source=None, **overrides) -> dict:
    """Validate a config (path, dict or None) and fill defaults.

    ``overrides`` with value None are ignored.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidArgument(f"config is not valid JSON: {exc}") from None
        except OSError as exc:
            raise InvalidArgument(f"cannot read config: {exc}") from None
    if not isinstance(raw, dict):
        raise InvalidArgument("config must be a JSON object")
    for k, v in overrides.items():
        if v is not None:
            raw[k] = v
    validate(raw)
    return _merge(DEFAULTS, raw)

"""Versioned YAML run configuration.

Every section is validated against a JSON schema with
``additionalProperties: false`` so a misspelled key fails loudly, and
defaults are filled in after validation.  Error messages name the offending
field by its dotted path.
"""

from __future__ import annotations

import copy
from pathlib import Path

import jsonschema
import yaml

from .lattice import critical_beta

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_NUM = {"type": "number"}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_BETA = {"anyOf": [{"type": "number", "minimum": 0}, {"const": "critical"}]}
_EXTENTS = {"type": "array", "items": _POS_INT, "minItems": 1, "maxItems": 3}


def _section(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _section({
    "schema_version": {"const": SCHEMA_VERSION},
    "seed": _NONNEG_INT,
    "model": _section({
        "d": {"enum": [2, 3]},
        "a": _POS_NUM,
        "beta": _BETA,
        "h": {"type": "number", "minimum": 0},
        "eta": {"type": ["number", "null"]},
    }),
    "lattice": _section({
        "extents": _EXTENTS,
        "bc": {"enum": ["periodic", "free", "plus"]},
    }),
    "simulate": _section({
        "sampler": {"enum": ["metropolis", "heat_bath", "wolff", "compound"]},
        "cluster_steps": _POS_INT,
        "therm_sweeps": _NONNEG_INT,
        "n_measure": _POS_INT,
        "stride": _POS_INT,
        "n_chains": _POS_INT,
        "L_list": {"type": "array", "items": _POS_NUM},
        "s_values": {"type": "array", "items": _NUM, "minItems": 1},
        "newman_stride": _POS_INT,
        "profile_max_sep": _NONNEG_INT,
        "checkpoint_every": _NONNEG_INT,
    }),
    "enumerate": _section({
        "extents": _EXTENTS,
        "bc": {"enum": ["periodic", "free", "plus"]},
        "L": _POS_NUM,
        "strip_width": {"type": "integer", "minimum": 1, "maximum": 8},
        "strip_length": {"type": "integer", "minimum": 1, "maximum": 4096},
    }),
    "verify": _section({
        "extents_list": {"type": "array", "items": _EXTENTS, "minItems": 1},
        "bc_list": {"type": "array", "items": {"enum": ["periodic", "free", "plus"]}, "minItems": 1},
        "beta_list": {"type": "array", "items": _BETA, "minItems": 1},
        "h_lat_list": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "ghs_grid": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3},
        "tol": _POS_NUM,
    }),
    "analyze": _section({
        "n_blocks": {"type": "integer", "minimum": 2},
        "max_t": _POS_INT,
        "eps_grid": {"type": "array", "items": _POS_NUM, "minItems": 2},
        "wu_window": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
        "cf": {"type": "boolean"},
    }),
    "fit": _section({
        "source": {"enum": ["analyze", "synthetic"]},
        "n_terms": {"enum": [1, 2, 3]},
        "constraint_mode": {"enum": ["none", "ordered", "e8_window"]},
        "n_bootstrap": _NONNEG_INT,
        "t_min": {"type": ["number", "null"], "minimum": 0},
        "t_max": {"type": ["number", "null"], "minimum": 0},
        "mass_grid": _section({"start": _POS_NUM, "stop": _POS_NUM, "step": _POS_NUM},
                              required=("start", "stop", "step")),
        "lam": {"type": ["number", "null"], "minimum": 0},
    }),
    "report": _section({"title": {"type": "string"}}),
}, required=("schema_version", "seed"))

DEFAULTS = {
    "model": {"d": 2, "a": 1.0, "beta": "critical", "h": 0.0, "eta": None},
    "lattice": {"extents": [16, 16], "bc": "periodic"},
    "simulate": {"sampler": "compound", "cluster_steps": 1, "therm_sweeps": 200, "n_measure": 1000, "stride": 1,
                 "n_chains": 1, "L_list": [], "s_values": [0], "newman_stride": 16, "profile_max_sep": 0,
                 "checkpoint_every": 0},
    "enumerate": {"extents": [3, 3], "bc": "periodic", "L": 1.0, "strip_width": None, "strip_length": 64},
    "verify": {"extents_list": [[4, 4], [3, 3]], "bc_list": ["periodic", "free"],
               "beta_list": [0.2, "critical", 0.7], "h_lat_list": [0.0, 0.1, 0.5],
               "ghs_grid": [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0], "tol": 1e-12},
    "analyze": {"n_blocks": 50, "max_t": 40, "eps_grid": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10], "wu_window": [4, 32],
                "cf": True},
    "fit": {"source": "analyze", "n_terms": 1, "constraint_mode": "ordered", "n_bootstrap": 200, "t_min": None,
            "t_max": None, "mass_grid": None, "lam": None},
    "report": {"title": "Line observable study"},
}


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate(doc) -> dict:
    """Validate a parsed config and return a copy with defaults filled in."""
    if not isinstance(doc, dict):
        raise ConfigError("<root>: config must be a mapping")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            if e.validator == "additionalProperties":
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                for k in extra:
                    where = _path(e)
                    lines.append(f"{k if where == '<root>' else where + '.' + k}: unknown key")
            else:
                lines.append(f"{_path(e)}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    cfg = copy.deepcopy(doc)
    for section, defaults in DEFAULTS.items():
        merged = copy.deepcopy(defaults)
        merged.update(cfg.get(section) or {})
        cfg[section] = merged
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg):
    m = cfg["model"]
    if m["d"] == 2 and m["eta"] not in (None, 0.25):
        raise ConfigError(f"model.eta: fixed to 0.25 in d=2, got {m['eta']}")
    if m["d"] == 3:
        if m["eta"] is None:
            raise ConfigError("model.eta: required for d=3")
        if m["beta"] == "critical":
            raise ConfigError("model.beta: no built-in critical value for d=3")
    if len(cfg["lattice"]["extents"]) != m["d"]:
        raise ConfigError(f"lattice.extents: expected {m['d']} entries for d={m['d']}")
    mg = cfg["fit"]["mass_grid"]
    if mg is not None and mg["stop"] <= mg["start"]:
        raise ConfigError("fit.mass_grid.stop: must exceed start")


def load(path) -> dict:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return validate(doc)


def resolve_beta(value, d: int = 2) -> float:
    return critical_beta(d) if value == "critical" else float(value)

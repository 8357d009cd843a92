"""JSON run configuration: loading, validation, model construction.

A run document names a model and optional sections:

    {"model": "pendulum",
     "model_params": {"eta_scale": 2.0},
     "solve": {"h_s": 0.005, "max_outer": 50},
     "simulate": {"trials": 10000, "dt_s": 0.001, "seed": 0, "clamp": false},
     "sweep": {"target": "eta", "scales": [0.2, 0.5, 1, 2, 5]}}

Durations carry unit-tagged keys (h_s, dt_s); model parameters accept
both plain dataclass field names and the unit-tagged names their
to_config() emits (e.g. rho_p_s).  Precedence when running from the
command line: built-in defaults, then the file, then explicit flags.
"""

import json

from .errors import ValidationError
from .models.registry import build_model, model_registry
from .solver import SolverConfig

__all__ = ["load_config", "validate_config", "problem_from_config",
           "solver_config_from", "SOLVE_DEFAULTS", "SIM_DEFAULTS",
           "SWEEP_DEFAULTS"]

SOLVE_DEFAULTS = {
    "h_s": 0.002,
    "N": None,
    "guess": "hold",
    "max_outer": 50,
    "max_inner": 200,
    "tol_constraint": 1e-6,
    "tol_optimality": 1e-5,
    "penalty": 10.0,
    "penalty_growth": 10.0,
    "fd_step": 1e-6,
    "derivative_mode": "model_jacobian_composed",
}

SIM_DEFAULTS = {
    "trials": 10000,
    "dt_s": 0.001,
    "seed": 0,
    "clamp": False,
    "keep_paths": 8,
}

SWEEP_DEFAULTS = {
    "target": "eta",
    "scales": [0.2, 0.5, 1.0, 2.0, 5.0],
    "trials": 256,
    "seed": 0,
}


def load_config(path):
    """Parse a JSON run document; shape errors name the offending key."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must be a JSON object")
    return validate_config(doc)


def validate_config(doc):
    """Fill defaults and reject unknown sections/keys."""
    known = {"model", "model_params", "solve", "simulate", "sweep"}
    extra = set(doc) - known
    if extra:
        raise ValidationError(
            f"unknown config sections {sorted(extra)}; expected {sorted(known)}")
    if "model" not in doc:
        raise ValidationError("config missing required key 'model'")
    out = {"model": doc["model"],
           "model_params": dict(doc.get("model_params", {}))}
    for section, defaults in (("solve", SOLVE_DEFAULTS),
                              ("simulate", SIM_DEFAULTS),
                              ("sweep", SWEEP_DEFAULTS)):
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ValidationError(f"config section {section!r} must be an object")
        bad = set(given) - set(defaults)
        if bad:
            raise ValidationError(
                f"unknown {section} keys {sorted(bad)}; "
                f"expected among {sorted(defaults)} (durations are "
                f"unit-tagged, e.g. 'h_s')")
        merged = dict(defaults)
        merged.update(given)
        out[section] = merged
    return out


def _param_fields(model):
    if model == "pendulum":
        from .models.pendulum import PendulumParams
        return set(PendulumParams.__dataclass_fields__)
    if model == "arm2dof":
        from .models.arm import Arm2DofParams
        return {"eta_preset", "beta"} | set(Arm2DofParams.__dataclass_fields__)
    return None


def _normalize_params(model, params):
    """Map unit-tagged keys back to builder argument names."""
    fields = _param_fields(model)
    if fields is None:
        return dict(params)
    out = {}
    for key, val in params.items():
        if key == "model":
            continue
        if key in fields:
            out[key] = val
            continue
        hits = [f for f in fields
                if key.startswith(f + "_") and len(key) > len(f) + 1]
        if len(hits) == 1:
            out[hits[0]] = val
        elif len(hits) > 1:
            # prefer the longest field name (k_s_Nm_rad -> k_s, not k)
            out[max(hits, key=len)] = val
        else:
            raise ValidationError(
                f"unknown model parameter {key!r} for {model!r}")
    return out


def problem_from_config(doc):
    model = doc["model"]
    if model not in model_registry():
        raise ValidationError(
            f"unknown model {model!r}; run the models subcommand for the list")
    params = _normalize_params(model, doc.get("model_params", {}))
    try:
        return build_model(model, **params)
    except TypeError as exc:
        raise ValidationError(str(exc))


def solver_config_from(doc, trace_path=""):
    s = doc["solve"]
    return SolverConfig(
        max_outer=int(s["max_outer"]), max_inner=int(s["max_inner"]),
        tol_constraint=float(s["tol_constraint"]),
        tol_optimality=float(s["tol_optimality"]),
        penalty=float(s["penalty"]),
        penalty_growth=float(s["penalty_growth"]),
        fd_step=float(s["fd_step"]),
        derivative_mode=s["derivative_mode"],
        trace_path=trace_path)

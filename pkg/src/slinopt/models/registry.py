"""Name -> builder map for the bundled models."""

from .linear import builtin_linear_instances, linear_problem
from .pendulum import PendulumParams, pendulum_problem, SWEEP_SCALES
from .arm import arm2dof_problem, ETA_PRESETS

__all__ = ["model_registry", "build_model"]


def _build_linear(name):
    def build(**kwargs):
        if kwargs:
            raise TypeError(f"linear instance {name!r} takes no parameters")
        return linear_problem(builtin_linear_instances()[name])
    return build


def _build_pendulum(**kwargs):
    return pendulum_problem(PendulumParams(**kwargs))


def _build_arm(**kwargs):
    return arm2dof_problem(**kwargs)


def model_registry():
    """Available model names with builder, summary, and parameter hints."""
    reg = {}
    for name, params in builtin_linear_instances().items():
        reg[name] = {
            "build": _build_linear(name),
            "summary": f"linear-gaussian test instance ({params.A.shape[0]} states, "
                       f"{params.B.shape[1]} inputs)",
            "parameters": {},
        }
    reg["pendulum"] = {
        "build": _build_pendulum,
        "summary": "inverted pendulum with two antagonist inputs and two "
                   "delayed position channels (4 states)",
        "parameters": {
            "rho_scale": f"delay multiplier, one of {list(SWEEP_SCALES)}",
            "eta_scale": f"observation-noise multiplier, one of {list(SWEEP_SCALES)}",
        },
    }
    reg["arm2dof"] = {
        "build": _build_arm,
        "summary": "two-link arm with six muscles and two delayed "
                   "joint-position channels (12 states)",
        "parameters": {
            "eta_preset": f"observation-noise preset, one of {sorted(ETA_PRESETS)}",
            "beta": "divergent-field gain, N/m (0 disables)",
        },
    }
    return reg


def build_model(name, **kwargs):
    reg = model_registry()
    if name not in reg:
        raise KeyError(f"unknown model {name!r}; available: {sorted(reg)}")
    return reg[name]["build"](**kwargs)

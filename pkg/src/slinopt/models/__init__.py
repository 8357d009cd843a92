from .linear import LinearTestParams, linear_problem, builtin_linear_instances
from .pendulum import PendulumParams, pendulum_problem, SWEEP_SCALES
from .arm import (Arm2DofParams, arm2dof_problem, initial_activation,
                  min_jerk_reference)
from .registry import model_registry, build_model

__all__ = [
    "LinearTestParams", "linear_problem", "builtin_linear_instances",
    "PendulumParams", "pendulum_problem", "SWEEP_SCALES",
    "Arm2DofParams", "arm2dof_problem", "initial_activation",
    "min_jerk_reference", "model_registry", "build_model",
]

"""Inverted pendulum stabilized by an antagonist muscle pair.

A forearm-like link holds an unstable upright posture.  Two muscle inputs
in [0, 1] set both the net torque (through their difference) and the joint
viscoelasticity (through their sum), so co-contraction buys stiffness at a
quadratic effort cost.  The joint angle is sensed through two delayed,
noisy channels with different latencies and precisions (a fast imprecise
one and a slow precise one).

Angles are radians internally; observation-noise parameters are taken in
deg*sqrt(s) and converted.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from ..errors import ValidationError
from ..problem import QuadraticCost, StochasticControlProblem
from ..delays import coordinate_channel, augment_with_delays

__all__ = ["PendulumParams", "pendulum_problem", "SWEEP_SCALES"]

SWEEP_SCALES = (0.2, 0.5, 1.0, 2.0, 5.0)

DEG = math.pi / 180.0


@dataclass(frozen=True)
class PendulumParams:
    k_n: float = 40.0        # N m, torque per unit input
    k_s: float = 20.0        # N m / rad, stiffness per unit co-contraction
    k_d: float = 2.0         # N m s / rad, damping per unit co-contraction
    k_g: float = 10.754      # N m, gravity toppling torque coefficient
    k_s0: float = 1.0        # N m / rad, baseline stiffness
    k_d0: float = 0.1        # N m s / rad, baseline damping
    inertia: float = 0.337   # kg m^2
    sigma: float = 0.1       # rad / s^2 / sqrt(s), motor noise
    rho_p: float = 0.05      # s, fast-channel delay
    rho_v: float = 0.10      # s, slow-channel delay
    gamma_p: float = 0.01    # rad / sqrt(s), internal noise on fast channel
    gamma_v: float = 0.01    # rad / sqrt(s), internal noise on slow channel
    eta_p_deg: float = 5.0   # deg sqrt(s), fast-channel observation noise
    eta_v_deg: float = 1.0   # deg sqrt(s), slow-channel observation noise
    rho_scale: float = 1.0
    eta_scale: float = 1.0
    T: float = 5.0           # s

    def __post_init__(self):
        pos = ("k_n", "k_s", "k_d", "k_g", "k_s0", "k_d0", "inertia", "sigma",
               "rho_p", "rho_v", "gamma_p", "gamma_v", "eta_p_deg",
               "eta_v_deg", "T")
        for name in pos:
            if getattr(self, name) <= 0:
                raise ValidationError(f"PendulumParams.{name} must be positive")
        for name in ("rho_scale", "eta_scale"):
            val = getattr(self, name)
            if not any(abs(val - s) < 1e-12 for s in SWEEP_SCALES):
                raise ValidationError(
                    f"PendulumParams.{name}={val} not in the sweep set {SWEEP_SCALES}")

    def to_config(self):
        doc = {k + _UNIT_SUFFIX.get(k, ""): v for k, v in asdict(self).items()}
        doc["model"] = "pendulum"
        return doc


_UNIT_SUFFIX = {
    "k_n": "_Nm", "k_s": "_Nm_rad", "k_d": "_Nms_rad", "k_g": "_Nm",
    "k_s0": "_Nm_rad", "k_d0": "_Nms_rad", "inertia": "_kg_m2",
    "sigma": "_rad_s2_sqrt_s", "rho_p": "_s", "rho_v": "_s",
    "gamma_p": "_rad_sqrt_s", "gamma_v": "_rad_sqrt_s",
    "eta_p_deg": "_sqrt_s", "eta_v_deg": "_sqrt_s", "T": "_s",
}


def pendulum_problem(params=None):
    """Build the 4-state augmented stabilization problem."""
    par = params or PendulumParams()
    k_n, k_s, k_d = par.k_n, par.k_s, par.k_d
    k_g, k_s0, k_d0 = par.k_g, par.k_s0, par.k_d0
    inv_I = 1.0 / par.inertia

    def f(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        th, om = x[..., 0], x[..., 1]
        visc = k_s * th + k_d * om
        tau = (u[..., 0] - u[..., 1]) * k_n - (u[..., 0] + u[..., 1]) * visc
        acc = (tau + k_g * np.sin(th) - k_s0 * th - k_d0 * om) * inv_I
        return np.stack([om, acc], axis=-1)

    def f_jac_x(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        th = x[..., 0]
        usum = u[..., 0] + u[..., 1]
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = (-usum * k_s + k_g * np.cos(th) - k_s0) * inv_I
        out[..., 1, 1] = (-usum * k_d - k_d0) * inv_I
        return out

    def f_jac_u(t, x, u):
        x = np.asarray(x, dtype=float)
        th, om = x[..., 0], x[..., 1]
        visc = k_s * th + k_d * om
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 1, 0] = (k_n - visc) * inv_I
        out[..., 1, 1] = -(k_n + visc) * inv_I
        return out

    def G(t, x, u):
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = par.sigma
        return out

    plant_cost = QuadraticCost.build(2, 2, Q=np.diag([10.0, 1.0]), R=np.eye(2))
    plant = StochasticControlProblem(
        n=2, m=2, k=1, p=0,
        f=f, f_jac_x=f_jac_x, f_jac_u=f_jac_u, G=G,
        g=None, g_jac_x=None, H=None,
        cost=plant_cost, T=par.T,
        x0_mean=np.zeros(2), x0_cov=1e-6 * np.eye(2),
        u_bounds=(np.zeros(2), np.ones(2)),
        model_info={"kind": "pendulum", "config": par.to_config()},
        name="pendulum")

    channels = [
        coordinate_channel(0, par.rho_p * par.rho_scale, par.gamma_p,
                           par.eta_p_deg * par.eta_scale * DEG, name="fast"),
        coordinate_channel(0, par.rho_v * par.rho_scale, par.gamma_v,
                           par.eta_v_deg * par.eta_scale * DEG, name="slow"),
    ]
    prob = augment_with_delays(plant, channels,
                               x0_mean=np.zeros(4), x0_cov=1e-6 * np.eye(4))
    prob.name = "pendulum"
    prob.model_info.update({
        "kind": "pendulum",
        "k_s": k_s,
        "k_n": k_n,
        "antagonist_pairs": [(0, 1)],
        "gain_entry": (0, 0),
        "hold_u": np.array([0.05, 0.05]),
        "params": par,
    })
    return prob

"""Two-link planar arm driven by six viscoelastic muscles.

Plant state s = (q1, q2, qd1, qd2, a1..a6): shoulder/elbow angles,
velocities, muscle activations.  Muscle inputs u in [0, 1]^6 pass through
first-order activation dynamics; activations modulate muscle stiffness,
viscosity, and rest length, so co-contraction stiffens the joints.
Delayed joint-position channels add two states (n = 12).  An optional
divergent force field pushes the endpoint along the lateral axis.

Numeric parameter values load from data/arm2dof_params_v1.json (each block
carries a source tag).  Angles in radians, lengths in meters.
"""

import json
import math
from dataclasses import dataclass, field, asdict, replace
from importlib import resources

import numpy as np
from scipy.optimize import minimize

from ..errors import ValidationError, NumericalError
from ..problem import QuadraticCost, StochasticControlProblem
from ..delays import coordinate_channel, augment_with_delays

__all__ = ["Arm2DofParams", "arm2dof_problem", "initial_activation",
           "min_jerk_reference", "lateral_endpoint_stiffness",
           "ETA_PRESETS"]

DEG = math.pi / 180.0

# observation-noise presets, deg*sqrt(s); the two no-vision variants differ
# by a factor of ten and both stay available (callers pick one explicitly)
ETA_PRESETS = {
    "vision": 0.05,
    "novision_0_5": 0.5,
    "novision_5_0": 5.0,
}


def _load_data():
    with resources.files("slinopt.models.data").joinpath(
            "arm2dof_params_v1.json").open() as fh:
        return json.load(fh)


@dataclass(frozen=True)
class Arm2DofParams:
    # links
    m1: float
    m2: float
    l1: float
    l2: float
    lc1: float
    lc2: float
    I1: float
    I2: float
    # muscles (arrays of 6, already strength-scaled)
    k: np.ndarray
    k0: np.ndarray
    b: np.ndarray
    b0: np.ndarray
    rest_shortening: np.ndarray     # r, m per unit activation (negative)
    moment_arms: np.ndarray         # (6, 2), signed
    rest_tone: float
    # actuation, noise, sensing
    gamma_act: float = 0.06         # s, muscle response time
    sigma_a: float = 0.025          # a.u. / sqrt(s), additive motor noise
    sigma_m: float = 0.005          # 1 / sqrt(s), multiplicative motor noise
    omega: float = 0.01             # rad / sqrt(s), channel internal noise
    rho: float = 0.10               # s, joint-position feedback delay
    eta_deg: float = 0.05           # deg sqrt(s), observation noise
    eta_preset: str = "vision"
    beta: float = 0.0               # N/m, divergent-field gain
    # task
    hand_start: np.ndarray = None
    hand_target: np.ndarray = None
    T: float = 0.75

    def __post_init__(self):
        for name in ("k", "k0", "b", "b0", "rest_shortening"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (6,):
                raise ValidationError(f"Arm2DofParams.{name} must have 6 entries")
            object.__setattr__(self, name, arr)
        ma = np.asarray(self.moment_arms, dtype=float)
        if ma.shape != (6, 2):
            raise ValidationError("moment_arms must be (6, 2)")
        if np.any(ma[:2, 1] != 0.0) or np.any(ma[2:4, 0] != 0.0):
            raise ValidationError("monoarticular muscles must have one zero moment arm")
        object.__setattr__(self, "moment_arms", ma)
        for name in ("hand_start", "hand_target"):
            v = getattr(self, name)
            object.__setattr__(self, name, np.asarray(v, dtype=float))
        if np.any(self.k <= 0) or np.any(self.k0 <= 0):
            raise ValidationError("muscle elasticities must be positive")
        if np.any(self.b <= 0) or np.any(self.b0 <= 0):
            raise ValidationError("muscle viscosities must be positive")
        if np.any(self.rest_shortening >= 0):
            raise ValidationError("rest_shortening must be negative (activation shortens)")
        if self.gamma_act <= 0 or self.rho <= 0 or self.eta_deg <= 0:
            raise ValidationError("time constants and noise levels must be positive")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")

    @classmethod
    def from_data(cls, eta_preset="vision", beta=0.0, **overrides):
        data = _load_data()
        lk, mu, task = data["links"], data["muscles"], data["task"]
        scale = mu["strength_scale"]
        if eta_preset not in ETA_PRESETS:
            raise ValidationError(
                f"unknown eta preset {eta_preset!r}; choose from {sorted(ETA_PRESETS)}")
        kwargs = dict(
            m1=lk["m1_kg"], m2=lk["m2_kg"], l1=lk["l1_m"], l2=lk["l2_m"],
            lc1=lk["lc1_m"], lc2=lk["lc2_m"], I1=lk["I1_kg_m2"], I2=lk["I2_kg_m2"],
            k=scale * np.array(mu["k_N_m"]), k0=scale * np.array(mu["k0_N_m"]),
            b=scale * np.array(mu["b_Ns_m"]), b0=scale * np.array(mu["b0_Ns_m"]),
            rest_shortening=np.array(mu["rest_shortening_m"]),
            moment_arms=np.stack([np.array(mu["moment_arm_shoulder_m"]),
                                  np.array(mu["moment_arm_elbow_m"])], axis=1),
            rest_tone=mu["rest_tone"],
            eta_deg=ETA_PRESETS[eta_preset], eta_preset=eta_preset, beta=beta,
            hand_start=np.array(task["hand_start_m"]),
            hand_target=np.array(task["hand_target_m"]),
            T=task["duration_s"])
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_config(self):
        doc = {}
        for key, val in asdict(self).items():
            if isinstance(val, np.ndarray):
                doc[key] = val.tolist()
            else:
                doc[key] = val
        doc["model"] = "arm2dof"
        return doc


# ---------------------------------------------------------------- kinematics

def forward_kinematics(par, q):
    q = np.asarray(q, dtype=float)
    q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
    x = par.l1 * np.cos(q1) + par.l2 * np.cos(q12)
    y = par.l1 * np.sin(q1) + par.l2 * np.sin(q12)
    return np.stack([x, y], axis=-1)


def endpoint_jacobian(par, q):
    q = np.asarray(q, dtype=float)
    q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
    s1, s12 = np.sin(q1), np.sin(q12)
    c1, c12 = np.cos(q1), np.cos(q12)
    J = np.empty(q.shape[:-1] + (2, 2))
    J[..., 0, 0] = -par.l1 * s1 - par.l2 * s12
    J[..., 0, 1] = -par.l2 * s12
    J[..., 1, 0] = par.l1 * c1 + par.l2 * c12
    J[..., 1, 1] = par.l2 * c12
    return J


def inverse_kinematics(par, pos):
    """Joint angles reaching `pos`, elbow-flexed branch (q2 > 0)."""
    pos = np.asarray(pos, dtype=float)
    x, y = pos[..., 0], pos[..., 1]
    d2 = x * x + y * y
    c2 = (d2 - par.l1 ** 2 - par.l2 ** 2) / (2.0 * par.l1 * par.l2)
    if np.any(np.abs(c2) > 1.0 - 1e-12):
        raise ValidationError("endpoint outside the reachable workspace")
    q2 = np.arccos(c2)
    q1 = np.arctan2(y, x) - np.arctan2(par.l2 * np.sin(q2),
                                       par.l1 + par.l2 * np.cos(q2))
    return np.stack([q1, q2], axis=-1)


def min_jerk_reference(par, t):
    """Reference joint positions/velocities for a straight min-jerk reach.

    Returns (q_r, qd_r) with shapes (..., 2).  The scalar profile
    s(tau) = 10 tau^3 - 15 tau^4 + 6 tau^5 starts and ends at rest.
    """
    t = np.asarray(t, dtype=float)
    tau = np.clip(t / par.T, 0.0, 1.0)
    s = ((6.0 * tau - 15.0) * tau + 10.0) * tau ** 3
    ds = (30.0 * tau ** 2 * (tau - 1.0) ** 2) / par.T
    delta = par.hand_target - par.hand_start
    pos = par.hand_start + np.multiply.outer(s, delta)
    vel = np.multiply.outer(ds, delta)
    q = inverse_kinematics(par, pos)
    J = endpoint_jacobian(par, q)
    qd = np.linalg.solve(J, vel[..., None])[..., 0]
    return q, qd


# ------------------------------------------------------------------ dynamics

def mass_matrix(par, q):
    a1 = par.I1 + par.I2 + par.m2 * par.l1 ** 2
    a2 = par.m2 * par.l1 * par.lc2
    a3 = par.I2
    c2 = np.cos(np.asarray(q, dtype=float)[..., 1])
    M = np.empty(np.shape(c2) + (2, 2))
    M[..., 0, 0] = a1 + 2.0 * a2 * c2
    M[..., 0, 1] = a3 + a2 * c2
    M[..., 1, 0] = a3 + a2 * c2
    M[..., 1, 1] = a3
    return M


def coriolis_torque(par, q, qd):
    a2 = par.m2 * par.l1 * par.lc2
    s2 = np.sin(np.asarray(q, dtype=float)[..., 1])
    qd1, qd2 = qd[..., 0], qd[..., 1]
    out = np.empty(np.shape(s2) + (2,))
    out[..., 0] = -a2 * s2 * qd2 * (2.0 * qd1 + qd2)
    out[..., 1] = a2 * s2 * qd1 * qd1
    return out


def _rest_offset(par):
    """d0 = l0 - l_at_zero, set so that at the start posture each muscle is
    exactly at rest length when activated at rest_tone."""
    q0 = inverse_kinematics(par, par.hand_start)
    return -(par.moment_arms @ q0) - par.rest_tone * par.rest_shortening


def muscle_force(par, q, qd, a, d0):
    """Displacement force of each muscle (negative when pulling)."""
    stretch = d0 + par.rest_shortening * a + np.einsum(
        "ij,...j->...i", par.moment_arms, q)
    rate = np.einsum("ij,...j->...i", par.moment_arms, qd)
    return (par.k0 + par.k * a) * stretch + (par.b0 + par.b * a) * rate


def muscle_torque(par, q, qd, a, d0):
    f = muscle_force(par, q, qd, a, d0)
    return -np.einsum("ji,...j->...i", par.moment_arms, f)


def field_torque(par, q):
    """External torque of the lateral divergent field, J^T (beta x, 0)."""
    if par.beta == 0.0:
        return np.zeros(np.asarray(q).shape)
    pos = forward_kinematics(par, q)
    J = endpoint_jacobian(par, q)
    return par.beta * pos[..., 0, None] * J[..., 0, :]


def joint_stiffness(par, a):
    """MA^T diag(k0 + k a) MA, the activation-dependent joint stiffness."""
    ka = par.k0 + par.k * np.asarray(a, dtype=float)
    return np.einsum("ji,...j,jl->...il", par.moment_arms, ka, par.moment_arms)


def lateral_endpoint_stiffness(par, q, a):
    """(x,x) entry of the endpoint stiffness J^-T K_joint J^-1."""
    Kj = joint_stiffness(par, a)
    J = endpoint_jacobian(par, q)
    Ji = np.linalg.inv(J)
    S = np.swapaxes(Ji, -1, -2) @ Kj @ Ji
    return S[..., 0, 0]


def initial_activation(par, q0=None):
    """Smallest-norm activations holding q0 at zero net muscle torque.

    Solves min sum(a_i^2) s.t. tau_m(q0, 0, a) = 0, 0 <= a <= 1, and
    verifies feasibility to 1e-8.
    """
    if q0 is None:
        q0 = inverse_kinematics(par, par.hand_start)
    d0 = _rest_offset(par)

    def torque(a):
        return muscle_torque(par, q0, np.zeros(2), a, d0)

    def torque_jac(a):
        # d f_i / d a_i = k_i stretch_i + (k0 + k a)_i r_i at qd = 0
        stretch = d0 + par.rest_shortening * a + par.moment_arms @ q0
        df = par.k * stretch + (par.k0 + par.k * a) * par.rest_shortening
        return -(par.moment_arms.T * df)

    res = minimize(
        lambda a: float(a @ a), x0=np.full(6, par.rest_tone),
        jac=lambda a: 2.0 * a, method="SLSQP",
        bounds=[(0.0, 1.0)] * 6,
        constraints=[{"type": "eq", "fun": torque, "jac": torque_jac}],
        options={"maxiter": 200, "ftol": 1e-14})
    a0 = np.clip(res.x, 0.0, 1.0)
    resid = np.max(np.abs(torque(a0)))
    if not res.success or resid > 1e-8:
        raise NumericalError(
            f"initial activation solve failed (torque residual {resid:.2e})",
            where="initial_activation")
    return a0


def arm2dof_problem(params=None, eta_preset="vision", beta=0.0):
    """Build the 12-state reaching problem.

    `params` overrides the data-file values; otherwise eta_preset picks the
    observation-noise level and beta the divergent-field gain.
    """
    par = params or Arm2DofParams.from_data(eta_preset=eta_preset, beta=beta)
    d0 = _rest_offset(par)
    q0 = inverse_kinematics(par, par.hand_start)
    qf = inverse_kinematics(par, par.hand_target)
    a0 = initial_activation(par, q0)
    inv_gamma = 1.0 / par.gamma_act
    a2c = par.m2 * par.l1 * par.lc2

    def split(x):
        x = np.asarray(x, dtype=float)
        return x[..., 0:2], x[..., 2:4], x[..., 4:10]

    def accel(q, qd, a):
        tau = muscle_torque(par, q, qd, a, d0) + field_torque(par, q)
        tau = tau - coriolis_torque(par, q, qd)
        M = mass_matrix(par, q)
        return np.linalg.solve(M, tau[..., None])[..., 0]

    def f(t, x, u):
        q, qd, a = split(x)
        u = np.asarray(u, dtype=float)
        return np.concatenate(
            [qd, accel(q, qd, a), (u - a) * inv_gamma], axis=-1)

    def f_jac_x(t, x, u):
        q, qd, a = split(x)
        batch = q.shape[:-1]
        M = mass_matrix(par, q)
        Minv = np.linalg.inv(M)
        qdd = accel(q, qd, a)

        # torque partials
        Kj = joint_stiffness(par, a)                       # -d tau_m/d q
        Bj = np.einsum("ji,...j,jl->...il", par.moment_arms,
                       par.b0 + par.b * a, par.moment_arms)
        stretch = d0 + par.rest_shortening * a + np.einsum(
            "ij,...j->...i", par.moment_arms, q)
        rate = np.einsum("ij,...j->...i", par.moment_arms, qd)
        dfa = par.k * stretch + (par.k0 + par.k * a) * par.rest_shortening \
            + par.b * rate
        dtau_da = -np.einsum("ji,...j->...ij", par.moment_arms, dfa)

        # field torque partials
        if par.beta != 0.0:
            pos = forward_kinematics(par, q)
            J = endpoint_jacobian(par, q)
            px = pos[..., 0]
            Jx = J[..., 0, :]
            # d(Jx)/dq: row of second derivatives of the endpoint x-coordinate
            q1, q12 = q[..., 0], q[..., 0] + q[..., 1]
            c1, c12 = np.cos(q1), np.cos(q12)
            d2x = np.empty(batch + (2, 2))
            d2x[..., 0, 0] = -par.l1 * c1 - par.l2 * c12
            d2x[..., 0, 1] = -par.l2 * c12
            d2x[..., 1, 0] = -par.l2 * c12
            d2x[..., 1, 1] = -par.l2 * c12
            dtau_e = par.beta * (np.einsum("...i,...j->...ij", Jx, Jx)
                                 + px[..., None, None] * d2x)
        else:
            dtau_e = 0.0

        # coriolis partials
        s2, c2 = np.sin(q[..., 1]), np.cos(q[..., 1])
        qd1, qd2 = qd[..., 0], qd[..., 1]
        dcor_dq = np.zeros(batch + (2, 2))
        dcor_dq[..., 0, 1] = -a2c * c2 * qd2 * (2.0 * qd1 + qd2)
        dcor_dq[..., 1, 1] = a2c * c2 * qd1 * qd1
        dcor_dqd = np.empty(batch + (2, 2))
        dcor_dqd[..., 0, 0] = -2.0 * a2c * s2 * qd2
        dcor_dqd[..., 0, 1] = -2.0 * a2c * s2 * (qd1 + qd2)
        dcor_dqd[..., 1, 0] = 2.0 * a2c * s2 * qd1
        dcor_dqd[..., 1, 1] = 0.0

        # dM/dq2 contribution: d(M^-1 v)/dq = M^-1 (dv/dq - dM/dq qdd)
        dM_dq2 = np.zeros(batch + (2, 2))
        dM_dq2[..., 0, 0] = -2.0 * a2c * s2
        dM_dq2[..., 0, 1] = -a2c * s2
        dM_dq2[..., 1, 0] = -a2c * s2
        dM_times_qdd = np.einsum("...ij,...j->...i", dM_dq2, qdd)

        dv_dq = -Kj + dtau_e - dcor_dq
        dv_dq = np.array(np.broadcast_to(dv_dq, batch + (2, 2)), copy=True)
        dv_dq[..., :, 1] -= dM_times_qdd
        dacc_dq = np.einsum("...ij,...jk->...ik", Minv, dv_dq)
        dacc_dqd = np.einsum("...ij,...jk->...ik", Minv, -Bj - dcor_dqd)
        dacc_da = np.einsum("...ij,...jk->...ik", Minv, dtau_da)

        out = np.zeros(batch + (10, 10))
        out[..., 0:2, 2:4] = np.eye(2)
        out[..., 2:4, 0:2] = dacc_dq
        out[..., 2:4, 2:4] = dacc_dqd
        out[..., 2:4, 4:10] = dacc_da
        idx = np.arange(6)
        out[..., 4 + idx, 4 + idx] = -inv_gamma
        return out

    def f_jac_u(t, x, u):
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (10, 6))
        idx = np.arange(6)
        out[..., 4 + idx, idx] = inv_gamma
        return out

    def G(t, x, u):
        q, qd, a = split(x)
        out = np.zeros(a.shape[:-1] + (10, 6))
        idx = np.arange(6)
        out[..., 4 + idx, idx] = par.sigma_a + par.sigma_m * a
        return out

    plant_cost = QuadraticCost.build(10, 6, R=np.eye(6))
    plant = StochasticControlProblem(
        n=10, m=6, k=6, p=0,
        f=f, f_jac_x=f_jac_x, f_jac_u=f_jac_u, G=G,
        g=None, g_jac_x=None, H=None,
        cost=plant_cost, T=par.T,
        x0_mean=np.concatenate([q0, np.zeros(2), a0]),
        x0_cov=1e-6 * np.eye(10),
        u_bounds=(np.zeros(6), np.ones(6)),
        model_info={"kind": "arm2dof", "config": par.to_config()},
        name="arm2dof")

    channels = [
        coordinate_channel(0, par.rho, par.omega, par.eta_deg * DEG, name="shoulder"),
        coordinate_channel(1, par.rho, par.omega, par.eta_deg * DEG, name="elbow"),
    ]
    x0_mean = np.concatenate([plant.x0_mean, q0])
    prob = augment_with_delays(plant, channels,
                               x0_mean=x0_mean, x0_cov=1e-6 * np.eye(12))
    prob.name = "arm2dof"

    # tracking cost on the augmented state
    Qdiag = np.array([1e4, 1e4, 1e2, 1e2, 1, 1, 1, 1, 1, 1, 1, 1])
    Qpsi = np.array([1e4, 1e4, 1e2, 1e2, 0, 0, 0, 0, 0, 0, 0, 0])

    def x_ref(t):
        qr, qdr = min_jerk_reference(par, t)
        zeros = np.zeros(np.shape(np.asarray(t)) + (8,))
        return np.concatenate([qr, qdr, zeros], axis=-1)

    x_ref_T = np.concatenate([qf, np.zeros(10)])
    prob.cost = QuadraticCost.build(
        12, 6, Q=np.diag(Qdiag), R=np.eye(6), Q_T=np.diag(Qpsi),
        x_ref=x_ref, x_ref_T=x_ref_T)

    # hard terminal constraints on the mean: q(T), qd(T), z(T); a(T) free
    prob.terminal_mean_idx = np.array([0, 1, 2, 3, 10, 11])
    prob.terminal_mean_val = np.concatenate([qf, np.zeros(2), qf])
    prob.state_clamp = (np.arange(4, 10), 0.0, 1.0)
    prob.model_info.update({
        "kind": "arm2dof",
        "antagonist_pairs": [(0, 1), (2, 3), (4, 5)],
        "hold_u": a0.copy(),
        "params": par,
        "q0": q0, "qf": qf, "a0": a0, "d0": d0,
    })
    return prob

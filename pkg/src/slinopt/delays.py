"""Sensor-delay augmentation.

A delayed, noisy readout of a smooth scalar feature gtilde(s) of the plant
state is modeled by an auxiliary state per channel,

    dz_i = (gtilde_i(s) - z_i) / delta_i dt + gamma_i dw_i,
    z_i(0) = gtilde_i(s_0),

and the observation becomes dy = z dt + diag(eta) dv.  augment_with_delays
rewrites a plant (no observation model needed) into the augmented problem
on x = (s, z) with block-diagonal diffusion.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .problem import QuadraticCost, StochasticControlProblem

__all__ = ["DelayChannel", "coordinate_channel", "augment_with_delays"]


@dataclass(frozen=True)
class DelayChannel:
    """One delayed scalar readout: selector, its Jacobian, and noise sizes."""

    select: object          # (..., ns) -> (...,)
    select_jac: object      # (..., ns) -> (..., ns)
    delay: float            # seconds
    internal_noise: float   # diffusion on the auxiliary state, per sqrt(s)
    obs_noise: float        # observation noise intensity, per sqrt(s)
    name: str = ""

    def __post_init__(self):
        if self.delay <= 0:
            raise ValidationError(f"channel {self.name!r}: delay must be positive")
        if self.internal_noise < 0 or self.obs_noise <= 0:
            raise ValidationError(
                f"channel {self.name!r}: need internal_noise >= 0 and obs_noise > 0")


def coordinate_channel(index, delay, internal_noise, obs_noise, name=""):
    """Channel reading one plant state coordinate."""
    index = int(index)

    def select(s):
        return np.asarray(s)[..., index]

    def select_jac(s):
        s = np.asarray(s)
        out = np.zeros_like(s)
        out[..., index] = 1.0
        return out

    return DelayChannel(select, select_jac, delay, internal_noise, obs_noise,
                        name or f"state[{index}]")


def augment_with_delays(plant, channels, x0_mean=None, x0_cov=None):
    """Augment a plant with first-order delayed observation channels.

    `plant` is a StochasticControlProblem whose g/g_jac_x/H are ignored
    (the channels define the observation).  Its cost is zero-padded onto
    the augmented state; callers that weight the auxiliary states replace
    the cost afterwards.  If x0_mean/x0_cov are not given, the auxiliary
    initial condition is z = gtilde(s0) propagated to first order.
    """
    channels = list(channels)
    if not channels:
        raise ValidationError("need at least one delay channel")
    ns, ks, m_in = plant.n, plant.k, plant.m
    p = len(channels)
    n = ns + p
    k = ks + p
    inv_delay = np.array([1.0 / ch.delay for ch in channels])
    gamma = np.array([ch.internal_noise for ch in channels])
    eta = np.array([ch.obs_noise for ch in channels])

    sf, sjx, sju, sG = plant.f, plant.f_jac_x, plant.f_jac_u, plant.G

    def split(x):
        x = np.asarray(x, dtype=float)
        return x[..., :ns], x[..., ns:]

    def gtilde(s):
        return np.stack([ch.select(s) for ch in channels], axis=-1)

    def gtilde_jac(s):
        return np.stack([ch.select_jac(s) for ch in channels], axis=-2)

    def f(t, x, u):
        s, z = split(x)
        dz = (gtilde(s) - z) * inv_delay
        return np.concatenate([np.asarray(sf(t, s, u), dtype=float), dz], axis=-1)

    def f_jac_x(t, x, u):
        s, z = split(x)
        batch = s.shape[:-1]
        out = np.zeros(batch + (n, n))
        out[..., :ns, :ns] = sjx(t, s, u)
        out[..., ns:, :ns] = gtilde_jac(s) * inv_delay[:, None]
        idx = np.arange(p)
        out[..., ns + idx, ns + idx] = -inv_delay
        return out

    def f_jac_u(t, x, u):
        s, z = split(x)
        batch = s.shape[:-1]
        out = np.zeros(batch + (n, m_in))
        out[..., :ns, :] = sju(t, s, u)
        return out

    def G(t, x, u):
        s, z = split(x)
        batch = s.shape[:-1]
        out = np.zeros(batch + (n, k))
        out[..., :ns, :ks] = sG(t, s, u)
        idx = np.arange(p)
        out[..., ns + idx, ks + idx] = gamma
        return out

    def g(t, x):
        _, z = split(x)
        return z

    def g_jac_x(t, x):
        x = np.asarray(x, dtype=float)
        batch = x.shape[:-1]
        out = np.zeros(batch + (p, n))
        idx = np.arange(p)
        out[..., idx, ns + idx] = 1.0
        return out

    Hmat = np.diag(eta)

    def H(t, x):
        x = np.asarray(x)
        return np.broadcast_to(Hmat, x.shape[:-1] + (p, p))

    if x0_mean is None:
        s0 = plant.x0_mean
        x0_mean = np.concatenate([s0, gtilde(s0)])
    if x0_cov is None:
        J = np.zeros((n, ns))
        J[:ns] = np.eye(ns)
        J[ns:] = gtilde_jac(plant.x0_mean)
        x0_cov = J @ plant.x0_cov @ J.T

    c = plant.cost
    pad = np.zeros((n, n))
    pad[:ns, :ns] = c.Q
    pad_T = np.zeros((n, n))
    pad_T[:ns, :ns] = c.Q_T
    cost = QuadraticCost.build(
        n, m_in, Q=pad, R=c.R, q=np.concatenate([c.q, np.zeros(p)]),
        r=c.r, Q_T=pad_T, q_T=np.concatenate([c.q_T, np.zeros(p)]))

    info = dict(plant.model_info)
    info["delay_channels"] = [
        {"name": ch.name, "delay_s": ch.delay,
         "internal_noise": ch.internal_noise, "obs_noise": ch.obs_noise}
        for ch in channels
    ]

    return StochasticControlProblem(
        n=n, m=m_in, k=k, p=p, f=f, f_jac_x=f_jac_x, f_jac_u=f_jac_u, G=G,
        g=g, g_jac_x=g_jac_x, H=H, cost=cost, T=plant.T,
        x0_mean=x0_mean, x0_cov=x0_cov, u_bounds=plant.u_bounds,
        terminal_mean_idx=plant.terminal_mean_idx,
        terminal_mean_val=plant.terminal_mean_val,
        state_clamp=plant.state_clamp, model_info=info,
        name=plant.name + "+delays" if plant.name else "delayed")

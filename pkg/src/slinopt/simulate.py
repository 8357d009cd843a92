"""Closed-loop Monte Carlo validation of a solved policy.

Simulates the true stochastic plant, the observation process, and the
linearized Kalman filter under u = u_ff + K (xhat - m_mean), then reduces
the ensemble to the reported metrics.  Trials use counter-based RNG
streams keyed by (master seed, trial index), so results are independent
of batching and thread count.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .problem import cost_expectation_terms

__all__ = ["TrajectoryEnsemble", "MetricsReport", "simulate_closed_loop",
           "compute_metrics", "sweep"]

BLOWUP = 1e6


@dataclass
class TrajectoryEnsemble:
    """Monte Carlo sample of the closed loop.

    Full paths are kept for the first few trials only; everything the
    metrics need from the rest is reduced online (means, per-trial time
    averages, terminal estimation errors).
    """

    t: np.ndarray                 # simulation grid (S+1,)
    x: np.ndarray                 # kept paths (keep, S+1, n)
    xhat: np.ndarray              # kept paths (keep, S+1, n)
    u: np.ndarray                 # kept paths (keep, S+1, m)
    dy: np.ndarray                # kept observation increments (keep, S, p)
    kept: np.ndarray              # trial indices of the kept paths
    costs: np.ndarray             # realized cost per trial (trials,)
    diverged: np.ndarray          # blow-up flag per trial (trials,)
    clamp_steps: np.ndarray       # steps with any channel clamped (trials,)
    mean_x: np.ndarray            # ensemble mean path (S+1, n)
    se_x: np.ndarray              # standard error of mean_x (S+1, n)
    mean_u: np.ndarray            # ensemble mean control path (S+1, m)
    u_trial_mean: np.ndarray      # per-trial time-mean of u (trials, m)
    pair_absdiff_mean: np.ndarray  # per-trial time-mean |u_i-u_j| per pair
    err_T: np.ndarray             # xhat(T) - x(T) per trial (trials, n)
    xhat_T: np.ndarray            # xhat(T) per trial (trials, n)
    seeds: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def trials(self):
        return len(self.costs)

    @property
    def n_valid(self):
        return int((~self.diverged).sum())

    def __post_init__(self):
        for name in ("x", "xhat", "u"):
            if getattr(self, name).shape[1] != len(self.t):
                raise ValidationError(f"{name} path length mismatch")
        ok = self.costs[~self.diverged]
        if ok.size and not np.all(np.isfinite(ok)):
            raise ValidationError("non-finite cost on a trial not flagged "
                                  "as diverged")


def _sqrt_psd(S):
    w, V = np.linalg.eigh(np.asarray(S, dtype=float))
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_closed_loop(prob, policy, trials, dt_sim=0.001, seed=0,
                         clamp=False, keep_paths=8, batch=512,
                         antagonist_pairs=None):
    """Euler-Maruyama rollout of the closed loop; returns the ensemble.

    Per step: draw (dw, dv); advance x by the plant SDE; form the
    observation increment dy; advance xhat by the linearized Kalman
    filter with the policy's interpolated L; apply u = u_ff + K(xhat -
    m_mean), clamped to the model's control box only when ``clamp``.
    Trials whose state norm passes 1e6 are frozen, flagged, and excluded
    from the reductions.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    T = float(policy.t[-1])
    S = int(round(T / dt_sim))
    if abs(S * dt_sim - T) > 1e-9 * max(1.0, T):
        dt_sim = T / S
    h_tr = float(np.diff(policy.t).max())
    if dt_sim > h_tr + 1e-12:
        raise ValidationError("dt_sim must not exceed the policy grid step")
    n, m, k, p = prob.n, prob.m, prob.k, prob.p
    ts = np.linspace(0.0, T, S + 1)

    # policy grids sampled once onto the simulation grid
    u_ff = policy.interp("u_ff", ts)
    m_mean = policy.interp("m_mean", ts)
    K = policy.interp("K", ts)
    L = policy.interp("L", ts)

    if antagonist_pairs is None:
        antagonist_pairs = prob.model_info.get("antagonist_pairs", [])
    pairs = [tuple(pr) for pr in antagonist_pairs]
    lo, hi = (None, None)
    if prob.u_bounds is not None:
        lo, hi = prob.u_bounds

    sqrt0 = _sqrt_psd(prob.x0_cov)
    keep = min(keep_paths, trials)
    kept_x = np.zeros((keep, S + 1, n))
    kept_xh = np.zeros((keep, S + 1, n))
    kept_u = np.zeros((keep, S + 1, m))
    kept_dy = np.zeros((keep, S, p))

    costs = np.zeros(trials)
    diverged = np.zeros(trials, dtype=bool)
    clamp_steps = np.zeros(trials, dtype=np.int64)
    sum_x = np.zeros((S + 1, n))
    sumsq_x = np.zeros((S + 1, n))
    sum_u = np.zeros((S + 1, m))
    u_trial_mean = np.zeros((trials, m))
    pair_absdiff = np.zeros((trials, len(pairs)))
    err_T = np.zeros((trials, n))
    xhat_T = np.zeros((trials, n))
    sqdt = np.sqrt(dt_sim)

    for start in range(0, trials, batch):
        stop = min(start + batch, trials)
        B = stop - start
        noise = np.empty((B, S, k + p))
        draws0 = np.empty((B, n))
        for i in range(B):
            rng = np.random.Generator(
                np.random.Philox(key=[int(seed), start + i]))
            draws0[i] = rng.standard_normal(n)
            noise[i] = rng.standard_normal((S, k + p))

        x = prob.x0_mean + draws0 @ sqrt0.T
        xh = np.broadcast_to(prob.x0_mean, (B, n)).copy()
        alive = np.ones(B, dtype=bool)
        cost_acc = np.zeros(B)
        usum = np.zeros((B, m))
        pairsum = np.zeros((B, len(pairs)))

        for j in range(S + 1):
            tj = ts[j]
            u = u_ff[j] + np.einsum("ij,bj->bi", K[j], xh - m_mean[j])
            if clamp and lo is not None:
                uc = np.clip(u, lo, hi)
                clamp_steps[start:stop][alive] += np.any(
                    uc != u, axis=1)[alive]
                u = uc
            if start == 0:
                kb = min(keep, B)
                kept_x[:kb, j] = x[:kb]
                kept_xh[:kb, j] = xh[:kb]
                kept_u[:kb, j] = u[:kb]
            sum_x[j] += np.where(alive[:, None], x, 0.0).sum(axis=0)
            sumsq_x[j] += (np.where(alive[:, None], x, 0.0) ** 2).sum(axis=0)
            sum_u[j] += np.where(alive[:, None], u, 0.0).sum(axis=0)
            # left-Riemann running cost, terminal term at the last node
            if j < S:
                w = np.where(alive, dt_sim, 0.0)
                cost_acc += w * cost_expectation_terms(
                    prob.cost, x, np.zeros((n, n)), t=tj, u=u,
                    kind="running")
                usum += np.where(alive[:, None], u, 0.0) * dt_sim
                for q, (ia, ib) in enumerate(pairs):
                    pairsum[:, q] += np.where(
                        alive, np.abs(u[:, ia] - u[:, ib]), 0.0) * dt_sim
                dw = noise[:, j, :k] * sqdt
                dv = noise[:, j, k:] * sqdt
                fx = prob.f(tj, x, u)
                Gx = prob.G(tj, x, u)
                x_new = x + fx * dt_sim + np.einsum("bik,bk->bi", Gx, dw)
                gy = prob.g(tj, x)
                Hm = prob.H(tj, x)
                dy = gy * dt_sim + np.einsum("bij,bj->bi", Hm, dv)
                fh = prob.f(tj, xh, u)
                gh = prob.g(tj, xh)
                xh_new = xh + fh * dt_sim + np.einsum(
                    "ij,bj->bi", L[j], dy - gh * dt_sim)
                bad = ~(np.all(np.isfinite(x_new), axis=1)
                        & (np.abs(x_new).max(axis=1) < BLOWUP)
                        & np.all(np.isfinite(xh_new), axis=1))
                alive = alive & ~bad
                x = np.where(alive[:, None], x_new, x)
                xh = np.where(alive[:, None], xh_new, xh)
                if start == 0:
                    kept_dy[:min(keep, B), j] = dy[:min(keep, B)]
            else:
                cost_acc += np.where(
                    alive, cost_expectation_terms(
                        prob.cost, x, np.zeros((n, n)), kind="terminal"), 0.0)

        costs[start:stop] = np.where(alive, cost_acc, np.nan)
        diverged[start:stop] = ~alive
        u_trial_mean[start:stop] = usum / T
        pair_absdiff[start:stop] = pairsum / T
        err_T[start:stop] = xh - x
        xhat_T[start:stop] = xh

    n_ok = max(1, int((~diverged).sum()))
    mean_x = sum_x / n_ok
    var_x = np.maximum(sumsq_x / n_ok - mean_x ** 2, 0.0)
    se_x = np.sqrt(var_x / n_ok)
    mean_u = sum_u / n_ok

    return TrajectoryEnsemble(
        t=ts, x=kept_x, xhat=kept_xh, u=kept_u, dy=kept_dy,
        kept=np.arange(keep), costs=costs, diverged=diverged,
        clamp_steps=clamp_steps, mean_x=mean_x, se_x=se_x, mean_u=mean_u,
        u_trial_mean=u_trial_mean, pair_absdiff_mean=pair_absdiff,
        err_T=err_T, xhat_T=xhat_T,
        seeds={"master_seed": int(seed), "bit_generator": "Philox",
               "stream": "key=[master_seed, trial]"},
        meta={"trials": trials, "dt_sim": dt_sim, "clamp": bool(clamp),
              "steps": S, "keep_paths": keep})


@dataclass
class MetricsReport:
    """Scalar summaries matching the reported experiment panels."""

    kind: str
    mean_cost: float
    cost_se: float
    stiffness: float = float("nan")
    positional_gain: float = float("nan")
    net_torque: float = float("nan")
    cocontraction: float = float("nan")
    lateral_stiffness: float = float("nan")
    clamp_rate: float = 0.0
    diverged: int = 0
    trials: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        out = {}
        for name in ("kind", "mean_cost", "cost_se", "stiffness",
                     "positional_gain", "net_torque", "cocontraction",
                     "lateral_stiffness", "clamp_rate", "diverged",
                     "trials"):
            out[name] = getattr(self, name)
        out.update(self.extras)
        return out


def compute_metrics(ensemble, kind, policy=None, problem=None):
    """Reduce an ensemble to the model family's reported metrics.

    Pendulum: stiffness k_s*(u1+u2), net torque |k_n (u1-u2)|, positional
    feedback gain |K[0,0]| (all time averages; the first two also trial
    averages).  Arm: co-contraction over the three antagonist pairs,
    lateral endpoint stiffness along the mean path, positional gain over
    the 6x2 positional block of K.
    """
    ok = ~ensemble.diverged
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise ValidationError("every trial diverged; no metrics")
    costs = ensemble.costs[ok]
    mean_cost = float(costs.mean())
    cost_se = float(costs.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else 0.0
    steps = ensemble.meta["steps"] * n_ok
    rep = MetricsReport(
        kind=kind, mean_cost=mean_cost, cost_se=cost_se,
        clamp_rate=float(ensemble.clamp_steps[ok].sum()) / steps,
        diverged=int(ensemble.diverged.sum()), trials=ensemble.trials)

    if kind == "pendulum":
        if problem is None or policy is None:
            raise ValidationError("pendulum metrics need problem and policy")
        info = problem.model_info
        k_s, k_n = float(info["k_s"]), float(info["k_n"])
        um = ensemble.u_trial_mean[ok]
        rep.cocontraction = float((um[:, 0] + um[:, 1]).mean())
        rep.stiffness = k_s * rep.cocontraction
        rep.net_torque = k_n * float(ensemble.pair_absdiff_mean[ok, 0].mean())
        entry = tuple(info.get("gain_entry", (0, 0)))
        rep.positional_gain = float(
            np.abs(policy.K[:, entry[0], entry[1]]).mean())
    elif kind == "arm2dof":
        if problem is None or policy is None:
            raise ValidationError("arm metrics need problem and policy")
        from .models.arm import lateral_endpoint_stiffness
        par = problem.model_info["params"]
        um = ensemble.u_trial_mean[ok]
        pairs = problem.model_info["antagonist_pairs"]
        coco = [um[:, ia] + um[:, ib] for ia, ib in pairs]
        rep.cocontraction = float(np.mean(coco))
        q_path = ensemble.mean_x[:, 0:2]
        a_path = ensemble.mean_x[:, 4:10]
        rep.lateral_stiffness = float(
            lateral_endpoint_stiffness(par, q_path, a_path).mean())
        rep.positional_gain = float(np.abs(policy.K[:, :, 0:2]).mean())
    else:
        raise ValidationError(f"unknown model kind {kind!r}")
    return rep


def sweep(factory, scales, kind, h=0.005, trials=256, seed=0,
          config=None, dt_sim=0.001, clamp=False, solve_kwargs=None):
    """Solve and simulate a model family across noise/delay scales.

    ``factory(scale)`` builds the problem at one scale.  Scales run in
    increasing order, each solve warm-started from the previous one; a
    failed solve flags its row and the sweep continues.  Returns a list
    of row dicts (scale, status, objective, metrics fields, flagged).
    """
    from .pipeline import solve_problem

    rows = []
    prev = None
    for scale in sorted(scales):
        prob = factory(scale)
        try:
            sol = solve_problem(prob, h=h, config=config, warm=prev,
                                **(solve_kwargs or {}))
        except Exception as exc:  # keep sweeping past a broken point
            rows.append({"scale": scale, "status": "error",
                         "flagged": True, "message": str(exc)})
            prev = None
            continue
        row = {"scale": scale, "status": sol.status,
               "objective": sol.objective,
               "flagged": sol.status != "converged"}
        if sol.status != "diverged":
            ens = simulate_closed_loop(prob, sol.policy, trials,
                                       dt_sim=dt_sim, seed=seed, clamp=clamp)
            rep = compute_metrics(ens, kind, policy=sol.policy, problem=prob)
            row.update({k: v for k, v in rep.to_dict().items()
                        if k != "kind"})
            prev = sol
        else:
            prev = None
        rows.append(row)
    return rows

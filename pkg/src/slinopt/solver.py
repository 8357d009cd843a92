"""Augmented-Lagrangian solver for the transcribed moment NLP.

The solver splits the equality system by structure instead of treating
all rows alike:

* Covariance and costate rows are always eliminated: both recursions are
  contractive in their propagation directions (covariance forward,
  costate backward), so every merit evaluation re-sweeps those blocks
  along the current means and controls and the rows hold to integrator
  accuracy by construction.
* Mean rows are eliminated piecewise.  Reaching and posture plants are
  open-loop unstable, so a single forward sweep would amplify early
  control perturbations exponentially and destroy gradient accuracy; the
  grid is cut into segments whose linearized amplification stays bounded
  (stable plants get a single segment), interior means are swept within
  each segment, and only the segment-boundary means remain variables.
* The mean rows that tie consecutive segments together are the equality
  constraints of an augmented-Lagrangian outer loop.  Their control
  columns aggregate a whole segment of influence, which keeps the dual
  iteration well scaled.  Initial-mean and model terminal-mean pins are
  equal lower and upper bounds, so the inner minimizer never moves them.

Each outer iteration runs a projected limited-memory quasi-Newton pass
(scipy's L-BFGS-B) over the box-constrained boundary means and controls,
then updates the multipliers when the continuity residual drops fast
enough and grows the penalty otherwise.  Merit gradients are exact: the
objective's dependence on the eliminated blocks is pulled back through
one sparse factorized solve with the transposed elimination block (an
adjoint sweep in disguise; the block is block-bidiagonal within each
sweep because every row couples consecutive nodes only).
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.optimize as sopt
import scipy.sparse.linalg as spla

from .augment import (propagate_covariance, shoot_segment_means,
                      solve_E_backward)
from .errors import NumericalError, ValidationError
from .io import write_csv

__all__ = ["SolverConfig", "solve_nlp", "nlp_derivatives"]


@dataclass
class SolverConfig:
    max_outer: int = 50
    max_inner: int = 200
    tol_constraint: float = 1e-6
    tol_optimality: float = 1e-5
    penalty: float = 10.0
    penalty_growth: float = 10.0
    fd_step: float = 1e-6
    derivative_mode: str = "model_jacobian_composed"
    trace_path: str = ""

    def __post_init__(self):
        if min(self.tol_constraint, self.tol_optimality, self.penalty,
               self.fd_step) <= 0.0:
            raise ValidationError("tolerances, penalty and FD step must be "
                                  "positive")
        if self.penalty_growth <= 1.0:
            raise ValidationError("penalty growth must exceed 1")
        if self.derivative_mode not in ("model_jacobian_composed",
                                        "fd_central"):
            raise ValidationError(
                f"unknown derivative mode {self.derivative_mode!r}")


def nlp_derivatives(nlp, point, mode="model_jacobian_composed",
                    fd_step=1e-6):
    """Objective gradient and sparse equality Jacobian at ``point``."""
    return nlp.derivatives(point, mode=mode, fd_step=fd_step)


def _block_scales(nlp, z0):
    """Row scale vector and block magnitudes from the guess."""
    traj = nlp.trajectory(z0)
    s_sig = max(1e-8, float(np.linalg.norm(traj.Sigma, axis=1).max()))
    s_e = max(1e-8, float(np.linalg.norm(traj.E, axis=1).max()))
    row_scale = np.array([1.0, s_sig, s_e, 1.0, s_sig, s_e, 1.0])[
        nlp.row_kind]
    return row_scale, s_sig, s_e


def _segment_boundaries(nlp, z0, amp_max=30.0):
    """Cut the grid where linearized mean perturbations would outgrow
    ``amp_max``, judged along the guess trajectory."""
    traj = nlp.trajectory(z0)
    A = nlp.prob.f_jac_x(nlp.t, traj.m, traj.u)
    eye = np.eye(nlp.n)
    fac = np.linalg.norm(eye + nlp.h * A[1:], ord=2, axis=(1, 2))
    fac = np.where(np.isfinite(fac), fac, 2.0 * amp_max)
    bounds = [0]
    amp = 1.0
    for k in range(nlp.N):
        amp *= max(fac[k], 1.0)
        if amp > amp_max and k + 1 < nlp.N:
            bounds.append(k + 1)
            amp = 1.0
    bounds.append(nlp.N)
    return np.array(bounds, dtype=int)


def _first_bad_node(nlp, values, per_row):
    bad = np.nonzero(~np.isfinite(values))[0]
    if len(bad) == 0:
        return -1
    if per_row:
        return int(nlp.row_node[bad[0]])
    return int(bad[0] // nlp.block)


def _node_of(exc, nlp):
    """Grid node closest to the failure time an integrator reported."""
    t = getattr(exc, "t", None)
    if t is None:
        return -1
    return int(np.clip(round((t - nlp.t[0]) / nlp.h), 0, nlp.N))


def solve_nlp(nlp, guess, config=None):
    """Minimize the transcribed NLP from ``guess``.

    Returns ``(z, status, diagnostics)`` with status in {"converged",
    "max_iter", "diverged"}.  Convergence means the scaled equality
    residuals are within ``tol_constraint`` in infinity norm and the
    projected gradient of the Lagrangian, reduced onto the remaining
    box-constrained variables, is within ``tol_optimality *
    (1 + |objective|)``.

    The returned point always carries eliminated blocks swept to
    integrator accuracy from its boundary means and controls; on
    "diverged" the guess is returned unchanged and the diagnostics carry
    the offending node.
    """
    cfg = config or SolverConfig()
    z = np.asarray(guess, dtype=float).copy()
    if z.shape != (nlp.n_var,):
        raise ValidationError(f"guess must have shape ({nlp.n_var},)")
    if not np.all(np.isfinite(z)):
        return z, "diverged", {
            "reason": "non-finite guess",
            "offending_node": _first_bad_node(nlp, z, per_row=False)}

    prob = nlp.prob
    N, n, ps, md, blk = nlp.N, nlp.n, nlp.ps, nlp.m_dim, nlp.block
    s_row, s_sig, s_e = _block_scales(nlp, z)
    # eliminated rows must clear the scaled violation test with margin
    tol_m = min(1e-11, 0.02 * cfg.tol_constraint)
    tol_sig = min(1e-11, 0.02 * cfg.tol_constraint * min(1.0, s_sig))
    tol_e = min(1e-13, 0.02 * cfg.tol_constraint * min(1.0, s_e))

    boundaries = _segment_boundaries(nlp, z)
    node_base = np.arange(N + 1) * blk
    mean_cols = (node_base[:, None] + np.arange(n)).ravel()
    sig_cols = (node_base[:, None] + n + np.arange(ps)).ravel()
    e_cols = (node_base[:, None] + n + ps + np.arange(ps)).ravel()
    u_cols = (node_base[:, None] + n + 2 * ps + np.arange(md)).ravel()

    bmask = np.zeros(N + 1, dtype=bool)
    bmask[boundaries] = True
    bmean_cols = (node_base[bmask][:, None] + np.arange(n)).ravel()
    imean_cols = (node_base[~bmask][:, None] + np.arange(n)).ravel()
    v_cols = np.sort(np.concatenate([bmean_cols, u_cols]))
    mean_rows = np.nonzero(nlp.row_kind == 0)[0].reshape(N, n)
    al_ivals = np.zeros(N, dtype=bool)
    al_ivals[boundaries[1:] - 1] = True
    row_al = mean_rows[al_ivals].ravel()
    row_elim = np.sort(np.concatenate(
        [mean_rows[~al_ivals].ravel(),
         np.nonzero(np.isin(nlp.row_kind, (1, 2, 4, 5)))[0]]))
    elim_cols = np.sort(np.concatenate([imean_cols, sig_cols, e_cols]))

    lb_v, ub_v = nlp.lb[v_cols].copy(), nlp.ub[v_cols].copy()
    pin_idx, pin_val = nlp.pinned()
    mean_pins = nlp.var_kind[pin_idx] == 0
    vpos = np.searchsorted(v_cols, pin_idx[mean_pins])
    lb_v[vpos] = ub_v[vpos] = pin_val[mean_pins]
    bounds = np.stack([lb_v, ub_v], axis=1)
    nv = len(v_cols)
    uphase = np.isin(v_cols, u_cols)

    def propagate(v):
        M_b = v[~uphase].reshape(-1, n)
        U = v[uphase].reshape(N + 1, md)
        M = shoot_segment_means(prob, nlp.t, U, boundaries, M_b,
                                newton_tol=tol_m)
        Sp, _ = propagate_covariance(prob, nlp.t, M, U, newton_tol=tol_sig,
                                     Sf=nlp._sf_grid)
        Ep = solve_E_backward(prob, nlp.t, M, U, newton_tol=tol_e)
        zf = np.empty(nlp.n_var)
        zf[mean_cols] = M.ravel()
        zf[sig_cols] = Sp.ravel()
        zf[e_cols] = Ep.ravel()
        zf[u_cols] = U.ravel()
        return zf

    guard = {"count": 0, "node": -1}

    def merit(v, lam, rho):
        try:
            zf = propagate(v)
        except NumericalError as exc:
            guard["count"] += 1
            guard["node"] = _node_of(exc, nlp)
            return 1e50, np.zeros_like(v)
        obj = nlp.objective(zf)
        c = nlp.residual(zf)[row_al]
        val = obj - lam @ c + 0.5 * rho * (c @ c)
        if not np.isfinite(val):
            guard["count"] += 1
            return 1e50, np.zeros_like(v)
        g, J = nlp.derivatives(zf, mode=cfg.derivative_mode,
                               fd_step=cfg.fd_step)
        Jcsr = J.tocsr()
        g_eff = g - Jcsr[row_al].T @ (lam - rho * c)
        Je = Jcsr[row_elim]
        lu = spla.splu(Je[:, elim_cols].T.tocsc())
        mu = lu.solve(g_eff[elim_cols])
        gv = g_eff[v_cols] - Je[:, v_cols].T @ mu
        if not np.all(np.isfinite(gv)):
            guard["count"] += 1
            return 1e50, np.zeros_like(v)
        return val, gv

    vf = np.clip(z[v_cols], lb_v, ub_v)
    v_prev = vf.copy()
    lam = np.zeros(len(row_al))
    rho = cfg.penalty
    c_ref = np.inf
    trace = []
    merit_drops = []
    status = "max_iter"
    diag = {}
    inner_nit = 0
    inner_guarded = 0
    zf = None
    t_start = time.perf_counter()

    for outer in range(cfg.max_outer + 1):
        try:
            zc = propagate(vf)
        except NumericalError as exc:
            status = "diverged"
            diag = {"reason": str(exc), "offending_node": _node_of(exc, nlp)}
            break
        r = nlp.residual(zc)
        obj = nlp.objective(zc)
        if not (np.all(np.isfinite(r)) and np.isfinite(obj)):
            status = "diverged"
            diag = {"reason": "non-finite residual or objective",
                    "offending_node": _first_bad_node(nlp, r, per_row=True)}
            break
        zf = zc
        c = r[row_al]
        c_inf = float(np.abs(r / s_row).max())

        g, J = nlp.derivatives(zc, mode=cfg.derivative_mode,
                               fd_step=cfg.fd_step)
        Jcsr = J.tocsr()
        Je = Jcsr[row_elim]
        Jev = Je[:, v_cols]
        lu = spla.splu(Je[:, elim_cols].T.tocsc())
        gv0 = g[v_cols] - Jev.T @ lu.solve(g[elim_cols])
        Jal = Jcsr[row_al]
        # reduced Jacobian of the continuity rows: dense, few columns
        R = Jal[:, v_cols].T.toarray() \
            - Jev.T @ lu.solve(Jal[:, elim_cols].T.toarray())
        # least-squares multiplier estimate on the coordinates strictly
        # inside their box; first-order dual steps crawl once the
        # residual is small, this jumps straight to the KKT fit
        lam_ls = None
        free = (vf - lb_v > 1e-12) & (ub_v - vf > 1e-12)
        if len(row_al) and free.any():
            lam_ls = np.linalg.lstsq(R[free], gv0[free], rcond=None)[0]
            if not np.all(np.isfinite(lam_ls)):
                lam_ls = None

        # accept new multipliers when the continuity residual improved
        # enough over the last accepted level, else grow the penalty
        ct_inf = float(np.abs(c).max()) if len(c) else 0.0
        if outer == 0:
            if lam_ls is not None:
                lam = lam_ls
        elif ct_inf <= max(cfg.tol_constraint, 0.25 * c_ref):
            lam = lam_ls if lam_ls is not None else lam - rho * c
            c_ref = max(ct_inf, cfg.tol_constraint)
        else:
            rho = min(rho * cfg.penalty_growth, 1e12)

        gv = gv0 - R @ lam if len(row_al) else gv0
        pg = float(np.abs(vf - np.clip(vf - gv, lb_v, ub_v)).max())
        trace.append({
            "iteration": outer,
            "objective": obj,
            "violation": c_inf,
            "step": float(np.abs(vf - v_prev).max()),
            "projected_gradient": pg,
            "penalty": rho,
            "inner_iterations": inner_nit,
            "guarded_evaluations": inner_guarded,
        })
        if (c_inf <= cfg.tol_constraint
                and pg <= cfg.tol_optimality * (1.0 + abs(obj))):
            status = "converged"
            break
        if outer == cfg.max_outer:
            status = "max_iter"
            break

        v_prev = vf.copy()
        guard_before = guard["count"]
        merit_start = merit(vf, lam, rho)[0]
        res = sopt.minimize(
            merit, vf, args=(lam, rho), jac=True, method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": cfg.max_inner, "maxcor": 30, "maxls": 40,
                     "ftol": 1e-14,
                     "gtol": max(0.1 * cfg.tol_optimality, 0.03 * pg)})
        vf = np.clip(res.x, lb_v, ub_v)
        inner_nit = int(res.nit)
        inner_guarded = guard["count"] - guard_before
        merit_drops.append(bool(
            res.fun <= merit_start + 1e-10 * (1.0 + abs(merit_start))))

    wall = time.perf_counter() - t_start
    if status == "diverged":
        diag.update({
            "outer_iterations": len(trace),
            "penalty": rho,
            "guarded_evaluations": guard["count"],
            "guarded_node": guard["node"],
            "wall_time_s": wall,
            "trace": trace,
        })
        if cfg.trace_path:
            _write_trace(cfg.trace_path, trace)
        return z, status, diag

    diag = {
        "outer_iterations": max(0, len(trace) - 1),
        "objective": float(trace[-1]["objective"]),
        "violation": float(trace[-1]["violation"]),
        "projected_gradient": float(trace[-1]["projected_gradient"]),
        "penalty": rho,
        "multipliers": lam.copy(),
        "segments": len(boundaries) - 1,
        "inner_merit_decreased": merit_drops,
        "inner_iterations_total": int(sum(t["inner_iterations"]
                                          for t in trace)),
        "guarded_evaluations": guard["count"],
        "wall_time_s": wall,
        "trace": trace,
    }
    if cfg.trace_path:
        _write_trace(cfg.trace_path, trace)
    return zf, status, diag


def _write_trace(path, trace):
    cols = ["iteration", "objective", "violation", "step"]
    write_csv(path, cols, [[row[c] for c in cols] for row in trace])

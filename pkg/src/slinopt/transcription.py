"""Direct transcription of the reduced moment problem to a sparse NLP.

Decision vector, node-major: ``[m_k, packed Sigma_k, packed E_k, u_k]`` for
k = 0..N on a uniform grid.  Equality rows per interval k:

* mean and covariance rows use the right endpoint,
  ``X_{k+1} - X_k - h F(t_{k+1}, X_{k+1}, u_{k+1}) = 0``;
* costate rows use the left endpoint,
  ``E_{k+1} - E_k - h Edot(t_k, m_k, E_k, u_k) = 0``.

The left-endpoint choice is the stable direction for the equation that is
integrated backward; a right-endpoint recursion on E amplifies terminal
boundary layers (the reaching model has one of ~4e-5 s) beyond any usable
step.  Both row families are first order with the same two-node stencil, and
an initial guess produced by the module's own integrators is feasible to
round-off by construction.

Boundary rows pin m(0), Sigma(0), E(T) = -Q_T, and any model-declared
terminal mean coordinates.  The objective is the trapezoid quadrature of the
reduced cost over the nodes, so at any feasible point it equals the cost of
the corresponding grid trajectory exactly.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .augment import (AugmentedTrajectory, _control_weight,
                      innovation_weight, integrate_augmented,
                      observation_is_state_independent, rhs_rows,
                      trapezoid_weights)
from .errors import NumericalError, ValidationError
from .io import dump_json, save_arrays_npz
from .problem import cost_expectation_terms
from .sym import pack, pack_gradient, packed_dim, packed_lyap_operator, unpack

__all__ = ["TranscribedNLP", "transcribe", "initial_guess"]

log = logging.getLogger("slinopt.transcription")


@dataclass
class TranscribedNLP:
    """Sparse equality-constrained NLP over augmented nodes and controls."""

    prob: object
    N: int
    t: np.ndarray
    h: float
    lb: np.ndarray
    ub: np.ndarray
    var_kind: np.ndarray   # per coordinate: 0 mean, 1 Sigma, 2 E, 3 control
    row_kind: np.ndarray   # 0 mean, 1 Sigma, 2 E, 3..6 boundary families
    row_node: np.ndarray   # node whose dynamics/boundary a row anchors to
    _tpl: dict = field(default_factory=dict, repr=False)
    # innovation weight per node, cached when the observation model is
    # state-independent (None otherwise)
    _sf_grid: object = field(default=None, repr=False)

    # -- layout ------------------------------------------------------------

    @property
    def n(self):
        return self.prob.n

    @property
    def ps(self):
        return packed_dim(self.prob.n)

    @property
    def m_dim(self):
        return self.prob.m

    @property
    def block(self):
        return self.n + 2 * self.ps + self.m_dim

    @property
    def n_var(self):
        return (self.N + 1) * self.block

    @property
    def n_eq(self):
        return len(self.row_kind)

    def trajectory(self, z):
        """View the decision vector as a grid trajectory."""
        Z = np.asarray(z, dtype=float).reshape(self.N + 1, self.block)
        n, ps = self.n, self.ps
        return AugmentedTrajectory(
            t=self.t, m=Z[:, :n], Sigma=Z[:, n:n + ps],
            E=Z[:, n + ps:n + 2 * ps], u=Z[:, n + 2 * ps:])

    def pack_trajectory(self, traj):
        return np.concatenate(
            [traj.m, traj.Sigma, traj.E, traj.u], axis=1).ravel()

    def pinned(self):
        """Coordinates fixed by boundary rows, as (indices, values)."""
        prob, n, ps = self.prob, self.n, self.ps
        idx = [np.arange(n), n + np.arange(ps)]
        val = [np.asarray(prob.x0_mean, dtype=float), pack(prob.x0_cov)]
        base_N = self.N * self.block
        idx.append(base_N + n + ps + np.arange(ps))
        val.append(-pack(prob.cost.Q_T))
        if prob.terminal_mean_idx is not None:
            idx.append(base_N + np.asarray(prob.terminal_mean_idx))
            val.append(np.asarray(prob.terminal_mean_val, dtype=float))
        return np.concatenate(idx), np.concatenate(val)

    # -- evaluation --------------------------------------------------------

    def _rhs_all(self, traj):
        Y = traj.rows()
        return rhs_rows(self.prob, self.t, Y, traj.u, Sf=self._sf_grid)

    def residual(self, z):
        traj = self.trajectory(z)
        Y = traj.rows()
        F = self._rhs_all(traj)
        n, ps, h = self.n, self.ps, self.h
        r_dyn = Y[1:] - Y[:-1]
        r_dyn[:, :n + ps] -= h * F[1:, :n + ps]
        r_dyn[:, n + ps:] -= h * F[:-1, n + ps:]
        idx, val = self.pinned()
        r_bnd = z[idx] - val
        return np.concatenate([r_dyn.ravel(), r_bnd])

    def objective(self, z):
        return float(self.node_objective_terms(z).sum())

    def node_objective_terms(self, z):
        """Per-node objective contributions; their sum is the objective."""
        traj = self.trajectory(z)
        return self._node_terms(traj)

    def _node_terms(self, traj):
        prob = self.prob
        cost = prob.cost
        Sig = traj.Sigma_full
        E = traj.E_full
        w = trapezoid_weights(traj.t)
        l_mean = cost.running(traj.t, traj.m, traj.u)
        l_cov = np.einsum("ij,kij->k", cost.Q, Sig)
        Sf = self._sf_grid
        if Sf is None:
            Sf = innovation_weight(prob, traj.t, traj.m)
        SSfS = Sig @ (Sf @ Sig)
        l_filt = -np.einsum("kab,kba->k", SSfS, E)
        v = w * (l_mean + l_cov + l_filt)
        v[-1] += float(cost.terminal(traj.m[-1])) + float(
            np.sum(cost.Q_T * Sig[-1]))
        return v

    # -- derivatives -------------------------------------------------------

    def derivatives(self, z, mode="model_jacobian_composed", fd_step=1e-6):
        """Objective gradient and equality Jacobian (CSR) at ``z``."""
        z = np.asarray(z, dtype=float)
        if mode == "model_jacobian_composed":
            jac = self._jacobian_composed(z, fd_step)
            grad = self._gradient(z, fd_step, analytic_cov=True)
        elif mode == "fd_central":
            jac = self._jacobian_fd(z, fd_step)
            grad = self._gradient(z, fd_step, analytic_cov=False)
        else:
            raise ValidationError(f"unknown derivative mode {mode!r}")
        return grad, jac

    def _steps(self, z, fd_step):
        step = fd_step * np.maximum(1.0, np.abs(z))
        bad = (z + step) == z
        while np.any(bad):
            step[bad] *= 10.0
            log.info("widened FD step on %d coordinates", int(bad.sum()))
            bad = (z + step) == z
        return step

    def _gradient(self, z, fd_step, analytic_cov):
        n, ps, blk = self.n, self.ps, self.block
        grad = np.zeros_like(z)
        step = self._steps(z, fd_step)
        coords = list(range(n)) + list(range(n + 2 * ps, blk))
        if not analytic_cov:
            coords = list(range(blk))
        Z = z.reshape(self.N + 1, blk)
        st = step.reshape(self.N + 1, blk)
        for c in coords:
            zp = Z.copy()
            zm = Z.copy()
            zp[:, c] += st[:, c]
            zm[:, c] -= st[:, c]
            vp = self._node_terms(self.trajectory(zp.ravel()))
            vm = self._node_terms(self.trajectory(zm.ravel()))
            grad.reshape(self.N + 1, blk)[:, c] = (vp - vm) / (2.0 * st[:, c])
        if analytic_cov:
            traj = self.trajectory(z)
            Sig = traj.Sigma_full
            E = traj.E_full
            Sf = self._sf_grid
            if Sf is None:
                Sf = innovation_weight(self.prob, self.t, traj.m)
            w = trapezoid_weights(self.t)
            SfSE = Sf @ (Sig @ E)
            dSig = w[:, None, None] * (self.prob.cost.Q - SfSE
                                       - np.swapaxes(SfSE, -1, -2))
            dSig[-1] += self.prob.cost.Q_T
            dE = -w[:, None, None] * (Sig @ (Sf @ Sig))
            G = grad.reshape(self.N + 1, blk)
            G[:, n:n + ps] = pack_gradient(dSig)
            G[:, n + ps:n + 2 * ps] = pack_gradient(dE)
        return grad

    def _node_matrices(self, traj, fd_step):
        """Per-node Jacobian pieces of the augmented rhs."""
        prob = self.prob
        t, m, u = self.t, traj.m, traj.u
        A = prob.f_jac_x(t, m, u)
        B = prob.f_jac_u(t, m, u)
        Sig = traj.Sigma_full
        E = traj.E_full
        Sf = self._sf_grid
        if Sf is None:
            Sf = innovation_weight(prob, t, m)
        W = _control_weight(prob, t, m, u)
        lyap_sig = packed_lyap_operator(A - Sig @ Sf)
        lyap_e = -packed_lyap_operator(np.swapaxes(A, -1, -2) + E @ W)

        # cross sensitivities of the packed Sigma/E rows to (m, u) by
        # central differences, one sweep per coordinate over all nodes
        n, ps, md = self.n, self.ps, self.m_dim
        K = len(t)
        dSig_dm = np.empty((K, ps, n))
        dE_dm = np.empty((K, ps, n))
        dSig_du = np.empty((K, ps, md))
        dE_du = np.empty((K, ps, md))
        Y = traj.rows()
        for j in range(n):
            st = fd_step * np.maximum(1.0, np.abs(m[:, j]))
            Yp = Y.copy()
            Ym = Y.copy()
            Yp[:, j] += st
            Ym[:, j] -= st
            Fp = rhs_rows(prob, t, Yp, u, Sf=self._sf_grid)
            Fm = rhs_rows(prob, t, Ym, u, Sf=self._sf_grid)
            d = (Fp - Fm) / (2.0 * st)[:, None]
            dSig_dm[:, :, j] = d[:, n:n + ps]
            dE_dm[:, :, j] = d[:, n + ps:]
        for j in range(md):
            st = fd_step * np.maximum(1.0, np.abs(u[:, j]))
            up = u.copy()
            um = u.copy()
            up[:, j] += st
            um[:, j] -= st
            # the innovation weight never depends on u, so the base grid
            # is exact here even for state-dependent observation models
            Fp = rhs_rows(prob, t, Y, up, Sf=Sf)
            Fm = rhs_rows(prob, t, Y, um, Sf=Sf)
            d = (Fp - Fm) / (2.0 * st)[:, None]
            dSig_du[:, :, j] = d[:, n:n + ps]
            dE_du[:, :, j] = d[:, n + ps:]
        return dict(A=A, B=B, lyap_sig=lyap_sig, lyap_e=lyap_e,
                    dSig_dm=dSig_dm, dSig_du=dSig_du,
                    dE_dm=dE_dm, dE_du=dE_du)

    def _template(self):
        """Static (row, col) index arrays for the composed Jacobian."""
        if self._tpl:
            return self._tpl
        n, ps, md, blk = self.n, self.ps, self.m_dim, self.block
        N = self.N
        spr = n + 2 * ps
        k = np.arange(N)[:, None, None]

        def blockix(row0, col_node, col0, nr, nc):
            rows = row0 + k * spr + np.arange(nr)[None, :, None] \
                + np.zeros((1, 1, nc), dtype=int)
            cols = col0 + (k + col_node) * blk \
                + np.zeros((1, nr, 1), dtype=int) + np.arange(nc)[None, None, :]
            return rows.ravel(), cols.ravel()

        def diagix(row0, col_node, col0, nr):
            rows = row0 + k[:, :, 0] * spr + np.arange(nr)[None, :]
            cols = col0 + (k[:, :, 0] + col_node) * blk + np.arange(nr)[None, :]
            return rows.ravel(), cols.ravel()

        pieces = [
            ("mean_next", blockix(0, 1, 0, n, n)),
            ("mean_prev", diagix(0, 0, 0, n)),
            ("mean_u", blockix(0, 1, n + 2 * ps, n, md)),
            ("sig_next", blockix(n, 1, n, ps, ps)),
            ("sig_prev", diagix(n, 0, n, ps)),
            ("sig_m", blockix(n, 1, 0, ps, n)),
            ("sig_u", blockix(n, 1, n + 2 * ps, ps, md)),
            ("e_next", diagix(n + ps, 1, n + ps, ps)),
            ("e_prev", blockix(n + ps, 0, n + ps, ps, ps)),
            ("e_m", blockix(n + ps, 0, 0, ps, n)),
            ("e_u", blockix(n + ps, 0, n + 2 * ps, ps, md)),
        ]
        idx, _ = self.pinned()
        r0 = N * spr
        pieces.append(("boundary", (r0 + np.arange(len(idx)), idx)))
        rows = np.concatenate([p[1][0] for p in pieces])
        cols = np.concatenate([p[1][1] for p in pieces])
        self._tpl = {"pieces": pieces, "rows": rows, "cols": cols}
        return self._tpl

    def _jacobian_composed(self, z, fd_step):
        tpl = self._template()
        traj = self.trajectory(z)
        mats = self._node_matrices(traj, fd_step)
        n, ps, md = self.n, self.ps, self.m_dim
        N, h = self.N, self.h
        eye_n = np.eye(n)
        eye_ps = np.eye(ps)
        vals = {
            "mean_next": (eye_n - h * mats["A"][1:]).ravel(),
            "mean_prev": np.full(N * n, -1.0),
            "mean_u": (-h * mats["B"][1:]).ravel(),
            "sig_next": (eye_ps - h * mats["lyap_sig"][1:]).ravel(),
            "sig_prev": np.full(N * ps, -1.0),
            "sig_m": (-h * mats["dSig_dm"][1:]).ravel(),
            "sig_u": (-h * mats["dSig_du"][1:]).ravel(),
            "e_next": np.full(N * ps, 1.0),
            "e_prev": (-eye_ps - h * mats["lyap_e"][:-1]).ravel(),
            "e_m": (-h * mats["dE_dm"][:-1]).ravel(),
            "e_u": (-h * mats["dE_du"][:-1]).ravel(),
            "boundary": np.ones(len(self.pinned()[0])),
        }
        data = np.concatenate([vals[name] for name, _ in tpl["pieces"]])
        jac = sp.coo_matrix((data, (tpl["rows"], tpl["cols"])),
                            shape=(self.n_eq, self.n_var))
        return jac.tocsr()

    def _jacobian_fd(self, z, fd_step):
        """Residual Jacobian by two-color nodewise central differences."""
        blk = self.block
        N = self.N
        spr = self.n + 2 * self.ps
        step = self._steps(z, fd_step).reshape(N + 1, blk)
        Z = z.reshape(N + 1, blk)

        # row -> owning node for each parity: dynamics row of interval k
        # touches nodes k and k+1, exactly one of which has the parity
        intervals = np.repeat(np.arange(N), spr)
        owner = {}
        for q in (0, 1):
            own_dyn = np.where(intervals % 2 == q, intervals, intervals + 1)
            own_bnd = self.row_node[N * spr:]
            owner[q] = np.concatenate([own_dyn, own_bnd])

        rows_all, cols_all, vals_all = [], [], []
        node_idx = np.arange(N + 1)
        for c in range(blk):
            for q in (0, 1):
                sel = node_idx[node_idx % 2 == q]
                zp = Z.copy()
                zm = Z.copy()
                zp[sel, c] += step[sel, c]
                zm[sel, c] -= step[sel, c]
                rp = self.residual(zp.ravel())
                rm = self.residual(zm.ravel())
                own = owner[q]
                mask = (own % 2 == q)
                dr = np.zeros_like(rp)
                dr[mask] = (rp[mask] - rm[mask]) / (2.0 * step[own[mask], c])
                nz = np.nonzero(dr)[0]
                rows_all.append(nz)
                cols_all.append(own[nz] * blk + c)
                vals_all.append(dr[nz])
        jac = sp.coo_matrix(
            (np.concatenate(vals_all),
             (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(self.n_eq, self.n_var))
        return jac.tocsr()

    def sparsity_pattern(self):
        """Row/col arrays of the structural nonzeros (two-node stencil)."""
        tpl = self._template()
        return tpl["rows"].copy(), tpl["cols"].copy()

    # -- persistence ---------------------------------------------------------

    def dump(self, prefix, z0=None):
        """Write a documented JSON + npz pair describing this NLP."""
        n, ps, md = self.n, self.ps, self.m_dim
        doc = {
            "layout": {
                "node_major_block": ["mean", "sigma_packed", "e_packed",
                                     "control"],
                "block_sizes": {"mean": n, "sigma_packed": ps,
                                "e_packed": ps, "control": md},
                "nodes": self.N + 1,
                "variables": self.n_var,
            },
            "rows": {
                "per_interval": {"mean": n, "sigma": ps, "e": ps},
                "intervals": self.N,
                "boundary": int(self.n_eq - self.N * (n + 2 * ps)),
                "total": self.n_eq,
                "stencil": "interval k couples nodes k and k+1 only; "
                           "mean/sigma rows use the right endpoint, "
                           "e rows the left endpoint",
            },
            "grid": {"t0": float(self.t[0]), "T": float(self.t[-1]),
                     "h": self.h, "N": self.N},
            "problem": getattr(self.prob, "name", ""),
        }
        dump_json(f"{prefix}.json", doc)
        arrays = {"t": self.t, "lb": self.lb, "ub": self.ub,
                  "var_kind": self.var_kind, "row_kind": self.row_kind,
                  "row_node": self.row_node}
        if z0 is not None:
            arrays["z0"] = np.asarray(z0, dtype=float)
        save_arrays_npz(f"{prefix}.npz", arrays)


def transcribe(prob, N):
    """Transcribe ``prob`` on a uniform grid with ``N`` intervals."""
    if not isinstance(N, (int, np.integer)) or N < 2:
        raise ValidationError("need an integer node count N >= 2")
    if prob.T <= 0.0:
        raise ValidationError("horizon gives step h <= 0")
    n, md = prob.n, prob.m
    ps = packed_dim(n)
    blk = n + 2 * ps + md
    t = np.linspace(0.0, prob.T, N + 1)
    h = prob.T / N

    lb = np.full((N + 1, blk), -np.inf)
    ub = np.full((N + 1, blk), np.inf)
    if prob.u_bounds is not None:
        lo, hi = prob.u_bounds
        lb[:, n + 2 * ps:] = lo
        ub[:, n + 2 * ps:] = hi

    var_kind = np.zeros(blk, dtype=np.int8)
    var_kind[n:n + ps] = 1
    var_kind[n + ps:n + 2 * ps] = 2
    var_kind[n + 2 * ps:] = 3
    var_kind = np.tile(var_kind, N + 1)

    spr = n + 2 * ps
    rk_dyn = np.tile(np.concatenate([
        np.zeros(n, dtype=np.int8), np.ones(ps, dtype=np.int8),
        np.full(ps, 2, dtype=np.int8)]), N)
    rn_dyn = np.repeat(np.arange(N), spr)
    nt = 0 if prob.terminal_mean_idx is None else len(prob.terminal_mean_idx)
    rk_bnd = np.concatenate([
        np.full(n, 3, dtype=np.int8), np.full(ps, 4, dtype=np.int8),
        np.full(ps, 5, dtype=np.int8), np.full(nt, 6, dtype=np.int8)])
    rn_bnd = np.concatenate([
        np.zeros(n + ps, dtype=int), np.full(ps + nt, N, dtype=int)])

    nlp = TranscribedNLP(
        prob=prob, N=int(N), t=t, h=h, lb=lb.ravel(), ub=ub.ravel(),
        var_kind=var_kind,
        row_kind=np.concatenate([rk_dyn, rk_bnd]),
        row_node=np.concatenate([rn_dyn, rn_bnd]))
    if observation_is_state_independent(prob):
        x_grid = np.broadcast_to(prob.x0_mean, (N + 1, n))
        nlp._sf_grid = innovation_weight(prob, t, x_grid)
    return nlp


def _hold_value(prob, u_hold):
    if u_hold is not None:
        u = np.asarray(u_hold, dtype=float)
    else:
        u = np.asarray(prob.model_info.get("hold_u", np.zeros(prob.m)),
                       dtype=float)
    if prob.u_bounds is not None:
        u = np.clip(u, prob.u_bounds[0], prob.u_bounds[1])
    return u


def _reference_controls(nlp):
    """Least-squares inverse dynamics along the cost reference."""
    prob = nlp.prob
    t = nlp.t
    xr = np.stack([prob.cost.ref(tk) for tk in t])
    xdot = np.gradient(xr, t, axis=0)
    u0 = np.zeros(prob.m)
    U = np.empty((nlp.N + 1, prob.m))
    for k, tk in enumerate(t):
        B = prob.f_jac_u(tk, xr[k], u0)
        rhs = xdot[k] - prob.f(tk, xr[k], u0)
        U[k] = np.linalg.lstsq(B, rhs, rcond=None)[0]
    if prob.u_bounds is not None:
        U = np.clip(U, prob.u_bounds[0], prob.u_bounds[1])
    return U


def initial_guess(nlp, strategy="hold", u_hold=None, warm=None):
    """Feasible starting point: integrate the transcription's own scheme.

    ``hold`` holds a constant control (the model's suggested hold value by
    default), ``reference`` back-solves controls along the cost reference,
    ``warm`` reuses a prior solution's controls, re-interpolating onto this
    grid (with a logged notice) when grids differ.  All three integrate the
    states with the same stencil the residual enforces, so the guess is
    feasible to round-off.
    """
    prob = nlp.prob
    if strategy == "hold":
        U = np.tile(_hold_value(prob, u_hold), (nlp.N + 1, 1))
    elif strategy == "reference":
        U = _reference_controls(nlp)
    elif strategy == "warm":
        if warm is None:
            raise ValidationError("warm strategy needs a prior solution")
        if hasattr(warm, "u_ff"):
            t_prev = np.asarray(warm.t, dtype=float)
            u_prev = np.asarray(warm.u_ff, dtype=float)
        else:
            t_prev = np.asarray(warm[0], dtype=float)
            u_prev = np.asarray(warm[1], dtype=float)
        if len(t_prev) != len(nlp.t) or not np.allclose(t_prev, nlp.t):
            log.info("warm start grid mismatch (%d -> %d nodes); "
                     "re-interpolating controls", len(t_prev), len(nlp.t))
            U = np.stack([np.interp(nlp.t, t_prev, u_prev[:, j])
                          for j in range(u_prev.shape[1])], axis=1)
        else:
            U = u_prev.copy()
        if prob.u_bounds is not None:
            U = np.clip(U, prob.u_bounds[0], prob.u_bounds[1])
    else:
        raise ValidationError(f"unknown guess strategy {strategy!r}")

    traj = integrate_augmented(prob, nlp.t, U)
    n_proj = traj.info.get("psd_projections", 0)
    if n_proj:
        log.info("guess integration clamped covariance eigenvalues at "
                 "%d steps; feasibility degrades with the clamp size",
                 n_proj)
    z = nlp.pack_trajectory(traj)
    obj = nlp.objective(z)
    if not np.isfinite(obj):
        raise NumericalError("initial guess has non-finite objective")
    return z

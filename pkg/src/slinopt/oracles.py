"""Independent references: analytic LQG on linear plants, FD derivative checks.

The LQG solver here deliberately shares no code with the reduction pipeline.
It integrates the textbook control Riccati equation in the positive
(value-function) convention with a classic fourth-order Runge-Kutta scheme on
a fine grid, builds the certainty-equivalence loop, and evaluates the optimal
cost two ways:

* quadrature of the expected running cost through the joint covariance of
  (state, estimate) driven by the closed loop, and
* the reduced formula (mean cost plus covariance trace terms plus the
  filter correction).

The two routes rest on different identities of the same loop, so their
agreement is checked internally and the joint-covariance value is the one
reported.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError

__all__ = ["LqgSolution", "lqg_optimal_cost", "fd_check"]

_BLOW_UP = 1e12


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


@dataclass
class LqgSolution:
    """Optimal linear-Gaussian policy on a fine time grid.

    ``u(t) = K(t) xhat(t)`` with estimate gain ``L(t)``.  ``E`` is the
    negative of the value-function Riccati matrix, so ``E`` is negative
    semidefinite and ``Sigma`` positive semidefinite.
    """

    t: np.ndarray
    E: np.ndarray
    Sigma: np.ndarray
    K: np.ndarray
    L: np.ndarray
    m: np.ndarray
    u: np.ndarray
    cost: float
    cost_parts: dict = field(default_factory=dict)


def _rk4_path(rhs, y0, t):
    """Classic RK4 over every interval of ``t`` (monotone, any direction)."""
    out = np.empty((len(t),) + np.shape(y0))
    out[0] = y0
    y = np.asarray(y0, dtype=float)
    for j in range(len(t) - 1):
        h = t[j + 1] - t[j]
        k1 = rhs(t[j], y)
        k2 = rhs(t[j] + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(t[j] + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(t[j + 1], y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > _BLOW_UP:
            raise NumericalError(
                "Riccati/covariance blow-up; instance may not be "
                "stabilizable over this horizon",
                t=float(t[j + 1]),
            )
        out[j + 1] = y
    return out


def lqg_optimal_cost(params, h=0.005):
    """Solve the finite-horizon LQG problem for a linear test instance.

    ``params`` carries constant matrices (A, B, C, G, H), the quadratic cost
    (Q, R, Q_T), the horizon T and the Gaussian initial law.  ``h`` is the
    step of the pipeline under comparison; the oracle integrates with RK4 at
    step h/32 (gain tabulation at half that, so stage values never need
    interpolating).

    Returns an :class:`LqgSolution` on the h/32 grid.
    """
    A, B, C = params.A, params.B, params.C
    G, H = params.G, params.H
    Q, R, Q_T = params.Q, params.R, params.Q_T
    n = A.shape[0]
    T = float(params.T)

    HHt = H @ H.T
    if np.linalg.cond(HHt) > 1e12:
        raise ValidationError("observation noise HH^T is singular")
    S_f = C.T @ np.linalg.solve(HHt, C)
    W = B @ np.linalg.solve(R, B.T)
    GGt = G @ G.T

    steps = max(1, int(round(32.0 * T / float(h))))
    t = np.linspace(0.0, T, steps + 1)
    th = np.linspace(0.0, T, 2 * steps + 1)  # half grid for RK4 stages

    # Control Riccati, value-function convention: -Sdot = A'S + SA - SWS + Q.
    def s_rhs(_, S):
        return -_sym(A.T @ S + S @ A - S @ W @ S + Q)

    S_path = _rk4_path(s_rhs, _sym(Q_T), th[::-1])[::-1]

    # Filter Riccati forward from the initial covariance.
    def sig_rhs(_, Sig):
        return _sym(A @ Sig + Sig @ A.T - Sig @ S_f @ Sig + GGt)

    Sig_path = _rk4_path(sig_rhs, _sym(params.x0_cov), th)

    Rinv_Bt = np.linalg.solve(R, B.T)
    K_path = -np.einsum("ij,kjl->kil", Rinv_Bt, S_path)
    Ct_HHt_inv = np.linalg.solve(HHt.T, C).T  # C' (HH')^{-1}
    L_path = np.einsum("kij,jl->kil", Sig_path, Ct_HHt_inv)

    # Joint closed loop on z = (x, xhat): one RK4 pass carries the mean pair,
    # the 2n x 2n covariance, and both running-cost quadratures.
    two_n = 2 * n

    def stage(idx):
        Kk = K_path[idx]
        Lk = L_path[idx]
        Abig = np.zeros((two_n, two_n))
        Abig[:n, :n] = A
        Abig[:n, n:] = B @ Kk
        Abig[n:, :n] = Lk @ C
        Abig[n:, n:] = A + B @ Kk - Lk @ C
        Dbig = np.zeros((two_n, two_n))
        Dbig[:n, :n] = GGt
        Dbig[n:, n:] = Lk @ HHt @ Lk.T
        return Kk, Abig, Dbig, Sig_path[idx], -S_path[idx]

    def joint_rhs(idx, y):
        mb, Pb, _, _ = y
        Kk, Abig, Dbig, Sig, E = stage(idx)
        dm = Abig @ mb
        dP = _sym(Abig @ Pb + Pb @ Abig.T + Dbig)
        mx, mh = mb[:n], mb[n:]
        uo = Kk @ mh
        P11 = Pb[:n, :n]
        P22 = Pb[n:, n:]
        rate_joint = (
            mx @ Q @ mx
            + uo @ R @ uo
            + np.trace(Q @ P11)
            + np.trace(Kk.T @ R @ Kk @ P22)
        )
        rate_trace = (
            mx @ Q @ mx
            + uo @ R @ uo
            + np.trace(Q @ Sig)
            - np.trace(Sig @ S_f @ Sig @ E)
        )
        return dm, dP, rate_joint, rate_trace

    mb = np.concatenate([params.x0_mean, params.x0_mean])
    Pb = np.zeros((two_n, two_n))
    Pb[:n, :n] = params.x0_cov
    j_joint = 0.0
    j_trace = 0.0
    m_path = np.empty((steps + 1, n))
    u_path = np.empty((steps + 1, B.shape[1]))
    m_path[0] = mb[:n]
    u_path[0] = K_path[0] @ mb[n:]
    hstep = T / steps
    for j in range(steps):
        y = (mb, Pb, j_joint, j_trace)
        k1 = joint_rhs(2 * j, y)
        k2 = joint_rhs(2 * j + 1, tuple(a + 0.5 * hstep * b for a, b in zip(y, k1)))
        k3 = joint_rhs(2 * j + 1, tuple(a + 0.5 * hstep * b for a, b in zip(y, k2)))
        k4 = joint_rhs(2 * j + 2, tuple(a + hstep * b for a, b in zip(y, k3)))
        mb, Pb, j_joint, j_trace = tuple(
            a + (hstep / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
        )
        Pb = _sym(Pb)
        if not np.all(np.isfinite(Pb)) or np.max(np.abs(Pb)) > _BLOW_UP:
            raise NumericalError(
                "closed-loop covariance blow-up; instance may not be "
                "stabilizable over this horizon",
                t=float(t[j + 1]),
            )
        m_path[j + 1] = mb[:n]
        u_path[j + 1] = K_path[2 * j + 2] @ mb[n:]

    mT = mb[:n]
    term_mean = float(mT @ Q_T @ mT)
    cost_joint = j_joint + term_mean + float(np.trace(Q_T @ Pb[:n, :n]))
    cost_trace = j_trace + term_mean + float(np.trace(Q_T @ Sig_path[-1]))
    scale = 1.0 + abs(cost_joint)
    gap = abs(cost_joint - cost_trace) / scale
    if gap > 1e-6:
        raise NumericalError(
            "joint-covariance and trace-formula costs disagree "
            f"(relative gap {gap:.3e}); oracle inconsistent"
        )

    Sig_grid = Sig_path[::2]
    E_grid = -S_path[::2]
    eig_sig = np.linalg.eigvalsh(Sig_grid)
    eig_e = np.linalg.eigvalsh(E_grid)
    if eig_sig.min() < -1e-10 * max(1.0, float(np.abs(Sig_grid).max())):
        raise NumericalError("filter covariance grid lost positive semidefiniteness")
    if eig_e.max() > 1e-10 * max(1.0, float(np.abs(E_grid).max())):
        raise NumericalError("costate grid lost negative semidefiniteness")

    return LqgSolution(
        t=t,
        E=E_grid,
        Sigma=Sig_grid,
        K=K_path[::2],
        L=L_path[::2],
        m=m_path,
        u=u_path,
        cost=float(cost_joint),
        cost_parts={
            "running_joint": float(j_joint),
            "running_trace": float(j_trace),
            "terminal_mean": term_mean,
            "terminal_cov_joint": float(np.trace(Q_T @ Pb[:n, :n])),
            "terminal_cov_trace": float(np.trace(Q_T @ Sig_path[-1])),
            "cost_trace_route": float(cost_trace),
            "route_gap_rel": float(gap),
        },
    )


def fd_check(evaluator, jacobian, points, rel_step=None):
    """Compare an analytic Jacobian against central differences.

    ``evaluator(x) -> array`` and ``jacobian(x) -> (out, in)`` are evaluated
    at each point; steps scale with coordinate magnitude.  Returns a dict
    with the worst per-entry relative error and where it occurred, so a
    single corrupted entry is pinpointed rather than averaged away.
    """
    if rel_step is None:
        rel_step = float(np.finfo(float).eps) ** (1.0 / 3.0)
    worst = 0.0
    where = None
    per_point = []
    for idx, x in enumerate(points):
        x = np.asarray(x, dtype=float)
        jac = np.atleast_2d(np.asarray(jacobian(x), dtype=float))
        fd = np.empty_like(jac)
        for j in range(x.size):
            step = rel_step * max(1.0, abs(x[j]))
            xp = x.copy()
            xm = x.copy()
            xp[j] += step
            xm[j] -= step
            fp = np.asarray(evaluator(xp), dtype=float).ravel()
            fm = np.asarray(evaluator(xm), dtype=float).ravel()
            fd[:, j] = (fp - fm) / (2.0 * step)
        err = np.abs(jac - fd) / (1.0 + np.abs(fd))
        per_point.append(float(err.max()))
        if err.max() > worst:
            worst = float(err.max())
            r, c = np.unravel_index(int(np.argmax(err)), err.shape)
            where = (idx, int(r), int(c))
    return {
        "max_rel_error": worst,
        "worst_point": None if where is None else where[0],
        "worst_entry": None if where is None else (where[1], where[2]),
        "per_point": per_point,
    }

"""Structural identities of the linearized closed loop.

Two families of consistency checks certify that the reduced objective
accounts for the full closed-loop second moments:

* joint covariance: propagating the 2n x 2n covariance of (state,
  estimate) under the linearized policy/filter must reproduce the filter
  error covariance blockwise, cov(x) = cov(xhat) + Sigma and
  cov(x, xhat) = cov(xhat), and the closed-loop expected cost computed
  from those moments must equal the reduced objective.

* trace identity: d/dt tr(E P) = tr((Q + Kbar^T R Kbar) P)
  + tr(Sigma S_f Sigma E) with P = cov(xhat), which is what folds the
  estimate-fluctuation cost into the -tr(Sigma S_f Sigma E) integrand.

Both checks re-integrate the moment ODEs with RK4 on a refined grid, so
their residuals measure only the structure, not discretization error of
the trajectory being checked.  One caveat: when the costate has a terminal
boundary layer thinner than the refined grid (large terminal weights with
lagged control authority), numerically differentiating tr(E P) through the
layer is meaningless and the trace residuals inflate even though the
identity holds; the joint-covariance block residuals stay informative.
"""

import numpy as np

from .augment import fine_solution, innovation_weight, trapezoid_weights
from .sym import symmetrize

__all__ = ["joint_covariance_check", "trace_identity_check",
           "identity_report"]


def _tabulate(prob, t_nodes, U, refine):
    """Fine-grid tables of every coefficient entering the moment ODEs.

    The moment ODEs are integrated at twice the requested refinement, so
    the RK4 stages of the covariance passes (fine nodes and midpoints,
    index 2k is fine node k) land exactly on integrated values and no
    interpolation error enters the identity residuals.
    """
    traj, cost_red = fine_solution(prob, t_nodes, U, refine=2 * refine)
    tall = traj.t
    tf = tall[0::2]

    n = prob.n
    m_all = traj.m
    Sig = traj.Sigma_full
    E = traj.E_full
    u_all = traj.u

    A = prob.f_jac_x(tall, m_all, u_all)
    B = prob.f_jac_u(tall, m_all, u_all)
    Gm = prob.G(tall, m_all, u_all)
    GG = np.einsum("kij,klj->kil", Gm, Gm)
    K = np.linalg.solve(prob.cost.R,
                        np.einsum("kji,kjl->kil", B, E))
    Acl = A + np.einsum("kij,kjl->kil", B, K)
    Sf = innovation_weight(prob, tall, m_all)
    D_P = np.einsum("kij,kjl,klm->kim", Sig, Sf, Sig)

    if prob.p > 0:
        C = np.broadcast_to(prob.g_jac_x(tall, m_all),
                            (len(tall), prob.p, n))
        H = prob.H(tall, m_all)
        HHt = np.broadcast_to(np.einsum("kij,klj->kil", H, H),
                              (len(tall), prob.p, prob.p))
        CS = np.einsum("kij,kjl->kil", C, Sig)
        L = np.swapaxes(np.linalg.solve(HHt, CS), -1, -2)
        LC = np.einsum("kij,kjl->kil", L, C)
        LHHtLt = np.einsum("kij,kjl,kml->kim", L, HHt, L)
    else:
        C = np.zeros((len(tall), 0, n))
        L = np.zeros((len(tall), n, 0))
        LC = np.zeros((len(tall), n, n))
        LHHtLt = np.zeros((len(tall), n, n))

    return {
        "traj": traj, "cost_reduced": cost_red, "tf": tf, "tall": tall,
        "m": m_all, "Sigma": Sig, "E": E, "u": u_all,
        "A": A, "B": B, "GG": GG, "K": K, "Acl": Acl,
        "Sf": Sf, "D_P": D_P, "LC": LC, "LHHtLt": LHHtLt,
    }


def _lyap_rk4(tf, F, D, X0):
    """Integrate X' = F X + X F^T + D with RK4 on tabulated coefficients.

    F and D are tabulated at fine nodes and midpoints (2*Nf + 1 entries).
    Returns X at the Nf + 1 fine nodes.
    """
    Nf = len(tf) - 1
    X = np.array(X0, dtype=float)
    out = np.empty((Nf + 1,) + X.shape)
    out[0] = X

    def rhs(i, Xc):
        FX = F[i] @ Xc
        return FX + FX.T + D[i]

    for k in range(Nf):
        h = tf[k + 1] - tf[k]
        i0, i1, i2 = 2 * k, 2 * k + 1, 2 * k + 2
        k1 = rhs(i0, X)
        k2 = rhs(i1, X + 0.5 * h * k1)
        k3 = rhs(i1, X + 0.5 * h * k2)
        k4 = rhs(i2, X + h * k3)
        X = symmetrize(X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        out[k + 1] = X
    return out


def _estimate_cov(prob, tab):
    """cov(xhat) from P' = Acl P + P Acl^T + Sigma S_f Sigma, P(0) = 0."""
    n = prob.n
    return _lyap_rk4(tab["tf"], tab["Acl"], tab["D_P"], np.zeros((n, n)))


def _derivative(y, t):
    """Fourth-order central differences on a uniform grid.

    Returns (dy, lo, hi) where dy approximates y' on t[lo:hi]; falls back
    to second-order np.gradient when the grid is not uniform.
    """
    h = np.diff(t)
    if len(y) < 7 or not np.allclose(h, h[0], rtol=1e-9):
        return np.gradient(y, t)[1:-1], 1, len(y) - 1
    d = (y[:-4] - 8.0 * y[1:-3] + 8.0 * y[3:-1] - y[4:]) / (12.0 * h[0])
    return d, 2, len(y) - 2


def joint_covariance_check(prob, t_nodes, U, refine=8):
    """Propagate the joint (state, estimate) covariance and compare routes.

    Returns a dict of relative residuals: 'cross_rel' for
    cov(x, xhat) = cov(xhat), 'marginal_rel' for
    cov(x) = cov(xhat) + Sigma, 'estimate_rel' for the separately
    integrated cov(xhat) against the joint block, and 'cost_rel' for the
    closed-loop expected cost of the linearized system against the
    reduced objective, along with both cost values.
    """
    return _joint_from_tab(prob, _tabulate(prob, t_nodes, U, refine))


def _joint_from_tab(prob, tab):
    n = prob.n
    tf = tab["tf"]
    nq = len(tab["tall"])

    Abig = np.zeros((nq, 2 * n, 2 * n))
    Abig[:, :n, :n] = tab["A"]
    BK = np.einsum("kij,kjl->kil", tab["B"], tab["K"])
    Abig[:, :n, n:] = BK
    Abig[:, n:, :n] = tab["LC"]
    Abig[:, n:, n:] = tab["Acl"] - tab["LC"]
    Dbig = np.zeros((nq, 2 * n, 2 * n))
    Dbig[:, :n, :n] = tab["GG"]
    Dbig[:, n:, n:] = tab["LHHtLt"]

    P0 = np.zeros((2 * n, 2 * n))
    P0[:n, :n] = np.asarray(prob.x0_cov, dtype=float)
    Pbig = _lyap_rk4(tf, Abig, Dbig, P0)
    P = _estimate_cov(prob, tab)

    P11 = Pbig[:, :n, :n]
    P12 = Pbig[:, :n, n:]
    P22 = Pbig[:, n:, n:]
    Sig_f = tab["Sigma"][0::2]

    scale = 1.0 + np.max(np.linalg.norm(P11, axis=(1, 2)))
    cross_rel = np.max(np.linalg.norm(P12 - P22, axis=(1, 2))) / scale
    marginal_rel = np.max(
        np.linalg.norm(P11 - P22 - Sig_f, axis=(1, 2))) / scale
    estimate_rel = np.max(np.linalg.norm(P22 - P, axis=(1, 2))) / scale

    # closed-loop expected cost from the joint second moments
    m_f = tab["m"][0::2]
    u_f = tab["u"][0::2]
    K_f = tab["K"][0::2]
    w = trapezoid_weights(tf)
    l_mean = prob.cost.running(tf, m_f, u_f)
    l_state = np.einsum("ij,kij->k", prob.cost.Q, P11)
    KRK = np.einsum("kji,jl,klm->kim", K_f, prob.cost.R, K_f)
    l_ctrl = np.einsum("kij,kij->k", KRK, P22)
    cost_lin = float(w @ (l_mean + l_state + l_ctrl)) \
        + float(prob.cost.terminal(m_f[-1])) \
        + float(np.sum(prob.cost.Q_T * P11[-1]))
    cost_red = tab["cost_reduced"]["total"]
    cost_rel = abs(cost_lin - cost_red) / (1.0 + abs(cost_red))

    return {
        "cross_rel": float(cross_rel),
        "marginal_rel": float(marginal_rel),
        "estimate_rel": float(estimate_rel),
        "cost_rel": float(cost_rel),
        "cost_linearized": cost_lin,
        "cost_reduced": cost_red,
        "P_final": P[-1], "Sigma_final": Sig_f[-1], "Pbig_final": Pbig[-1],
    }


def trace_identity_check(prob, t_nodes, U, refine=8):
    """Residuals of d/dt tr(E P) = tr((Q + K^T R K) P) + tr(Sig S_f Sig E).

    'derivative_rel' differentiates tr(E P) numerically on the fine grid
    and compares pointwise; 'integral_rel' checks the integrated form
    tr(Q_T P(T)) + int rhs dt = 0 that converts estimate-fluctuation cost
    into the filter-term integrand.
    """
    return _trace_from_tab(prob, _tabulate(prob, t_nodes, U, refine))


def _trace_from_tab(prob, tab):
    tf = tab["tf"]
    P = _estimate_cov(prob, tab)
    E_f = tab["E"][0::2]
    K_f = tab["K"][0::2]
    D_f = tab["D_P"][0::2]

    phi = np.einsum("kij,kji->k", E_f, P)
    KRK = np.einsum("kji,jl,klm->kim", K_f, prob.cost.R, K_f)
    rhs = np.einsum("kij,kji->k", KRK + prob.cost.Q[None], P) \
        + np.einsum("kij,kji->k", D_f, E_f)
    dphi, lo, hi = _derivative(phi, tf)
    rhs_scale = 1.0 + np.max(np.abs(rhs))
    derivative_rel = np.max(np.abs(dphi - rhs[lo:hi])) / rhs_scale

    integral = float(np.trapezoid(rhs, tf))
    terminal = float(np.sum(-E_f[-1] * P[-1]))
    integral_rel = abs(terminal + integral) / (1.0 + abs(integral))

    return {
        "derivative_rel": float(derivative_rel),
        "integral_rel": float(integral_rel),
        "terminal_term": terminal,
        "integral_term": integral,
    }


def identity_report(prob, t_nodes, U, refine=8):
    """Run both identity checks from one shared fine integration."""
    tab = _tabulate(prob, t_nodes, U, refine)
    return {
        "joint_covariance": _joint_from_tab(prob, tab),
        "trace_identity": _trace_from_tab(prob, tab),
    }

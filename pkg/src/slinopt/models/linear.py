"""Linear-Gaussian test plants.

These small instances have known optimal solutions (classical LQG), so the
full nonlinear pipeline can be checked against an independent closed-form
route.  Dynamics and cost rates are deliberately gentle so that the
first-order transcription at coarse steps stays well inside the comparison
tolerances.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..problem import QuadraticCost, StochasticControlProblem

__all__ = ["LinearTestParams", "linear_problem", "builtin_linear_instances"]


@dataclass(frozen=True)
class LinearTestParams:
    name: str
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    G: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    Q_T: np.ndarray
    T: float
    x0_mean: np.ndarray
    x0_cov: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "G", "H", "Q", "R", "Q_T", "x0_mean", "x0_cov"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValidationError("A must be square")
        if self.B.ndim != 2 or self.B.shape[0] != n:
            raise ValidationError("B must be (n, m)")
        if self.C.ndim != 2 or self.C.shape[1] != n:
            raise ValidationError("C must be (p, n)")
        p = self.C.shape[0]
        if self.H.shape != (p, p):
            raise ValidationError("H must be (p, p)")
        if self.G.ndim != 2 or self.G.shape[0] != n:
            raise ValidationError("G must be (n, k)")
        if self.G.shape[1] > n:
            raise ValidationError("need k <= n noise channels")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def to_config(self):
        return {
            "model": "linear:" + self.name,
            "A": self.A.tolist(), "B": self.B.tolist(), "C": self.C.tolist(),
            "G": self.G.tolist(), "H": self.H.tolist(), "Q": self.Q.tolist(),
            "R": self.R.tolist(), "Q_T": self.Q_T.tolist(), "T_s": self.T,
            "x0_mean": self.x0_mean.tolist(), "x0_cov": self.x0_cov.tolist(),
        }


def _const(mat):
    mat = np.asarray(mat, dtype=float)

    def fn(t, x, *rest):
        x = np.asarray(x)
        return np.broadcast_to(mat, x.shape[:-1] + mat.shape)

    return fn


def linear_problem(params):
    A, B, C, H = params.A, params.B, params.C, params.H

    def f(t, x, u):
        return np.asarray(x) @ A.T + np.asarray(u) @ B.T

    def g(t, x):
        return np.asarray(x) @ C.T

    cost = QuadraticCost.build(params.n, params.m, Q=params.Q, R=params.R,
                               Q_T=params.Q_T)
    info = {
        "kind": "linear",
        "config": params.to_config(),
        "hold_u": np.zeros(params.m),
    }
    return StochasticControlProblem(
        n=params.n, m=params.m, k=params.G.shape[1], p=C.shape[0],
        f=f, f_jac_x=_const(A), f_jac_u=_const(B), G=_const(params.G),
        g=g, g_jac_x=_const(C), H=_const(H), cost=cost, T=params.T,
        x0_mean=params.x0_mean, x0_cov=params.x0_cov,
        model_info=info, name="linear:" + params.name)


def builtin_linear_instances():
    """Three reference plants: scalar, 2-state, 4-state partially observed."""
    scalar = LinearTestParams(
        name="scalar_well",
        A=[[-0.10]], B=[[0.20]], C=[[1.0]],
        G=[[0.30]], H=[[0.50]],
        Q=[[0.10]], R=[[1.0]], Q_T=[[0.0]],
        T=2.0, x0_mean=[0.8], x0_cov=[[0.04]])

    pair = LinearTestParams(
        name="relax_pair",
        A=[[-0.15, 0.08], [0.05, -0.20]],
        B=[[0.0], [0.35]],
        C=[[1.0, 0.0]],
        G=[[0.05, 0.0], [0.0, 0.20]],
        H=[[0.40]],
        Q=[[0.20, 0.0], [0.0, 0.05]], R=[[1.0]],
        Q_T=[[0.10, 0.0], [0.0, 0.02]],
        T=2.0, x0_mean=[0.6, -0.2], x0_cov=[[0.02, 0.0], [0.0, 0.01]])

    chain = LinearTestParams(
        name="diffuse_chain",
        A=[[-0.15, 0.10, 0.0, 0.0],
           [0.05, -0.20, 0.10, 0.0],
           [0.0, 0.10, -0.10, 0.05],
           [0.05, 0.0, 0.10, -0.25]],
        B=[[0.0, 0.0], [0.35, 0.0], [0.0, 0.0], [0.0, 0.30]],
        C=[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        G=np.diag([0.05, 0.20, 0.05, 0.15]),
        H=[[0.40, 0.0], [0.0, 0.50]],
        Q=np.diag([0.20, 0.05, 0.15, 0.05]), R=np.eye(2),
        Q_T=np.diag([0.08, 0.02, 0.06, 0.02]),
        T=2.0, x0_mean=[0.6, -0.2, 0.4, 0.1], x0_cov=0.02 * np.eye(4))

    return {p.name: p for p in (scalar, pair, chain)}

"""Problem containers and policy artifacts.

A control problem couples a controlled diffusion

    dx = f(t, x, u) dt + G(t, x, u) dw,      x(0) ~ N(x0_mean, x0_cov)

with noisy observations dy = g(t, x) dt + H(t) dv and a quadratic cost.
All model callables are vectorized: they accept states/controls with an
arbitrary leading batch axis and broadcast a scalar or batched t.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from . import sym

__all__ = [
    "QuadraticCost",
    "StochasticControlProblem",
    "PolicyArtifact",
    "evaluate_policy",
    "cost_expectation_terms",
]


def _as_matrix(x, shape, name):
    a = np.asarray(x, dtype=float)
    if a.shape != shape:
        raise ValidationError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


def _check_psd(mat, name, tol=1e-10):
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValidationError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(mat)
    if w[0] < -tol * max(1.0, abs(w[-1])):
        raise ValidationError(f"{name} must be positive semidefinite (min eig {w[0]:.3e})")


@dataclass(frozen=True)
class QuadraticCost:
    """Running cost u'Ru + x'Qx + q'x + r'u and terminal x'Q_T x + q_T'x.

    An optional reference path folds a tracking cost (x - x_ref)'Q(x - x_ref)
    into the linear and constant terms, so `running` returns the tracking
    value exactly (constant included).  x_ref must map a scalar or (B,) time
    array to (n,) or (B, n).
    """

    Q: np.ndarray
    R: np.ndarray
    q: np.ndarray
    r: np.ndarray
    Q_T: np.ndarray
    q_T: np.ndarray
    x_ref: object = None
    x_ref_T: np.ndarray = None

    @classmethod
    def build(cls, n, m, Q=None, R=None, q=None, r=None, Q_T=None, q_T=None,
              x_ref=None, x_ref_T=None):
        Q = np.zeros((n, n)) if Q is None else _as_matrix(Q, (n, n), "Q")
        R = np.eye(m) if R is None else _as_matrix(R, (m, m), "R")
        q = np.zeros(n) if q is None else _as_matrix(q, (n,), "q")
        r = np.zeros(m) if r is None else _as_matrix(r, (m,), "r")
        Q_T = np.zeros((n, n)) if Q_T is None else _as_matrix(Q_T, (n, n), "Q_T")
        q_T = np.zeros(n) if q_T is None else _as_matrix(q_T, (n,), "q_T")
        _check_psd(Q, "Q")
        _check_psd(Q_T, "Q_T")
        _check_psd(R, "R")
        if np.linalg.eigvalsh(R)[0] <= 0:
            raise ValidationError("R must be positive definite")
        if x_ref_T is not None:
            x_ref_T = _as_matrix(x_ref_T, (n,), "x_ref_T")
        return cls(Q=Q, R=R, q=q, r=r, Q_T=Q_T, q_T=q_T, x_ref=x_ref, x_ref_T=x_ref_T)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.R.shape[0]

    def ref(self, t):
        if self.x_ref is None:
            return None
        return np.asarray(self.x_ref(t), dtype=float)

    def running(self, t, x, u):
        """l(t, x, u), batched over leading axes of x and u."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        ref = self.ref(t)
        dx = x if ref is None else x - ref
        val = np.einsum("...i,ij,...j->...", dx, self.Q, dx)
        val = val + np.einsum("...i,ij,...j->...", u, self.R, u)
        val = val + x @ self.q + u @ self.r
        return val

    def terminal(self, x):
        x = np.asarray(x, dtype=float)
        dx = x if self.x_ref_T is None else x - self.x_ref_T
        return np.einsum("...i,ij,...j->...", dx, self.Q_T, dx) + x @ self.q_T


def cost_expectation_terms(cost, mean, cov, t=None, u=None, kind="running"):
    """Expected quadratic cost of x ~ N(mean, cov) under a deterministic u.

    kind="running" returns l(t, mean, u) + tr(Q cov); kind="terminal"
    returns the terminal analog.  Batched over leading axes of mean/cov/u.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if kind == "running":
        if u is None:
            raise ValidationError("running cost expectation needs u")
        base = cost.running(t, mean, u)
        return base + np.einsum("ij,...ji->...", cost.Q, cov)
    if kind == "terminal":
        return cost.terminal(mean) + np.einsum("ij,...ji->...", cost.Q_T, cov)
    raise ValidationError(f"unknown kind {kind!r}")


@dataclass
class StochasticControlProblem:
    """Partially observed controlled diffusion with quadratic cost.

    f, f_jac_x, f_jac_u, G are callables of (t, x, u); g, g_jac_x, H of
    (t, x).  All broadcast over a leading batch axis of x/u.  H may depend
    on t only; observation noise must stay nonsingular.
    """

    n: int
    m: int
    k: int
    p: int
    f: object
    f_jac_x: object
    f_jac_u: object
    G: object
    g: object
    g_jac_x: object
    H: object
    cost: QuadraticCost
    T: float
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    u_bounds: tuple = None
    terminal_mean_idx: np.ndarray = None
    terminal_mean_val: np.ndarray = None
    state_clamp: tuple = None          # (indices, lo, hi), applied only in simulation
    model_info: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.x0_mean = _as_matrix(self.x0_mean, (self.n,), "x0_mean")
        self.x0_cov = _as_matrix(self.x0_cov, (self.n, self.n), "x0_cov")
        _check_psd(self.x0_cov, "x0_cov")
        if self.cost.n != self.n or self.cost.m != self.m:
            raise ValidationError("cost dimensions disagree with the problem")
        if not (self.T > 0):
            raise ValidationError("horizon T must be positive")
        if self.u_bounds is not None:
            lo = _as_matrix(self.u_bounds[0], (self.m,), "u_bounds[0]")
            hi = _as_matrix(self.u_bounds[1], (self.m,), "u_bounds[1]")
            if np.any(lo >= hi):
                raise ValidationError("u_bounds must satisfy lo < hi")
            self.u_bounds = (lo, hi)
        if self.terminal_mean_idx is not None:
            self.terminal_mean_idx = np.asarray(self.terminal_mean_idx, dtype=int)
            self.terminal_mean_val = np.asarray(self.terminal_mean_val, dtype=float)
            if self.terminal_mean_idx.shape != self.terminal_mean_val.shape:
                raise ValidationError("terminal mean constraint index/value mismatch")
            if np.any(self.terminal_mean_idx < 0) or np.any(self.terminal_mean_idx >= self.n):
                raise ValidationError("terminal mean constraint index out of range")

    def check_dimensions(self, rng=None):
        """Evaluate every callable on probe points and verify shapes."""
        rng = np.random.default_rng(0) if rng is None else rng
        x = rng.standard_normal((3, self.n))
        u = rng.standard_normal((3, self.m))
        t = 0.3 * self.T
        checks = {
            "f": (self.f(t, x, u), (3, self.n)),
            "f_jac_x": (self.f_jac_x(t, x, u), (3, self.n, self.n)),
            "f_jac_u": (self.f_jac_u(t, x, u), (3, self.n, self.m)),
            "G": (self.G(t, x, u), (3, self.n, self.k)),
            "g": (self.g(t, x), (3, self.p)),
            "g_jac_x": (self.g_jac_x(t, x), (3, self.p, self.n)),
        }
        for name, (val, shape) in checks.items():
            val = np.asarray(val)
            if val.shape != shape:
                raise ValidationError(f"{name} returned shape {val.shape}, expected {shape}")
            if not np.all(np.isfinite(val)):
                raise ValidationError(f"{name} returned non-finite values on probe points")
        Hm = np.asarray(self.H(t, x[:1]))
        if Hm.shape[-2:] != (self.p, self.p):
            raise ValidationError(f"H returned shape {Hm.shape}, expected (..., {self.p}, {self.p})")
        return True

    def param_hash(self):
        doc = self.model_info.get("config") or {"name": self.name, "n": self.n, "m": self.m}
        return config_hash(doc)


def config_hash(doc):
    """Stable sha256 of a JSON-serializable config document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class PolicyArtifact:
    """Everything needed to run u(t) = u_ff(t) + K(t) (xhat - m_mean(t)).

    Grids live on the solve's time nodes; evaluation between nodes is
    piecewise linear.  `extras` may carry diagnostic grids (e.g. the
    predicted error covariance).
    """

    t: np.ndarray
    u_ff: np.ndarray       # (N+1, m)
    m_mean: np.ndarray     # (N+1, n)
    K: np.ndarray          # (N+1, m, n)
    L: np.ndarray          # (N+1, n, p)
    Sigma: np.ndarray = None   # (N+1, n, n), predicted error covariance
    status: str = "unknown"
    seeds: dict = field(default_factory=dict)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if self.t.ndim != 1 or self.t.size < 2:
            raise ValidationError("policy grid needs at least two nodes")
        if np.any(np.diff(self.t) <= 0):
            raise ValidationError("policy time grid must be strictly increasing")
        N = self.t.size
        for name in ("u_ff", "m_mean", "K", "L"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape[0] != N:
                raise ValidationError(f"{name} grid length {arr.shape[0]} != {N}")
            setattr(self, name, arr)
        for name in ("K", "L"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} grid has non-finite entries")
        if self.Sigma is not None:
            S = np.asarray(self.Sigma, dtype=float)
            if S.shape != (N, self.n, self.n):
                raise ValidationError(
                    f"Sigma grid shape {S.shape} != ({N}, n, n)")
            if np.abs(S - np.swapaxes(S, -1, -2)).max() > 1e-9:
                raise ValidationError("Sigma grid must be symmetric")
            eigs = np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, -1, -2)))
            if eigs.min() < -1e-8:
                raise ValidationError("Sigma grid must be PSD at every node")
            self.Sigma = S

    @property
    def n(self):
        return self.m_mean.shape[1]

    @property
    def m(self):
        return self.u_ff.shape[1]

    def interp(self, name, t_query):
        """Piecewise-linear sample of one grid at times inside [t0, T]."""
        t_query = np.asarray(t_query, dtype=float)
        lo, hi = self.t[0], self.t[-1]
        if np.any(t_query < lo - 1e-12) or np.any(t_query > hi + 1e-12):
            raise ValidationError(
                f"query time outside policy domain [{lo:g}, {hi:g}]")
        tq = np.clip(t_query, lo, hi)
        grid = getattr(self, name)
        idx = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, self.t.size - 2)
        t0 = self.t[idx]
        w = (tq - t0) / (self.t[idx + 1] - t0)
        w = w.reshape(w.shape + (1,) * (grid.ndim - 1))
        return (1.0 - w) * grid[idx] + w * grid[idx + 1]

    def save(self, base):
        """Write <base>.json + <base>.npz (deterministic bytes)."""
        from .io import save_arrays_npz

        base = str(base)
        meta = {
            "kind": "policy",
            "status": self.status,
            "seeds": self.seeds,
            "config_hash": self.config_hash,
            "meta": self.meta,
            "arrays": "see companion .npz",
            "layout": {
                "t": "time nodes (N+1,)",
                "u_ff": "feedforward control (N+1, m)",
                "m_mean": "mean trajectory (N+1, n)",
                "K": "feedback gains (N+1, m, n)",
                "L": "filter gains (N+1, n, p)",
                "Sigma": "error covariance (N+1, n, n), when present",
            },
        }
        with open(base + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        arrays = {"t": self.t, "u_ff": self.u_ff, "m_mean": self.m_mean,
                  "K": self.K, "L": self.L}
        if self.Sigma is not None:
            arrays["Sigma"] = self.Sigma
        for key, val in self.extras.items():
            arrays["extra_" + key] = np.asarray(val)
        save_arrays_npz(base + ".npz", arrays)
        return base + ".json", base + ".npz"

    @classmethod
    def load(cls, base):
        base = str(base)
        if base.endswith(".json") or base.endswith(".npz"):
            base = base.rsplit(".", 1)[0]
        with open(base + ".json") as fh:
            meta = json.load(fh)
        with np.load(base + ".npz") as data:
            arrays = {k: data[k] for k in data.files}
        extras = {k[len("extra_"):]: v for k, v in arrays.items() if k.startswith("extra_")}
        return cls(
            t=arrays["t"], u_ff=arrays["u_ff"], m_mean=arrays["m_mean"],
            K=arrays["K"], L=arrays["L"], Sigma=arrays.get("Sigma"),
            status=meta.get("status", "unknown"),
            seeds=meta.get("seeds", {}), config_hash=meta.get("config_hash", ""),
            meta=meta.get("meta", {}), extras=extras)


def evaluate_policy(policy, t, xhat):
    """u = u_ff(t) + K(t) (xhat - m_mean(t)); no clamping.

    t may be scalar or (B,); xhat may be (n,) or (B, n).  Raises
    ValidationError outside the policy's time domain.
    """
    xhat = np.asarray(xhat, dtype=float)
    u0 = policy.interp("u_ff", t)
    mm = policy.interp("m_mean", t)
    K = policy.interp("K", t)
    return u0 + np.einsum("...ij,...j->...i", K, xhat - mm)

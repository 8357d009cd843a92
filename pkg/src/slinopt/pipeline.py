"""End-to-end solve: transcribe a problem, optimize, package the policy.

One call takes a StochasticControlProblem to a PolicyArtifact carrying
the feedforward control, planned mean, feedback and filter gains, and
the predicted error covariance, plus the solver diagnostics needed to
judge the run.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import sym
from .augment import gains_along
from .errors import ValidationError
from .problem import PolicyArtifact
from .solver import SolverConfig, solve_nlp
from .transcription import TranscribedNLP, initial_guess, transcribe

__all__ = ["Solution", "solve_problem", "interpolate_onto"]

log = logging.getLogger(__name__)


@dataclass
class Solution:
    """A solved instance: the policy plus everything behind it."""

    policy: PolicyArtifact
    nlp: TranscribedNLP
    z: np.ndarray
    status: str
    objective: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def trajectory(self):
        return self.nlp.trajectory(self.z)


def interpolate_onto(nlp, t_old, traj_grids):
    """Resample (m, Sigma, E, u) node grids onto ``nlp``'s time axis.

    Used for warm starts whose grid disagrees with the target
    transcription; piecewise linear per component.
    """
    m, Sig, E, u = traj_grids
    zt = np.empty((nlp.N + 1, nlp.block))
    col = 0
    for grid in (m, Sig, E, u):
        grid = np.asarray(grid, dtype=float)
        flat = grid.reshape(len(t_old), -1)
        for j in range(flat.shape[1]):
            zt[:, col] = np.interp(nlp.t, t_old, flat[:, j])
            col += 1
    return zt.ravel()


def solve_problem(prob, h=0.002, N=None, config=None, guess=None,
                  guess_strategy="hold", warm=None, seeds=None):
    """Transcribe and solve ``prob``; return a Solution.

    ``h`` sets the grid (N = round(T/h)) unless ``N`` is given
    explicitly.  ``warm`` may be a prior Solution or PolicyArtifact used
    as the starting point; a grid mismatch re-interpolates with a logged
    notice.  ``guess`` (a raw decision vector) wins over ``warm``, which
    wins over ``guess_strategy``.
    """
    if N is None:
        N = int(round(prob.T / h))
    if N < 2:
        raise ValidationError("grid needs at least 2 intervals")
    nlp = transcribe(prob, N)

    if guess is not None:
        z0 = np.asarray(guess, dtype=float)
    elif warm is not None:
        z0 = _warm_vector(nlp, warm)
    else:
        z0 = initial_guess(nlp, strategy=guess_strategy)

    cfg = config or SolverConfig()
    z, status, diag = solve_nlp(nlp, z0, cfg)
    traj = nlp.trajectory(z)
    K, L = gains_along(prob, traj)
    Sig = sym.unpack(traj.Sigma, nlp.n)
    # clip roundoff-negative eigenvalues so the artifact invariant holds
    w, V = np.linalg.eigh(0.5 * (Sig + np.swapaxes(Sig, -1, -2)))
    Sig = (V * np.clip(w, 0.0, None)[..., None, :]) @ np.swapaxes(V, -1, -2)
    policy = PolicyArtifact(
        t=nlp.t, u_ff=traj.u, m_mean=traj.m, K=K, L=L, Sigma=Sig,
        status=status, seeds=dict(seeds or {}),
        config_hash=prob.param_hash(),
        meta={
            "model": prob.name,
            "N": N,
            "h": nlp.h,
            "objective": float(nlp.objective(z)) if status != "diverged"
            else float("nan"),
            "violation": diag.get("violation"),
            "projected_gradient": diag.get("projected_gradient"),
            "outer_iterations": diag.get("outer_iterations"),
            "wall_time_s": diag.get("wall_time_s"),
        })
    objective = policy.meta["objective"]
    return Solution(policy=policy, nlp=nlp, z=z, status=status,
                    objective=objective, diagnostics=diag)


def _warm_vector(nlp, warm):
    """Decision vector from a prior Solution or PolicyArtifact."""
    if isinstance(warm, Solution):
        if warm.nlp.N == nlp.N and np.allclose(warm.nlp.t, nlp.t):
            return warm.z.copy()
        log.info("warm start re-interpolated from N=%d onto N=%d",
                 warm.nlp.N, nlp.N)
        traj = warm.trajectory
        return interpolate_onto(nlp, warm.nlp.t,
                                (traj.m, traj.Sigma, traj.E, traj.u))
    if isinstance(warm, PolicyArtifact):
        # a policy has no E grid; the warm strategy rebuilds the state
        # blocks by integrating the scheme along the prior controls
        return initial_guess(nlp, strategy="warm", warm=warm)
    raise ValidationError("warm must be a Solution or PolicyArtifact")

"""KL control with a finite input set.

With ``𝕎 ⊆ 𝕌`` the optimal action law at ``(k, x)`` is
``Π_k*(u|x) ∝ P(w_k = u) Z(k+1, f(x, u))``; the desirabilities are
estimated by Monte Carlo, one shared set of noise paths for all actions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CostSchedule,
    DomainError,
    DynamicsModel,
    EstimationFailedError,
    KLControlError,
    NoiseModel,
    RolloutDivergedError,
    Trajectory,
)
from .path_integral import inverse_cdf_pick, log_desirability_batch, normalize_log_weights
from .rng import RngStream

# actions whose noise probability falls below this are never rolled out
MIN_PMF = 1e-300


@dataclass(frozen=True, eq=False)
class DiscreteInputSet:
    actions: np.ndarray  # (r, m), declared order

    def __post_init__(self):
        if self.actions.ndim != 2 or self.actions.shape[0] == 0:
            raise DomainError("action set must be a nonempty (r, m) array")
        if len(np.unique(self.actions, axis=0)) != self.actions.shape[0]:
            raise DomainError("action set contains duplicates")

    @classmethod
    def of(cls, actions) -> DiscreteInputSet:
        a = np.asarray(actions, dtype=float)
        return cls(a[:, None] if a.ndim == 1 else a)

    def __len__(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True, eq=False)
class DiscreteActionPolicy:
    actions: np.ndarray
    probabilities: np.ndarray
    log_z_next: np.ndarray  # estimated log Z(k+1, f(x, u)); -inf where not evaluated


@dataclass(frozen=True, eq=False)
class ClosedLoopResult:
    trajectory: Trajectory
    policies: np.ndarray        # (N, r) action probabilities per stage
    action_indices: np.ndarray  # (N,)


def discretized_gaussian_pmf(support, sigma: float) -> NoiseModel:
    """``P(w) ∝ exp(-w·w / (2σ²))`` on a finite support."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    pts = DiscreteInputSet.of(support).actions
    lw = -np.sum(pts * pts, axis=1) / (2.0 * sigma**2)
    top = lw.max()
    log_norm = top + np.log(np.sum(np.exp(lw - top)))
    return NoiseModel.discrete(pts, log_probs=lw - log_norm)


def _action_pmf(noise: NoiseModel, k: int, actions: np.ndarray) -> np.ndarray:
    support, lp = noise.support, noise.log_pmf(k)
    match = np.all(actions[:, None, :] == support[None, :, :], axis=-1)  # (r, |W|)
    missing = ~match.any(axis=0)
    if missing.any():
        raise DomainError(f"noise support point {support[missing][0]} is not an admissible action")
    return np.where(match, lp[None, :], -np.inf).max(axis=1)


def successors_distinct(dyn: DynamicsModel, x, actions) -> bool:
    """True if ``u -> f(x, u)`` is injective on the given actions."""
    nxt = dyn(np.broadcast_to(np.asarray(x, dtype=float), (len(actions), dyn.n)), np.asarray(actions))
    return len(np.unique(nxt, axis=0)) == len(actions)


def optimal_action_probs(dyn: DynamicsModel, noise: NoiseModel, costs: CostSchedule, k: int, x,
                         n_samples: int, rng: RngStream, actions=None, workers: int = 1) -> DiscreteActionPolicy:
    """Optimal action probabilities at ``(k, x)``.

    Actions outside the noise support get probability zero and are not
    rolled out. ``actions`` defaults to the noise support.
    """
    if noise.kind != "discrete":
        raise ValueError("need a discrete noise model")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    N = costs.horizon
    if not 0 <= k < N:
        raise ValueError(f"stage {k} outside 0..{N - 1}")
    acts = DiscreteInputSet.of(noise.support if actions is None else actions).actions
    x = np.asarray(x, dtype=float).reshape(dyn.n)
    log_pmf = _action_pmf(noise, k, acts)
    active = np.flatnonzero(log_pmf >= np.log(MIN_PMF))
    log_z = np.full(len(acts), -np.inf)
    starts = dyn(np.broadcast_to(x, (len(active), dyn.n)), acts[active])
    if not np.all(np.isfinite(starts)):
        raise RolloutDivergedError(k + 1)
    log_z[active] = log_desirability_batch(dyn, noise, costs, k + 1, starts, n_samples, rng, workers)
    log_w = np.full(len(acts), -np.inf)
    log_w[active] = log_pmf[active] + log_z[active]
    try:
        probs = normalize_log_weights(log_w)
    except EstimationFailedError:
        raise EstimationFailedError("every action weight underflowed", stage=k) from None
    return DiscreteActionPolicy(acts, probs, log_z)


def run_closed_loop(dyn: DynamicsModel, noise: NoiseModel, costs: CostSchedule, x0, n_samples: int,
                    rng: RngStream, actions=None, workers: int = 1) -> ClosedLoopResult:
    """Receding closed loop over the whole horizon.

    At every stage the action law is re-estimated at the current state with
    fresh noise paths (stream ``rng/("estimate", k)``) and one action is
    drawn by inverse-CDF with uniform ``k`` of stream ``rng/"select"``.
    """
    N = costs.horizon
    acts = DiscreteInputSet.of(noise.support if actions is None else actions).actions
    x = np.asarray(x0, dtype=float).reshape(dyn.n)
    states = np.empty((N + 1, dyn.n))
    states[0] = x
    controls = np.empty((N, acts.shape[1]))
    policies = np.empty((N, len(acts)))
    picks = np.empty(N, dtype=np.int64)
    uniforms = rng.substream("select").uniforms(N)[0]
    for k in range(N):
        try:
            pol = optimal_action_probs(dyn, noise, costs, k, x, n_samples, rng.substream("estimate", k),
                                       acts, workers)
        except KLControlError as err:
            if getattr(err, "stage", None) is None:
                err.stage = k
            raise
        j = inverse_cdf_pick(pol.probabilities, uniforms[k])
        x = dyn(x, acts[j])
        if not np.all(np.isfinite(x)):
            raise RolloutDivergedError(k + 1)
        states[k + 1] = x
        controls[k] = acts[j]
        policies[k] = pol.probabilities
        picks[k] = j
    return ClosedLoopResult(Trajectory(states, controls, 0), policies, picks)

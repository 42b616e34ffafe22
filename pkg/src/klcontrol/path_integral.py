"""Monte-Carlo desirability estimates and sampling of the optimal policy.

``Z(k, x) = E[exp(-Σ_{s=k}^{N} ℓ_s(x̄_s)) | x̄_k = x]`` is estimated from
noise-driven rollouts, entirely in the log domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CostSchedule,
    DynamicsModel,
    EstimationFailedError,
    NoiseModel,
    sampled_path_costs,
)
from .rng import RngStream

DEFAULT_CANDIDATES = 64
DEFAULT_INNER_SAMPLES = 256


@dataclass(frozen=True)
class DesirabilityEstimate:
    log_z: float
    sample_count: int
    log_weight_spread: float
    std_error_log: float

    @property
    def value(self) -> float:
        """Estimated ``V(k, x) = -log Z(k, x)``."""
        return -self.log_z


@dataclass(frozen=True)
class PolicySample:
    control: np.ndarray
    candidate_count: int
    normalized_weights: np.ndarray
    effective_sample_size: float
    candidates: np.ndarray
    selected: int


def log_mean_exp(log_w: np.ndarray, axis: int = -1) -> np.ndarray:
    """``log(mean(exp(log_w)))`` along ``axis``, shifted by the maximum."""
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(log_w - top), axis=axis, keepdims=True)) + top
    return np.squeeze(out, axis=axis)


def summarize_log_weights(log_w: np.ndarray) -> DesirabilityEstimate:
    """Log-mean-exp of log-weights with a delta-method standard error.

    The standard error of ``log mean(W)`` is approximated by
    ``sd(W) / (sqrt(S) * mean(W))``, computed on weights rescaled by the
    largest one.
    """
    log_w = np.asarray(log_w, dtype=float).reshape(-1)
    S = log_w.size
    if S < 1:
        raise ValueError("need at least one sample")
    if np.isnan(log_w).any():
        raise EstimationFailedError("NaN log-weight")
    finite = log_w[np.isfinite(log_w)]
    if finite.size == 0:
        raise EstimationFailedError(f"all {S} path weights are zero")
    top = finite.max()
    log_z = float(log_mean_exp(log_w))
    spread = float(top - log_w.min())
    if S == 1:
        return DesirabilityEstimate(log_z, 1, spread, float("inf"))
    r = np.exp(log_w - top)
    se = float(np.std(r, ddof=1) / (np.sqrt(S) * r.mean()))
    return DesirabilityEstimate(log_z, S, spread, se)


def estimate_log_desirability(dyn: DynamicsModel, noise: NoiseModel, costs: CostSchedule, k: int, x,
                              n_samples: int, rng: RngStream, workers: int = 1) -> DesirabilityEstimate:
    """Estimate ``log Z(k, x)`` from ``n_samples`` noise-driven paths."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    N = costs.horizon
    if not 0 <= k <= N:
        raise ValueError(f"stage {k} outside 0..{N}")
    x = np.asarray(x, dtype=float).reshape(dyn.n)
    if k == N:
        # Z(N, x) = exp(-ℓ_N(x)) exactly
        log_z = -float(costs.stage(N, x))
        if not np.isfinite(log_z) and log_z != -np.inf:
            raise EstimationFailedError("non-finite terminal cost")
        if log_z == -np.inf:
            raise EstimationFailedError("terminal weight is zero")
        return DesirabilityEstimate(log_z, 1, 0.0, 0.0)
    c = sampled_path_costs(dyn, noise, costs, k, x[None, :], n_samples, rng, workers)
    return summarize_log_weights(-c[0])


def log_desirability_batch(dyn: DynamicsModel, noise: NoiseModel, costs: CostSchedule, k: int, starts,
                           n_samples: int, rng: RngStream, workers: int = 1) -> np.ndarray:
    """``log Z(k, ·)`` estimates at several states using common random numbers.

    Every start is propagated with the same ``n_samples`` noise paths. Returns
    an array of length ``len(starts)``; entries may be ``-inf`` when every
    path from that start has infinite cost.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    N = costs.horizon
    if k == N:
        return -costs.stage(N, starts)
    c = sampled_path_costs(dyn, noise, costs, k, starts, n_samples, rng, workers)
    if np.isnan(c).any():
        raise EstimationFailedError("NaN path cost", stage=k)
    return log_mean_exp(-c, axis=1)


def normalize_log_weights(log_w: np.ndarray) -> np.ndarray:
    """Softmax with zero weight for ``-inf`` entries."""
    log_w = np.asarray(log_w, dtype=float)
    if not np.isfinite(log_w).any():
        raise EstimationFailedError("all weights are zero")
    top = log_w[np.isfinite(log_w)].max()
    w = np.exp(log_w - top)
    return w / w.sum()


def inverse_cdf_pick(probs: np.ndarray, u: float) -> int:
    """Index ``i`` with ``cdf[i-1] <= u < cdf[i]``, scanning in declared order."""
    cdf = np.cumsum(np.asarray(probs, dtype=np.longdouble))
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= len(cdf):
        # u landed past a total that rounded below one: take the last
        # entry with positive mass
        idx = int(np.flatnonzero(np.asarray(probs) > 0)[-1])
    return idx


def sample_optimal_control_snis(dyn: DynamicsModel, noise: NoiseModel, costs: CostSchedule, k: int, x,
                                rng: RngStream, n_candidates: int = DEFAULT_CANDIDATES,
                                inner_samples: int = DEFAULT_INNER_SAMPLES, workers: int = 1) -> PolicySample:
    """Draw one control from ``π_k*(·|x) ∝ ρ_{w_k}(u) Z(k+1, f(x, u))``.

    Candidates come from the noise law; each is weighted by its estimated
    desirability (all candidates share the same inner noise paths) and one
    is selected by inverse-CDF over the normalized weights.
    """
    if n_candidates < 2:
        raise ValueError("need at least two candidates")
    if noise.kind != "gaussian":
        raise ValueError("SNIS policy sampling needs a continuous noise model")
    N = costs.horizon
    if not 0 <= k < N:
        raise ValueError(f"stage {k} outside 0..{N - 1}")
    x = np.asarray(x, dtype=float).reshape(dyn.n)
    cand = noise.sample(k, k + 1, rng.substream("candidates"), n_candidates)[:, 0, :]
    nxt = dyn(np.broadcast_to(x, (n_candidates, dyn.n)), cand)
    if not np.all(np.isfinite(nxt)):
        raise EstimationFailedError("non-finite candidate successor", stage=k)
    log_w = log_desirability_batch(dyn, noise, costs, k + 1, nxt, inner_samples, rng.substream("inner"), workers)
    weights = normalize_log_weights(log_w)
    u = rng.substream("select").uniforms(1)[0, 0]
    j = inverse_cdf_pick(weights, u)
    ess = float(1.0 / np.sum(weights**2))
    return PolicySample(cand[j].copy(), n_candidates, weights, ess, cand, j)

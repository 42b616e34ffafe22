"""Problem objects for discrete-time KL control and noise-driven rollouts.

The controlled system is ``x_{k+1} = f(x_k, u_k)``; its reference process is
the noise-driven system ``x̄_{k+1} = f(x̄_k, w_k)``. All dynamics and cost
callables are evaluated on batches: states have shape ``(..., n)`` and
inputs ``(..., m)``.

Bijectivity of ``u -> f(x, u)`` (with non-vanishing Jacobian of the inverse)
is required for uniqueness of the continuous-input optimal policy. It is not
checkable for black-box ``f`` and is left to the caller.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .rng import RngStream

# Monte-Carlo work is split into blocks of this many sample ids. The block
# size never depends on the worker count, so results are identical for any
# number of workers.
SAMPLE_BLOCK = 1024


class KLControlError(Exception):
    """Base class for errors raised by this package."""


class DomainError(KLControlError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class RolloutDivergedError(KLControlError):
    def __init__(self, stage: int, message: str = ""):
        self.stage = stage
        super().__init__(message or f"non-finite state produced at stage {stage}")


class EstimationFailedError(KLControlError):
    def __init__(self, message: str, stage: int | None = None):
        self.stage = stage
        super().__init__(message if stage is None else f"stage {stage}: {message}")


class SolverError(KLControlError):
    def __init__(self, stage: int, message: str):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")


class DegenerateStateError(KLControlError):
    pass


def _cholesky(mat: np.ndarray, what: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DomainError(f"{what} must be a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)) or not np.allclose(mat, mat.T, rtol=1e-12, atol=1e-12):
        raise DomainError(f"{what} must be finite and symmetric")
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError:
        raise DomainError(f"{what} is not positive definite") from None


def as_matrix(value, dim: int | None = None) -> np.ndarray:
    """Coerce a scalar or nested list into a 2-D float array."""
    mat = np.atleast_2d(np.asarray(value, dtype=float))
    if dim is not None and mat.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} matrix, got shape {mat.shape}")
    return mat


@dataclass(frozen=True)
class DynamicsModel:
    n: int
    m: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "custom"

    def __call__(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = np.asarray(self.step(x, u), dtype=float)
        if out.shape[-1:] != (self.n,):
            raise ValueError(f"{self.name}: step returned trailing dimension {out.shape[-1:]}, expected {self.n}")
        return out


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Reference noise law, per stage.

    Use :meth:`gaussian` or :meth:`discrete` to build one. A single
    covariance / pmf is shared by every stage; a sequence gives one entry
    per stage.
    """

    kind: str
    dim: int
    covariances: tuple = ()
    factors: tuple = field(default=(), repr=False)
    support: np.ndarray | None = field(default=None, repr=False)
    log_probs: tuple = field(default=(), repr=False)
    _cdfs: tuple = field(default=(), repr=False)

    @classmethod
    def gaussian(cls, covariance) -> NoiseModel:
        covs = _per_stage(covariance, 2)
        covs = tuple(as_matrix(c) for c in covs)
        dim = covs[0].shape[0]
        for k, c in enumerate(covs):
            if c.shape != (dim, dim):
                raise DomainError(f"stage {k} covariance has shape {c.shape}, expected {(dim, dim)}")
        factors = tuple(_cholesky(c, f"stage {k} noise covariance") for k, c in enumerate(covs))
        return cls("gaussian", dim, covs, factors)

    @classmethod
    def discrete(cls, support, probs=None, log_probs=None) -> NoiseModel:
        pts = np.asarray(support, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] == 0:
            raise DomainError("discrete noise support is empty")
        if (probs is None) == (log_probs is None):
            raise ValueError("give exactly one of probs, log_probs")
        if probs is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                tables = tuple(np.log(np.asarray(p, dtype=float)) for p in _per_stage(probs, 1))
        else:
            tables = tuple(np.asarray(lp, dtype=float) for lp in _per_stage(log_probs, 1))
        cdfs = []
        for k, lp in enumerate(tables):
            if lp.shape != (pts.shape[0],):
                raise DomainError(f"stage {k} pmf has {lp.shape} entries for {pts.shape[0]} support points")
            if np.isnan(lp).any() or (lp > 0).any():
                raise DomainError(f"stage {k} pmf has entries outside [0, 1]")
            p = np.exp(lp)
            if not abs(p.sum() - 1.0) <= 1e-12:
                raise DomainError(f"stage {k} pmf sums to {p.sum()!r}, not 1")
            cdfs.append(np.cumsum(p.astype(np.longdouble)))
        return cls("discrete", pts.shape[1], support=pts, log_probs=tables, _cdfs=tuple(cdfs))

    def _pick(self, table: tuple, k: int):
        if len(table) == 1:
            return table[0]
        if not 0 <= k < len(table):
            raise IndexError(f"no noise parameters for stage {k}")
        return table[k]

    def covariance(self, k: int) -> np.ndarray:
        return self._pick(self.covariances, k)

    def factor(self, k: int) -> np.ndarray:
        return self._pick(self.factors, k)

    def log_pmf(self, k: int) -> np.ndarray:
        return self._pick(self.log_probs, k)

    def pmf(self, k: int) -> np.ndarray:
        return np.exp(self.log_pmf(k))

    def log_density(self, k: int, w) -> np.ndarray:
        """Gaussian log-density or discrete log-pmf of ``w`` (shape ``(..., m)``)."""
        w = np.asarray(w, dtype=float)
        if self.kind == "gaussian":
            L = self.factor(k)
            z = linalg.solve_triangular(L, w.reshape(-1, self.dim).T, lower=True)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out = -0.5 * (np.sum(z * z, axis=0) + logdet + self.dim * np.log(2 * np.pi))
            return out.reshape(w.shape[:-1])
        flat = w.reshape(-1, self.dim)
        match = np.all(flat[:, None, :] == self.support[None, :, :], axis=-1)
        lp = np.where(match, self.log_pmf(k)[None, :], -np.inf).max(axis=1)
        return lp.reshape(w.shape[:-1])

    def sample_indices(self, k0: int, k1: int, rng: RngStream, samples) -> np.ndarray:
        """Support indices of discrete draws for stages ``k0..k1-1``, shape ``(S, k1-k0)``."""
        u = rng.uniforms(k1 - k0, samples, start=k0)
        idx = np.empty(u.shape, dtype=np.intp)
        last = self.support.shape[0] - 1
        for j in range(k1 - k0):
            cdf = self._pick(self._cdfs, k0 + j)
            idx[:, j] = np.minimum(np.searchsorted(cdf, u[:, j], side="right"), last)
        return idx

    def sample(self, k0: int, k1: int, rng: RngStream, samples) -> np.ndarray:
        """Noise for stages ``k0..k1-1``, shape ``(S, k1-k0, m)``.

        Draw ``j`` of sample id ``i`` always belongs to absolute stage ``j``,
        so paths started at different stages from one stream stay consistent.
        """
        if k1 < k0:
            raise ValueError("k1 < k0")
        if self.kind == "discrete":
            return self.support[self.sample_indices(k0, k1, rng, samples)]
        m = self.dim
        z = rng.normals((k1 - k0) * m, samples, start=k0 * m).reshape(-1, k1 - k0, m)
        if len(self.factors) == 1:
            return z @ self.factors[0].T
        out = np.empty_like(z)
        for j in range(k1 - k0):
            out[:, j] = z[:, j] @ self.factor(k0 + j).T
        return out


def _per_stage(value, entry_rank: int) -> list:
    # A value of rank entry_rank+1 is a per-stage sequence; scalar
    # covariances (rank 0) count as matrices.
    rank = np.ndim(value)
    if rank == entry_rank + 1 or (entry_rank == 2 and rank == 1):
        return list(value)
    return [value]


@dataclass(frozen=True)
class CostSchedule:
    """Stage costs ``ℓ_0 .. ℓ_{N-1}`` and terminal cost ``ℓ_N``."""

    running: tuple
    terminal: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if len(self.running) < 1:
            raise ValueError("horizon must be at least one stage")

    @property
    def horizon(self) -> int:
        return len(self.running)

    def stage(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if k == self.horizon:
            return np.asarray(self.terminal(x), dtype=float)
        if not 0 <= k < self.horizon:
            raise IndexError(f"stage {k} outside 0..{self.horizon}")
        return np.asarray(self.running[k](x), dtype=float)

    @classmethod
    def stationary(cls, running: Callable, horizon: int, terminal: Callable | None = None) -> CostSchedule:
        return cls(tuple([running] * int(horizon)), terminal if terminal is not None else running)

    @classmethod
    def quadratic(cls, Qs: Sequence) -> CostSchedule:
        """``ℓ_k(x) = ½ xᵀ Q_k x`` for ``Q_0 .. Q_N``."""
        fns = [_quadratic(as_matrix(Q)) for Q in Qs]
        return cls(tuple(fns[:-1]), fns[-1])

    @classmethod
    def zero(cls, horizon: int) -> CostSchedule:
        return cls.stationary(_zero_cost, horizon)


def _zero_cost(x):
    return np.zeros(np.shape(x)[:-1])


def _quadratic(Q):
    def cost(x):
        return 0.5 * np.einsum("...i,ij,...j->...", x, Q, x)

    return cost


@dataclass(frozen=True)
class Trajectory:
    """States ``x_{k0} .. x_N`` and the inputs that produced them."""

    states: np.ndarray
    controls: np.ndarray
    k0: int = 0

    @property
    def horizon(self) -> int:
        return self.k0 + self.controls.shape[0]


def rollout_noise_driven(dyn: DynamicsModel, noise: NoiseModel, x0, k0: int, horizon: int,
                         rng: RngStream, sample_id: int = 0) -> Trajectory:
    """One path of ``x̄_{k+1} = f(x̄_k, w_k)`` from ``x̄_{k0} = x0`` up to stage ``horizon``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if not 0 <= k0 <= horizon:
        raise ValueError(f"k0={k0} outside 0..{horizon}")
    x = np.asarray(x0, dtype=float).reshape(dyn.n)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    w = noise.sample(k0, horizon, rng, [sample_id])[0]
    states = np.empty((horizon - k0 + 1, dyn.n))
    states[0] = x
    for j in range(horizon - k0):
        x = dyn(x, w[j])
        if not np.all(np.isfinite(x)):
            raise RolloutDivergedError(k0 + j + 1)
        states[j + 1] = x
    return Trajectory(states, w, k0)


def path_cost(costs: CostSchedule, traj: Trajectory, k0: int | None = None) -> float:
    """``Σ_{s=k0}^{N} ℓ_s(x̄_s)`` along a trajectory."""
    k0 = traj.k0 if k0 is None else k0
    N = costs.horizon
    if traj.k0 != k0 or traj.states.shape[0] != N - k0 + 1:
        raise ValueError(f"trajectory does not span stages {k0}..{N}")
    total = 0.0
    for j, x in enumerate(traj.states):
        c = float(costs.stage(k0 + j, x))
        if not np.isfinite(c):
            raise RolloutDivergedError(k0 + j, f"non-finite cost at stage {k0 + j}")
        total += c
    return total


def accumulate_costs(dyn: DynamicsModel, costs: CostSchedule, k0: int, starts: np.ndarray,
                     noise_paths: np.ndarray) -> np.ndarray:
    """Path costs of noise-driven rollouts, shape ``(A, S)``.

    ``starts`` holds A states at stage ``k0``; ``noise_paths`` holds S noise
    sequences ``(S, N-k0, m)`` shared by every start (common random numbers).
    Infinite costs are allowed (zero weight); NaN costs and non-finite states
    raise.
    """
    N = costs.horizon
    A, S = starts.shape[0], noise_paths.shape[0]
    x = np.broadcast_to(starts[:, None, :], (A, S, dyn.n))
    total = np.zeros((A, S))
    for s in range(k0, N + 1):
        c = costs.stage(s, x)
        if np.isnan(c).any():
            raise RolloutDivergedError(s, f"NaN stage cost at stage {s}")
        total += c
        if s == N:
            break
        x = dyn(x, noise_paths[None, :, s - k0, :])
        if not np.all(np.isfinite(x)):
            raise RolloutDivergedError(s + 1)
    return total


def sampled_path_costs(dyn: DynamicsModel, noise: NoiseModel, costs: CostSchedule, k0: int,
                       starts, n_samples: int, rng: RngStream, workers: int = 1) -> np.ndarray:
    """Costs of ``n_samples`` noise-driven paths from each start, shape ``(A, S)``.

    Sample id ``i`` draws its noise from ``rng`` at counter ``i``; blocks of
    `SAMPLE_BLOCK` ids are evaluated independently and concatenated in order.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    N = costs.horizon
    if not 0 <= k0 <= N:
        raise ValueError(f"stage {k0} outside 0..{N}")
    bounds = [(b, min(b + SAMPLE_BLOCK, n_samples)) for b in range(0, n_samples, SAMPLE_BLOCK)]

    def run(block):
        ids = np.arange(block[0], block[1])
        paths = noise.sample(k0, N, rng, ids)
        return accumulate_costs(dyn, costs, k0, starts, paths)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    return np.concatenate(parts, axis=1)


def kl_gaussians(mu1, cov1, mu0, cov0) -> float:
    """``KL(N(mu1, cov1) || N(mu0, cov0))`` in closed form."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    L1 = _cholesky(as_matrix(cov1), "cov1")
    L0 = _cholesky(as_matrix(cov0), "cov0")
    m = mu1.shape[0]
    if L1.shape != (m, m) or L0.shape != (m, m) or mu0.shape != (m,):
        raise ValueError("dimension mismatch")
    # tr(Σ0⁻¹Σ1) = ||L0⁻¹ L1||_F²
    M = linalg.solve_triangular(L0, L1, lower=True)
    d = linalg.solve_triangular(L0, mu1 - mu0, lower=True)
    logdet0 = 2.0 * np.sum(np.log(np.diag(L0)))
    logdet1 = 2.0 * np.sum(np.log(np.diag(L1)))
    kl = 0.5 * (np.sum(M * M) + d @ d - m + logdet0 - logdet1)
    return max(float(kl), 0.0)

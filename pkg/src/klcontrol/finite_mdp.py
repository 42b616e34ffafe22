"""Conventional KL control on a finite state space.

With an uncontrolled chain ``p⁰_{k+1}(x'|x)`` and full control of the
transition law, the desirability ``z = exp(-v)`` obeys the linear recursion
``z(k, x) = exp(-ℓ_k(x)) Σ_{x'} p⁰(x'|x) z(k+1, x')``, ``z(N, ·) = exp(-ℓ_N)``.
Everything is stored as ``log z``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, xlogy

from .core import DegenerateStateError, DomainError


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    transitions: tuple   # p⁰_1 .. p⁰_N, each (X, X), row-stochastic
    costs: np.ndarray    # (N+1, X): ℓ_0 .. ℓ_N

    def __post_init__(self):
        N = len(self.transitions)
        if N < 1:
            raise DomainError("horizon must be at least one stage")
        X = self.costs.shape[1] if self.costs.ndim == 2 else -1
        if self.costs.shape != (N + 1, X):
            raise DomainError(f"costs must have shape (N+1, |X|) = ({N + 1}, |X|), got {self.costs.shape}")
        for k, P in enumerate(self.transitions):
            if P.shape != (X, X):
                raise DomainError(f"transition {k} has shape {P.shape}, expected {(X, X)}")
            if (P < 0).any() or not np.allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-12):
                raise DomainError(f"transition {k} is not row-stochastic")
        if np.isnan(self.costs).any() or (self.costs == -np.inf).any():
            raise DomainError("costs must be real or +inf")

    @classmethod
    def create(cls, transitions, costs, horizon: int | None = None) -> FiniteMdp:
        """A single (X, X) matrix or cost vector is repeated over ``horizon`` stages."""
        P = np.asarray(transitions, dtype=float)
        c = np.asarray(costs, dtype=float)
        if P.ndim == 2:
            if horizon is None:
                raise DomainError("a stationary chain needs a horizon")
            P = np.broadcast_to(P, (horizon,) + P.shape)
        if c.ndim == 1:
            c = np.broadcast_to(c, (P.shape[0] + 1, c.shape[0]))
        return cls(tuple(np.array(p) for p in P), np.array(c))

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    @property
    def n_states(self) -> int:
        return self.costs.shape[1]


@dataclass(frozen=True, eq=False)
class DesirabilityTable:
    log_z: np.ndarray   # (N+1, X)

    @property
    def z(self) -> np.ndarray:
        return np.exp(self.log_z)


def _log(P: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(P)


def solve_desirability(mdp: FiniteMdp, terminal_log_z=None) -> DesirabilityTable:
    """Backward log-domain recursion for ``log z``.

    ``terminal_log_z`` overrides ``log z_N = -ℓ_N`` (entries may be ``-inf``).
    """
    N, X = mdp.horizon, mdp.n_states
    log_z = np.empty((N + 1, X))
    log_z[N] = -mdp.costs[N] if terminal_log_z is None else np.asarray(terminal_log_z, dtype=float)
    for k in range(N - 1, -1, -1):
        log_z[k] = -mdp.costs[k] + logsumexp(_log(mdp.transitions[k]) + log_z[k + 1][None, :], axis=1)
    bad = np.argwhere(~np.isfinite(log_z[:N]) | np.isnan(log_z[:N]))
    if terminal_log_z is None and bad.size:
        k, x = bad[0]
        raise DegenerateStateError(f"z({k}, {x}) = 0: no reachable finite-cost continuation")
    return DesirabilityTable(log_z)


def optimal_transition(mdp: FiniteMdp, table: DesirabilityTable, k: int, x: int) -> np.ndarray:
    """Row ``p*_{k+1}(·|x) = p⁰(·|x) z(k+1, ·) / Σ p⁰ z``."""
    if not 0 <= k < mdp.horizon:
        raise ValueError(f"stage {k} outside 0..{mdp.horizon - 1}")
    lw = _log(mdp.transitions[k][x]) + table.log_z[k + 1]
    if not np.isfinite(lw).any():
        raise DegenerateStateError(f"state {x} at stage {k} has no reachable mass with positive desirability")
    top = lw[np.isfinite(lw)].max()
    w = np.exp(lw - top)
    return w / w.sum()


def optimal_policy(mdp: FiniteMdp, table: DesirabilityTable) -> np.ndarray:
    """All optimal rows, shape ``(N, X, X)``."""
    return np.stack([
        np.stack([optimal_transition(mdp, table, k, x) for x in range(mdp.n_states)])
        for k in range(mdp.horizon)
    ])


def exact_value(mdp: FiniteMdp, table: DesirabilityTable, k: int, x: int) -> float:
    return float(-table.log_z[k, x])


def policy_cost(mdp: FiniteMdp, policy) -> np.ndarray:
    """Expected ``ℓ_N(x_N) + Σ_k [ℓ_k(x_k) + KL(p_{k+1}(·|x_k) || p⁰_{k+1}(·|x_k))]``
    from every initial state, by exact backward expectation.

    ``policy`` has shape ``(N, X, X)``. A row putting mass where ``p⁰`` has
    none gives infinite cost.
    """
    policy = np.asarray(policy, dtype=float)
    N = mdp.horizon
    J = mdp.costs[N].copy()
    for k in range(N - 1, -1, -1):
        p, p0 = policy[k], mdp.transitions[k]
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(p > 0, xlogy(p, p) - xlogy(p, p0), 0.0).sum(axis=1)
        kl = np.where(((p > 0) & (p0 == 0)).any(axis=1), np.inf, kl)
        with np.errstate(invalid="ignore"):
            ahead = np.where(p > 0, p * J[None, :], 0.0).sum(axis=1)
        J = mdp.costs[k] + kl + ahead
    return J

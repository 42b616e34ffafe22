"""Closed-form KL control for ``x_{k+1} = A x_k + B u_k``, ``ℓ_k(x) = ½ xᵀQ_k x``,
``w_k ~ N(0, Σ_k)`` with square invertible ``B``.

The optimal policy is Gaussian with the LQR mean (control weight ``Σ_k⁻¹``)
and covariance ``(Σ_k⁻¹ + BᵀP_{k+1}B)⁻¹``. The desirability function has a
backward (Riccati) form and a forward (batch) form; both are provided so
that each can check the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .core import (
    CostSchedule,
    DomainError,
    DynamicsModel,
    NoiseModel,
    SolverError,
    _cholesky,
    as_matrix,
)


@dataclass(frozen=True, eq=False)
class LqgProblem:
    A: np.ndarray
    B: np.ndarray
    Q: tuple          # Q_0 .. Q_N
    Sigma: tuple      # Σ_0 .. Σ_{N-1}

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, n):
            raise DomainError(f"A and B must be {n}x{n} (square B is required)")
        if len(self.Q) != len(self.Sigma) + 1 or len(self.Sigma) < 1:
            raise DomainError("need Q_0..Q_N and Σ_0..Σ_{N-1} with N >= 1")
        det = np.linalg.det(self.B)
        if not np.isfinite(np.linalg.cond(self.B)) or abs(det) == 0.0:
            raise DomainError("B must be invertible")
        for k, Qk in enumerate(self.Q):
            _cholesky(Qk, f"Q_{k}")
        for k, Sk in enumerate(self.Sigma):
            _cholesky(Sk, f"Σ_{k}")

    @classmethod
    def create(cls, A, B, Q, Sigma, horizon: int | None = None) -> LqgProblem:
        """Build from matrices or scalars; a single Q or Σ is repeated over the horizon."""
        A = as_matrix(A)
        n = A.shape[0]
        B = as_matrix(B, n)
        if horizon is None:
            if _is_sequence(Q, n):
                horizon = len(Q) - 1
            elif _is_sequence(Sigma, n):
                horizon = len(Sigma)
            else:
                raise DomainError("give a horizon when neither Q nor Σ is a per-stage sequence")
        Qs = _expand(Q, n, horizon + 1)
        Ss = _expand(Sigma, n, horizon)
        return cls(A, B, tuple(Qs), tuple(Ss))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def horizon(self) -> int:
        return len(self.Sigma)

    def dynamics(self) -> DynamicsModel:
        A, B = self.A, self.B
        return DynamicsModel(self.n, self.n, lambda x, u: x @ A.T + u @ B.T, name="linear")

    def noise(self) -> NoiseModel:
        return NoiseModel.gaussian(list(self.Sigma))

    def costs(self) -> CostSchedule:
        return CostSchedule.quadratic(self.Q)


def _is_sequence(value, n: int) -> bool:
    arr = np.asarray(value, dtype=float)
    return arr.ndim == 3 or (arr.ndim == 1 and n == 1 and arr.size > 1)


def _expand(value, n: int, count: int) -> list:
    if _is_sequence(value, n):
        mats = [as_matrix(v, n) for v in value]
        if len(mats) != count:
            raise DomainError(f"expected {count} matrices, got {len(mats)}")
        return mats
    return [as_matrix(value, n)] * count


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    P: tuple                  # P_0 .. P_N
    log_prefactor: np.ndarray  # entries 0 .. N

    @property
    def horizon(self) -> int:
        return len(self.P) - 1


@dataclass(frozen=True, eq=False)
class GaussianPolicyStage:
    gain: np.ndarray        # mean = -gain @ x
    covariance: np.ndarray

    def mean(self, x) -> np.ndarray:
        return -np.asarray(x, dtype=float) @ self.gain.T


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _stage_covariance(B: np.ndarray, P_next: np.ndarray, Sigma: np.ndarray):
    """Cholesky factor of ``Σ⁻¹ + BᵀPB`` (Σ⁻¹ from a single factorization of Σ)."""
    n = Sigma.shape[0]
    Sigma_inv = linalg.cho_solve(linalg.cho_factor(Sigma, lower=True), np.eye(n))
    H = _symmetrize(Sigma_inv + B.T @ P_next @ B)
    return linalg.cho_factor(H, lower=True)


def solve_riccati(prob: LqgProblem) -> RiccatiSolution:
    """Backward Riccati recursion ``P_N = Q_N``,
    ``P_k = Q_k + AᵀP A − AᵀP B (Σ_k⁻¹ + BᵀP B)⁻¹ BᵀP A`` with ``P = P_{k+1}``.

    Each ``P_k`` is symmetrized and must admit a Cholesky factorization.
    ``log_prefactor[k] = −½ Σ_{s=k+1}^{N} log det(I + P_s B Σ_{s−1} Bᵀ)``.
    """
    A, B, N, n = prob.A, prob.B, prob.horizon, prob.n
    P = [None] * (N + 1)
    P[N] = _symmetrize(prob.Q[N].copy())
    log_pre = np.zeros(N + 1)
    eye = np.eye(n)
    for k in range(N - 1, -1, -1):
        Pn = P[k + 1]
        try:
            H = _stage_covariance(B, Pn, prob.Sigma[k])
        except linalg.LinAlgError:
            raise SolverError(k, "Σ_k⁻¹ + BᵀP_{k+1}B lost positive definiteness") from None
        PA = Pn @ A
        BtPA = B.T @ PA
        Pk = _symmetrize(prob.Q[k] + A.T @ PA - BtPA.T @ linalg.cho_solve(H, BtPA))
        try:
            linalg.cholesky(Pk, lower=True)
        except linalg.LinAlgError:
            raise SolverError(k, "P_k lost positive definiteness") from None
        P[k] = Pk
        sign, logdet = np.linalg.slogdet(eye + Pn @ B @ prob.Sigma[k] @ B.T)
        if sign <= 0:
            raise SolverError(k, "det(I + P_{k+1} B Σ_k Bᵀ) is not positive")
        log_pre[k] = log_pre[k + 1] - 0.5 * logdet
    return RiccatiSolution(tuple(P), log_pre)


def policy_stage(prob: LqgProblem, sol: RiccatiSolution, k: int) -> GaussianPolicyStage:
    """Gain ``K_k = C_k BᵀP_{k+1}A`` and covariance ``C_k = (Σ_k⁻¹ + BᵀP_{k+1}B)⁻¹``."""
    if not 0 <= k < prob.horizon:
        raise ValueError(f"policy stage {k} outside 0..{prob.horizon - 1}")
    Pn = sol.P[k + 1]
    H = _stage_covariance(prob.B, Pn, prob.Sigma[k])
    C = _symmetrize(linalg.cho_solve(H, np.eye(prob.n)))
    K = linalg.cho_solve(H, prob.B.T @ Pn @ prob.A)
    return GaussianPolicyStage(K, C)


def log_desirability_backward(prob: LqgProblem, sol: RiccatiSolution, k: int, x) -> float:
    x = np.asarray(x, dtype=float).reshape(prob.n)
    return float(sol.log_prefactor[k] - 0.5 * x @ sol.P[k] @ x)


def batch_matrices(prob: LqgProblem, k: int):
    """Stacked matrices for stages ``k+1..N`` given ``x̄_k``.

    Returns ``(Abar, L, Sig, Qbl)`` with ``x̄_{k+1:N} ~ N(Abar x, L Sig Lᵀ)``.
    Block ``(i, j)`` of ``L`` is ``A^{i-j} B`` for ``i >= j``; the noise
    driving ``x̄_{k+1+i}`` is ``w_{k+i}`` so ``Sig = diag(Σ_k .. Σ_{N-1})``.
    Dense: size ``n(N-k)``.
    """
    A, B, n, N = prob.A, prob.B, prob.n, prob.horizon
    T = N - k
    if T < 1:
        raise ValueError(f"no future stages after k={k}")
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(A @ powers[-1])
    Abar = np.vstack(powers[1:])
    L = np.zeros((n * T, n * T))
    for i in range(T):
        for j in range(i + 1):
            L[i * n:(i + 1) * n, j * n:(j + 1) * n] = powers[i - j] @ B
    Sig = linalg.block_diag(*prob.Sigma[k:N])
    Qbl = linalg.block_diag(*prob.Q[k + 1:N + 1])
    if Abar.shape != (n * T, n) or Sig.shape != L.shape or Qbl.shape != L.shape:
        raise ValueError("inconsistent block dimensions")
    return Abar, L, Sig, Qbl


def _batch_terms(prob: LqgProblem, k: int):
    Abar, L, Sig, Qbl = batch_matrices(prob, k)
    G = L @ Sig @ L.T
    M = np.eye(G.shape[0]) + Qbl @ G
    # (Q⁻¹ + G)⁻¹ = (I + Q G)⁻¹ Q
    W = np.linalg.solve(M, Qbl)
    quad = prob.Q[k] + Abar.T @ W @ Abar
    sign, logdet = np.linalg.slogdet(M)
    if sign <= 0:
        raise SolverError(k, "det(I + Q L Σ Lᵀ) is not positive")
    return _symmetrize(quad), logdet


def log_desirability_forward(prob: LqgProblem, k: int, x) -> float:
    """``log Z(k, x)`` from the Gaussian law of the noise-driven path (no Riccati recursion)."""
    x = np.asarray(x, dtype=float).reshape(prob.n)
    if k == prob.horizon:
        return float(-0.5 * x @ prob.Q[k] @ x)
    quad, logdet = _batch_terms(prob, k)
    return float(-0.5 * logdet - 0.5 * x @ quad @ x)


def lqr_value(prob: LqgProblem, k: int, x, mode: str = "riccati", sol: RiccatiSolution | None = None) -> float:
    """Optimal cost-to-go of the LQR problem with state weights ``Q_k`` and control weights ``Σ_k⁻¹``."""
    x = np.asarray(x, dtype=float).reshape(prob.n)
    if mode == "riccati":
        sol = solve_riccati(prob) if sol is None else sol
        return float(0.5 * x @ sol.P[k] @ x)
    if mode == "batch":
        if k == prob.horizon:
            return float(0.5 * x @ prob.Q[k] @ x)
        quad, _ = _batch_terms(prob, k)
        return float(0.5 * x @ quad @ x)
    raise ValueError(f"unknown mode {mode!r}")


def noncausal_policy_stage(prob: LqgProblem, sol: RiccatiSolution, k: int, x, w):
    """Optimal conventional-KL policy when the controller sees the current noise ``w``.

    For ``x_{k+1} = A x + B(u + w)`` the uncontrolled and noise-driven
    transitions coincide, so the conventional desirability equals ``Z``.
    Returns ``(mean, covariance)`` with covariance ``C_k`` and mean
    ``−C_k(Σ_k⁻¹ w + BᵀP_{k+1}A x)``.
    """
    x = np.asarray(x, dtype=float).reshape(prob.n)
    w = np.asarray(w, dtype=float).reshape(prob.n)
    Pn = sol.P[k + 1]
    H = _stage_covariance(prob.B, Pn, prob.Sigma[k])
    Sw = linalg.cho_solve(linalg.cho_factor(prob.Sigma[k], lower=True), w)
    mean = -linalg.cho_solve(H, Sw + prob.B.T @ Pn @ prob.A @ x)
    cov = _symmetrize(linalg.cho_solve(H, np.eye(prob.n)))
    return mean, cov


def random_problem(rng: np.random.Generator, n: int, horizon: int,
                   radius: float = 1.0) -> LqgProblem:
    """Random well-conditioned instance: SPD ``Q_k, Σ_k``, invertible ``B``,
    ``A`` scaled to spectral radius ``radius``."""
    A = rng.standard_normal((n, n))
    rho = max(np.abs(np.linalg.eigvals(A)).max(), 1e-12)
    A *= radius / rho
    B = np.eye(n) + 0.3 * rng.standard_normal((n, n))
    while abs(np.linalg.det(B)) < 0.1:
        B = np.eye(n) + 0.3 * rng.standard_normal((n, n))

    def spd():
        X = rng.standard_normal((n, n))
        return X @ X.T / n + 0.2 * np.eye(n)

    Q = tuple(spd() for _ in range(horizon + 1))
    Sigma = tuple(spd() for _ in range(horizon))
    return LqgProblem(A, B, Q, Sigma)



def sample_closed_loop(prob: LqgProblem, sol: RiccatiSolution, x0, rng, n_paths: int = 1):
    """Paths of ``x_{k+1} = A x_k + B u_k`` with ``u_k ~ N(-K_k x_k, C_k)``.

    Path ``i`` uses sample id ``i`` of ``rng``. Returns states
    ``(n_paths, N+1, n)`` and controls ``(n_paths, N, n)``.
    """
    n, N = prob.n, prob.horizon
    z = rng.normals(N * n, n_paths).reshape(n_paths, N, n)
    x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(n), (n_paths, n)).copy()
    states = np.empty((n_paths, N + 1, n))
    controls = np.empty((n_paths, N, n))
    states[:, 0] = x
    for k in range(N):
        st = policy_stage(prob, sol, k)
        root = linalg.cholesky(st.covariance, lower=True)
        u = st.mean(x) + z[:, k] @ root.T
        x = x @ prob.A.T + u @ prob.B.T
        controls[:, k] = u
        states[:, k + 1] = x
    return states, controls

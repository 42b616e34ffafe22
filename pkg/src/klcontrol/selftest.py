"""Invariant checks run by ``klcontrol --selftest``.

Each check returns a `CheckResult` with the measured residual and the
tolerance it is held to.
"""

from __future__ import annotations

import itertools
import sys
from dataclasses import dataclass

import numpy as np

from . import lqg
from .core import CostSchedule, DynamicsModel, KLControlError, NoiseModel, sampled_path_costs
from .finite_mdp import FiniteMdp, solve_desirability
from .path_integral import estimate_log_desirability, log_mean_exp
from .rng import RngStream


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual <= self.tolerance)


def check_forward_backward(instances: int = 200, seed: int = 11) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, N = int(rng.integers(1, 4)), int(rng.integers(1, 21))
        prob = lqg.random_problem(rng, n, N)
        sol = lqg.solve_riccati(prob)
        for _ in range(10):
            k, x = int(rng.integers(0, N + 1)), rng.standard_normal(n)
            d = lqg.log_desirability_backward(prob, sol, k, x) - lqg.log_desirability_forward(prob, k, x)
            worst = max(worst, abs(d))
    return CheckResult("forward/backward log Z", worst, 1e-8)


def check_lqr_dual_forms(instances: int = 200, seed: int = 11) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, N = int(rng.integers(1, 4)), int(rng.integers(1, 21))
        prob = lqg.random_problem(rng, n, N)
        sol = lqg.solve_riccati(prob)
        for _ in range(10):
            k, x = int(rng.integers(0, N + 1)), rng.standard_normal(n)
            d = lqg.lqr_value(prob, k, x, "riccati", sol) - lqg.lqr_value(prob, k, x, "batch")
            worst = max(worst, abs(d))
    return CheckResult("LQR value riccati/batch", worst, 1e-8)


def _plain_lqr_gains(A, B, Qs, Rs):
    # textbook recursion with explicit R: K = (R + BᵀPB)⁻¹BᵀPA,
    # P = Q + KᵀRK + (A-BK)ᵀP(A-BK)
    P = Qs[-1]
    gains = []
    for k in range(len(Rs) - 1, -1, -1):
        K = np.linalg.solve(Rs[k] + B.T @ P @ B, B.T @ P @ A)
        Acl = A - B @ K
        P = Qs[k] + K.T @ Rs[k] @ K + Acl.T @ P @ Acl
        gains.append(K)
    return gains[::-1]


def check_lqr_gain(instances: int = 50, seed: int = 12) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, N = int(rng.integers(1, 4)), int(rng.integers(1, 21))
        prob = lqg.random_problem(rng, n, N)
        sol = lqg.solve_riccati(prob)
        ref = _plain_lqr_gains(prob.A, prob.B, prob.Q, [np.linalg.inv(S) for S in prob.Sigma])
        for k in range(N):
            worst = max(worst, np.abs(lqg.policy_stage(prob, sol, k).gain - ref[k]).max())
    return CheckResult("policy mean gain = LQR gain", worst, 1e-10)


def _sine_problem(horizon: int = 5):
    dyn = DynamicsModel(1, 1, lambda x, u: np.sin(x) + u, name="sine")
    noise = NoiseModel.gaussian(0.5)
    costs = CostSchedule.stationary(lambda x: 0.5 * x[..., 0] ** 2, horizon)
    return dyn, noise, costs


def bellman_gap(x: float, rng: RngStream, direct: int = 20000, outer: int = 200, inner: int = 200,
                k: int = 0) -> tuple[float, float]:
    """Direct estimate of log Z(k, x) minus the two-level one, and their combined standard error."""
    dyn, noise, costs = _sine_problem()
    d = estimate_log_desirability(dyn, noise, costs, k, [x], direct, rng.substream("direct"))
    w = noise.sample(k, k + 1, rng.substream("outer"), outer)[:, 0, :]
    nxt = dyn(np.full((outer, 1), x), w)
    log_inner = np.array([
        estimate_log_desirability(dyn, noise, costs, k + 1, nxt[j], inner, rng.substream("inner", j)).log_z
        for j in range(outer)
    ])
    two = -float(costs.stage(k, np.array([x]))) + float(log_mean_exp(log_inner))
    r = np.exp(log_inner - log_inner.max())
    se_two = float(np.std(r, ddof=1) / (np.sqrt(outer) * r.mean()))
    return d.log_z - two, float(np.hypot(d.std_error_log, se_two))


def check_bellman(seed: int = 13) -> CheckResult:
    root = RngStream(seed)
    worst = 0.0
    for i, x in enumerate(np.linspace(-2.0, 2.0, 10)):
        gap, se = bellman_gap(float(x), root.substream("bellman", i))
        worst = max(worst, abs(gap) / se)
    return CheckResult("Bellman consistency (|gap| / combined s.e.)", worst, 3.0)


def enumerate_log_z0(mdp: FiniteMdp) -> np.ndarray:
    """log z(0, x) by summing over every path of the uncontrolled chain."""
    N, X = mdp.horizon, mdp.n_states
    out = np.zeros(X)
    for x0 in range(X):
        total = 0.0
        for path in itertools.product(range(X), repeat=N):
            prob, cost, prev = 1.0, mdp.costs[0, x0], x0
            for k, y in enumerate(path):
                prob *= mdp.transitions[k][prev, y]
                cost += mdp.costs[k + 1, y]
                prev = y
            total += prob * np.exp(-cost)
        out[x0] = np.log(total)
    return out


def check_mdp_enumeration(seed: int = 14) -> CheckResult:
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(4), size=(5, 4))
    c = rng.uniform(0.0, 2.0, size=(6, 4))
    mdp = FiniteMdp.create(P, c)
    z = np.exp(solve_desirability(mdp).log_z[0])
    ref = np.exp(enumerate_log_z0(mdp))
    return CheckResult("finite MDP z vs path enumeration", float(np.abs(z - ref).max()), 1e-12)


def check_determinism(seed: int = 15) -> CheckResult:
    prob = lqg.LqgProblem.create(0.85, 0.1, 3.0, 1.5, 30)
    args = (prob.dynamics(), prob.noise(), prob.costs(), 0, [[1.0]], 3000, RngStream(seed))
    a = sampled_path_costs(*args, workers=1)
    b = sampled_path_costs(*args, workers=4)
    c = sampled_path_costs(*args, workers=1)
    same = np.array_equal(a, b) and np.array_equal(a, c)
    return CheckResult("bit-identical across runs and workers", 0.0 if same else float("inf"), 0.0)


def run_check(check) -> CheckResult:
    """Run one check; a crash counts as a failure with infinite residual."""
    try:
        return check()
    except (KLControlError, ArithmeticError, ValueError, np.linalg.LinAlgError) as err:
        return CheckResult(f"{check.__name__} raised {type(err).__name__}: {err}", float("inf"), 0.0)


CHECKS = (
    check_forward_backward,
    check_lqr_dual_forms,
    check_lqr_gain,
    check_bellman,
    check_mdp_enumeration,
    check_determinism,
)


def run_all(out=None) -> bool:
    out = sys.stdout if out is None else out
    ok = True
    for check in CHECKS:
        res = run_check(check)
        ok &= res.passed
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.name}: residual={res.residual:.3e} tol={res.tolerance:.1e}", file=out)
    return ok

"""Experiment runners behind the CLI.

Each runner takes a validated config dict and returns an `ExperimentTable`:
ordered column names, rows, and ``key: value`` metadata lines. Nothing here
depends on the worker count except wall-clock time.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import cartpole as cp
from .core import CostSchedule, KLControlError
from .discrete import run_closed_loop
from .finite_mdp import FiniteMdp, optimal_policy, solve_desirability
from .lqg import (
    LqgProblem,
    log_desirability_backward,
    policy_stage,
    sample_closed_loop,
    solve_riccati,
)
from .path_integral import estimate_log_desirability
from .rng import RngStream

log = logging.getLogger(__name__)


@dataclass
class ExperimentTable:
    columns: list
    rows: list = field(default_factory=list)
    metadata: list = field(default_factory=list)
    timings: list = field(default_factory=list)


LQ_VALUE_DEFAULTS = {
    "A": 0.85, "B": 0.10, "Q": 3.0, "Sigma": 1.5, "horizon": 30,
    "x": [round(-3.0 + 0.5 * i, 10) for i in range(13)],
    "samples": [100, 1000, 3000],
}

LQ_ROLLOUT_DEFAULTS = {
    "A": 0.85, "B": 0.10, "horizon": 30, "x0": 1.0, "paths": 3,
    "pairs": [[3.0, 0.5], [3.0, 1.5], [3.0, 10.0], [30.0, 1.0]],
}

CARTPOLE_DEFAULTS = {
    "params": {"M": 1.0, "m": 0.1, "L": 1.0, "g": 9.8, "tau": 0.05},
    "q": list(cp.DEFAULT_Q), "sigma": cp.DEFAULT_SIGMA,
    "action_step": 2.0, "action_count": 10,
    "x0": list(cp.DEFAULT_X0), "horizon": cp.DEFAULT_HORIZON,
    "samples": 5000, "rollouts": 50, "zero_cost": False,
}

# lazy random walk on five states, cheapest in the middle
MDP_DEFAULTS = {
    "transitions": [
        [0.75, 0.25, 0.0, 0.0, 0.0],
        [0.25, 0.5, 0.25, 0.0, 0.0],
        [0.0, 0.25, 0.5, 0.25, 0.0],
        [0.0, 0.0, 0.25, 0.5, 0.25],
        [0.0, 0.0, 0.0, 0.25, 0.75],
    ],
    "costs": [1.0, 0.25, 0.0, 0.25, 1.0],
    "horizon": 6,
}


def lq_problem(cfg: dict) -> LqgProblem:
    return LqgProblem.create(cfg["A"], cfg["B"], cfg["Q"], cfg["Sigma"], cfg["horizon"])


def lq_value(cfg: dict, rng: RngStream, workers: int = 1) -> ExperimentTable:
    """Exact ``V(0, x)`` against Monte-Carlo estimates on a grid of x."""
    prob = lq_problem(cfg)
    sol = solve_riccati(prob)
    dyn, noise, costs = prob.dynamics(), prob.noise(), prob.costs()
    sizes = list(cfg["samples"])
    cols = ["x", "V_exact"] + [f"V_mc_S{S}" for S in sizes] + [f"stderr_S{sizes[-1]}"]
    table = ExperimentTable(cols)
    table.metadata.append(f"log_prefactor_0: {sol.log_prefactor[0]:.17g}")
    for i, x in enumerate(cfg["x"]):
        row = [x, -log_desirability_backward(prob, sol, 0, [x])]
        stderr = float("nan")
        for S in sizes:
            t0 = time.perf_counter()
            try:
                est = estimate_log_desirability(dyn, noise, costs, 0, [x], S, rng.substream("lq-value", i, S), workers)
                row.append(est.value)
                stderr = est.std_error_log
            except KLControlError as err:
                log.error("x=%g S=%d: %s", x, S, err)
                row.append(float("nan"))
                stderr = float("nan")
            table.timings.append((x, S, time.perf_counter() - t0))
        row.append(stderr)
        table.rows.append(row)
    return table


def lq_rollout(cfg: dict, rng: RngStream, workers: int = 1) -> ExperimentTable:
    """Closed-loop paths under the analytic Gaussian policy, one block per (Q, Σ) pair."""
    N, paths = cfg["horizon"], cfg["paths"]
    table = ExperimentTable(["pair", "sample", "k", "x", "u"])
    gains, covs = [], []
    for p, (Q, Sigma) in enumerate(cfg["pairs"]):
        prob = LqgProblem.create(cfg["A"], cfg["B"], Q, Sigma, N)
        sol = solve_riccati(prob)
        stages = [policy_stage(prob, sol, k) for k in range(N)]
        gains.append(np.array([s.gain[0, 0] for s in stages]))
        covs.append(np.array([s.covariance[0, 0] for s in stages]))
        table.metadata.append(f"pair {p}: Q={Q:.17g} Sigma={Sigma:.17g}")
        states, controls = sample_closed_loop(prob, sol, [cfg["x0"]], rng.substream("lq-rollout", p), paths)
        for j in range(paths):
            for k in range(N + 1):
                u = controls[j, k, 0] if k < N else None
                table.rows.append([p, j, k, states[j, k, 0], u])
    pairs = cfg["pairs"]
    for a in range(len(pairs)):
        for b in range(a + 1, len(pairs)):
            if np.isclose(pairs[a][0] * pairs[a][1], pairs[b][0] * pairs[b][1], rtol=1e-12, atol=0):
                dk = float(np.max(np.abs(gains[a] - gains[b])))
                ratio = covs[a] / covs[b]
                table.metadata.append(
                    f"matched Q*Sigma pairs {a},{b}: max_abs_gain_diff={dk:.17g} "
                    f"cov_ratio_min={ratio.min():.17g} cov_ratio_max={ratio.max():.17g}"
                )
    return table


def cartpole_model(cfg: dict):
    params = cp.CartPoleParams(**cfg["params"])
    dyn = cp.dynamics(params)
    actions = cp.action_grid(cfg["action_step"], cfg["action_count"])
    noise = cp.default_noise(cfg["sigma"], actions)
    costs = CostSchedule.zero(cfg["horizon"]) if cfg["zero_cost"] else cp.costs(cfg["q"], cfg["horizon"])
    return dyn, noise, costs


def cartpole(cfg: dict, rng: RngStream, workers: int = 1) -> ExperimentTable:
    """Closed-loop rollouts of the receding discrete-input policy."""
    dyn, noise, costs = cartpole_model(cfg)
    q = cfg["q"]
    table = ExperimentTable(["sample", "k", "x", "x_dot", "theta", "theta_dot", "u", "stage_cost"])
    N = costs.horizon
    failed = 0
    for r in range(cfg["rollouts"]):
        t0 = time.perf_counter()
        try:
            res = run_closed_loop(dyn, noise, costs, cfg["x0"], cfg["samples"], rng.substream("cartpole", r),
                                  workers=workers)
        except KLControlError as err:
            failed += 1
            log.error("rollout %d failed at stage %s: %s", r, getattr(err, "stage", "?"), err)
            continue
        table.timings.append((r, time.perf_counter() - t0))
        traj = res.trajectory
        for k in range(N + 1):
            s = traj.states[k]
            u = traj.controls[k, 0] if k < N else None
            table.rows.append([r, k, *s, u, float(cp.stage_cost(q, s))])
    table.metadata.append(f"failed_rollouts: {failed}")
    return table


def mdp_model(cfg: dict) -> FiniteMdp:
    return FiniteMdp.create(cfg["transitions"], cfg["costs"], cfg.get("horizon"))


def mdp_demo(cfg: dict, rng: RngStream, workers: int = 1) -> ExperimentTable:
    """Desirability, value and optimal transition tables of a finite chain."""
    mdp = mdp_model(cfg)
    tab = solve_desirability(mdp)
    pol = optimal_policy(mdp, tab)
    table = ExperimentTable(["table", "k", "state", "next_state", "value"])
    N, X = mdp.horizon, mdp.n_states
    for k in range(N + 1):
        for x in range(X):
            table.rows.append(["log_z", k, x, None, tab.log_z[k, x]])
    for k in range(N + 1):
        for x in range(X):
            table.rows.append(["z", k, x, None, np.exp(tab.log_z[k, x])])
    for k in range(N + 1):
        for x in range(X):
            table.rows.append(["value", k, x, None, -tab.log_z[k, x]])
    for k in range(N):
        for x in range(X):
            for y in range(X):
                table.rows.append(["p_opt", k, x, y, pol[k, x, y]])
    return table


RUNNERS = {
    "lq-value": (lq_value, LQ_VALUE_DEFAULTS),
    "lq-rollout": (lq_rollout, LQ_ROLLOUT_DEFAULTS),
    "cartpole": (cartpole, CARTPOLE_DEFAULTS),
    "mdp-demo": (mdp_demo, MDP_DEFAULTS),
}

import numpy as np
import pytest
from scipy import stats

from klcontrol import cartpole as cp
from klcontrol.core import CostSchedule, DomainError, DynamicsModel, NoiseModel, rollout_noise_driven
from klcontrol.discrete import (
    DiscreteInputSet,
    discretized_gaussian_pmf,
    optimal_action_probs,
    run_closed_loop,
    successors_distinct,
)
from klcontrol.rng import RngStream

GRID = cp.action_grid()


def test_pmf_properties():
    noise = discretized_gaussian_pmf(GRID, 5.0)
    p = noise.pmf(0)
    assert np.array_equal(p, p[::-1])
    assert p[10] / p[11] == pytest.approx(np.exp(0.08), rel=1e-14)
    assert np.exp(0.08) == pytest.approx(1.08329, abs=1e-5)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_pmf_rejects_bad_sigma_and_duplicates():
    with pytest.raises(DomainError):
        discretized_gaussian_pmf(GRID, 0.0)
    with pytest.raises(DomainError):
        DiscreteInputSet.of([1.0, 1.0])


def test_zero_cost_keeps_noise_pmf():
    noise = discretized_gaussian_pmf(GRID, 5.0)
    pol = optimal_action_probs(cp.dynamics(), noise, CostSchedule.zero(20), 0, cp.DEFAULT_X0, 10, RngStream(0))
    np.testing.assert_allclose(pol.probabilities, noise.pmf(0), rtol=1e-14)


def test_two_actions_at_last_stage():
    dyn = DynamicsModel(1, 1, lambda x, u: x + u)
    noise = NoiseModel.discrete([[-1.0], [1.0]], probs=[0.3, 0.7])
    costs = CostSchedule.stationary(lambda x: np.zeros(x.shape[:-1]), 3, terminal=lambda x: x[..., 0] ** 2)
    x = 0.4
    assert successors_distinct(dyn, [x], noise.support)
    pol = optimal_action_probs(dyn, noise, costs, 2, [x], 1, RngStream(0))
    w = np.array([0.3 * np.exp(-(x - 1) ** 2), 0.7 * np.exp(-(x + 1) ** 2)])
    np.testing.assert_allclose(pol.probabilities, w / w.sum(), rtol=1e-14)


def test_support_point_outside_actions_rejected():
    noise = NoiseModel.discrete([[-1.0], [1.0]], probs=[0.5, 0.5])
    dyn = DynamicsModel(1, 1, lambda x, u: x + u)
    with pytest.raises(DomainError):
        optimal_action_probs(dyn, noise, CostSchedule.zero(2), 0, [0.0], 1, RngStream(0), actions=[[1.0], [2.0]])


def test_cartpole_first_decision_reproducible():
    dyn, noise, costs = cp.dynamics(), cp.default_noise(), cp.costs()
    a = optimal_action_probs(dyn, noise, costs, 0, cp.DEFAULT_X0, 5000, RngStream(21))
    b = optimal_action_probs(dyn, noise, costs, 0, cp.DEFAULT_X0, 5000, RngStream(21))
    assert np.array_equal(a.probabilities, b.probabilities)
    assert np.argmax(a.probabilities) == np.argmax(b.probabilities)
    c = optimal_action_probs(dyn, noise, costs, 0, cp.DEFAULT_X0, 5000, RngStream(21), workers=3)
    assert np.array_equal(a.probabilities, c.probabilities)


def test_closed_loop_bit_identical():
    dyn, noise, costs = cp.dynamics(), cp.default_noise(), cp.costs(horizon=8)
    a = run_closed_loop(dyn, noise, costs, cp.DEFAULT_X0, 200, RngStream(2))
    b = run_closed_loop(dyn, noise, costs, cp.DEFAULT_X0, 200, RngStream(2), workers=2)
    assert np.array_equal(a.trajectory.states, b.trajectory.states)
    assert np.array_equal(a.policies, b.policies)


def test_zero_cost_closed_loop_matches_noise_driven():
    dyn, noise, costs = cp.dynamics(), cp.default_noise(), CostSchedule.zero(12)
    loop = [run_closed_loop(dyn, noise, costs, cp.DEFAULT_X0, 1, RngStream(5, i)).trajectory.states[10, 2]
            for i in range(400)]
    free = [rollout_noise_driven(dyn, noise, cp.DEFAULT_X0, 0, 12, RngStream(6, i)).states[10, 2]
            for i in range(400)]
    assert stats.ks_2samp(loop, free).pvalue > 0.01

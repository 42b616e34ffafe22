import numpy as np
import pytest
from scipy import stats

from klcontrol import lqg
from klcontrol.core import CostSchedule, DynamicsModel, EstimationFailedError, NoiseModel
from klcontrol.path_integral import (
    estimate_log_desirability,
    inverse_cdf_pick,
    log_desirability_batch,
    log_mean_exp,
    normalize_log_weights,
    sample_optimal_control_snis,
    summarize_log_weights,
)
from klcontrol.rng import RngStream

LQ = lqg.LqgProblem.create(0.85, 0.10, 3.0, 1.5, 30)
LQ_SOL = lqg.solve_riccati(LQ)
sine = DynamicsModel(1, 1, lambda x, u: np.sin(x) + u)


@pytest.mark.parametrize("S", [1, 7, 1500])
def test_zero_cost_gives_exactly_zero(S):
    est = estimate_log_desirability(sine, NoiseModel.gaussian(2.0), CostSchedule.zero(8), 0, [0.3], S, RngStream(1))
    assert est.log_z == 0.0


def test_terminal_stage_is_exact():
    costs = CostSchedule.stationary(lambda x: 2.0 * x[..., 0] ** 2, 4)
    est = estimate_log_desirability(sine, NoiseModel.gaussian(1.0), costs, 4, [0.5], 1, RngStream(1))
    assert est.log_z == -0.5
    assert est.std_error_log == 0.0


def test_lq_value_within_standard_error():
    exact = -lqg.log_desirability_backward(LQ, LQ_SOL, 0, [1.0])
    est = estimate_log_desirability(LQ.dynamics(), LQ.noise(), LQ.costs(), 0, [1.0], 3000, RngStream(99))
    assert abs(est.value - exact) <= 3 * est.std_error_log


def test_estimate_converges_with_many_samples():
    exact = lqg.log_desirability_backward(LQ, LQ_SOL, 10, [-1.5])
    est = estimate_log_desirability(LQ.dynamics(), LQ.noise(), LQ.costs(), 10, [-1.5], 200_000, RngStream(5))
    assert est.log_z == pytest.approx(exact, abs=max(4 * est.std_error_log, 1e-3))
    assert est.std_error_log < 0.01


def test_batch_matches_single_estimates_with_shared_paths():
    dyn, noise, costs = LQ.dynamics(), LQ.noise(), LQ.costs()
    rng = RngStream(4)
    batch = log_desirability_batch(dyn, noise, costs, 3, [[0.5], [-1.0]], 500, rng)
    single = [estimate_log_desirability(dyn, noise, costs, 3, [x], 500, rng).log_z for x in (0.5, -1.0)]
    np.testing.assert_allclose(batch, single, rtol=1e-14)


def test_std_error_single_sample_is_infinite():
    assert summarize_log_weights(np.array([-1.0])).std_error_log == np.inf


def test_all_infinite_costs_fail():
    costs = CostSchedule.stationary(lambda x: np.full(x.shape[:-1], np.inf), 3)
    with pytest.raises(EstimationFailedError):
        estimate_log_desirability(sine, NoiseModel.gaussian(1.0), costs, 0, [0.0], 10, RngStream(0))


def test_log_mean_exp_handles_extremes():
    assert log_mean_exp(np.array([-1000.0, -1000.0])) == -1000.0
    assert log_mean_exp(np.array([-np.inf, 0.0])) == pytest.approx(np.log(0.5))
    assert log_mean_exp(np.array([-np.inf, -np.inf])) == -np.inf


def test_degenerate_simplex_pick():
    w = normalize_log_weights(np.array([-np.inf, 0.3]))
    assert w.tolist() == [0.0, 1.0]
    for u in (0.0, 0.5, 1.0 - 1e-16):
        assert inverse_cdf_pick(w, u) == 1


def test_two_candidates_one_forbidden():
    # successors above zero are infinitely costly
    costs = CostSchedule.stationary(lambda x: np.zeros(x.shape[:-1]), 1,
                                    terminal=lambda x: np.where(x[..., 0] > 0, np.inf, 0.0))
    dyn = DynamicsModel(1, 1, lambda x, u: x + u)
    noise, seen = NoiseModel.gaussian(1.0), 0
    for s in range(200):
        cand = noise.sample(0, 1, RngStream(s).substream("candidates"), 2)[:, 0, 0]
        if (cand > 0).all():
            with pytest.raises(EstimationFailedError):
                sample_optimal_control_snis(dyn, noise, costs, 0, [0.0], RngStream(s), 2, 1)
            continue
        ps = sample_optimal_control_snis(dyn, noise, costs, 0, [0.0], RngStream(s), 2, 1)
        ok = ps.candidates[:, 0] <= 0
        if ok.sum() == 1:
            seen += 1
            assert ps.selected == int(np.flatnonzero(ok)[0])
            assert ps.normalized_weights[~ok][0] == 0.0
    assert seen > 50


def test_zero_cost_snis_reproduces_noise_law():
    noise = NoiseModel.gaussian(1.5)
    u = np.array([
        sample_optimal_control_snis(sine, noise, CostSchedule.zero(3), 0, [0.0], RngStream(7, i), 8, 4).control[0]
        for i in range(2000)
    ])
    assert stats.kstest(u / np.sqrt(1.5), "norm").pvalue > 0.01


def test_snis_mean_approaches_gaussian_policy():
    st = lqg.policy_stage(LQ, LQ_SOL, 29)
    dyn, noise, costs = LQ.dynamics(), LQ.noise(), LQ.costs()
    u = np.array([
        sample_optimal_control_snis(dyn, noise, costs, 29, [1.0], RngStream(3, i)).control[0]
        for i in range(10_000)
    ])
    assert st.mean([1.0])[0] == pytest.approx(-0.366029, abs=1e-6)
    assert u.mean() == pytest.approx(-0.366029, abs=0.06)
    assert u.var() == pytest.approx(st.covariance[0, 0], rel=0.1)


def test_standard_error_calibration_across_seeds():
    # pooled over seeds, 3·stderr should cover the error at most grid points,
    # with misses concentrated at the heavy-tailed edges |x| >= 2.5
    dyn, noise, costs = LQ.dynamics(), LQ.noise(), LQ.costs()
    xs = np.arange(-3.0, 3.01, 0.5)
    exact = np.array([-lqg.log_desirability_backward(LQ, LQ_SOL, 0, [x]) for x in xs])
    hits = np.zeros(len(xs))
    seeds = 30
    for s in range(seeds):
        for i, x in enumerate(xs):
            e = estimate_log_desirability(dyn, noise, costs, 0, [x], 3000, RngStream(1000 + s, i))
            hits[i] += abs(e.value - exact[i]) <= 3 * e.std_error_log
    rate = hits / seeds
    assert rate.mean() >= 0.9
    assert rate[np.abs(xs) <= 2.0].min() >= 0.9

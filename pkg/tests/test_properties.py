import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from klcontrol import cartpole as cp
from klcontrol import lqg
from klcontrol.core import kl_gaussians
from klcontrol.discrete import discretized_gaussian_pmf
from klcontrol.finite_mdp import FiniteMdp, optimal_policy, solve_desirability
from klcontrol.path_integral import inverse_cdf_pick, log_mean_exp, normalize_log_weights
from klcontrol.rng import RngStream

finite = st.floats(-50, 50, allow_nan=False)
log_weights = arrays(float, st.integers(1, 40), elements=finite)
seeds = st.integers(0, 2**32 - 1)


@given(log_weights, st.floats(-100, 100))
def test_log_mean_exp_shift_and_bounds(a, c):
    m = log_mean_exp(a)
    assert a.min() - 1e-9 <= m <= a.max() + 1e-9
    assert np.isclose(log_mean_exp(a + c), m + c, rtol=0, atol=1e-9)


@given(log_weights, st.floats(-100, 100))
def test_normalized_weights_are_a_distribution(a, c):
    w = normalize_log_weights(a)
    assert abs(w.sum() - 1.0) < 1e-12 and (w >= 0).all()
    np.testing.assert_allclose(normalize_log_weights(a + c), w, rtol=1e-9, atol=1e-15)


@given(arrays(float, st.integers(1, 20), elements=st.floats(0, 1)), st.floats(0, 1, exclude_max=True))
def test_inverse_cdf_pick_lands_on_positive_mass(p, u):
    if p.sum() == 0:
        return
    p = p / p.sum()
    i = inverse_cdf_pick(p, u)
    assert 0 <= i < len(p) and p[i] > 0


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.integers(1, 9), st.integers(0, 1000))
@settings(max_examples=50)
def test_uniforms_in_unit_interval_and_addressable(seed, index, n, start):
    rng = RngStream(seed, index)
    u = rng.uniforms(n, samples=3, start=start)
    assert u.shape == (3, n) and (u >= 0).all() and (u < 1).all()
    np.testing.assert_array_equal(rng.uniforms(1, samples=3, start=start + n - 1)[:, 0], u[:, -1])


@given(seeds, st.integers(1, 3), st.integers(1, 15))
@settings(max_examples=40, deadline=None)
def test_lqg_forms_agree_and_covariance_shrinks(seed, n, N):
    rng = np.random.default_rng(seed)
    prob = lqg.random_problem(rng, n, N)
    sol = lqg.solve_riccati(prob)
    k = int(rng.integers(0, N + 1))
    x = rng.standard_normal(n)
    assert abs(lqg.log_desirability_forward(prob, k, x) - lqg.log_desirability_backward(prob, sol, k, x)) < 1e-8
    assert abs(lqg.lqr_value(prob, k, x, "riccati", sol) - lqg.lqr_value(prob, k, x, "batch")) < 1e-8
    for P in sol.P:
        assert np.linalg.eigvalsh(P).min() > 0
    if k < N:
        C = lqg.policy_stage(prob, sol, k).covariance
        # C = (Σ⁻¹ + BᵀPB)⁻¹ never exceeds Σ
        assert np.linalg.eigvalsh(prob.Sigma[k] - C).min() > -1e-10


@given(seeds, st.integers(2, 5), st.integers(1, 6), st.floats(-5, 5))
@settings(max_examples=40, deadline=None)
def test_mdp_cost_shift_and_stochastic_rows(seed, X, N, c):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(X), size=(N, X))
    costs = rng.uniform(0, 3, size=(N + 1, X))
    mdp = FiniteMdp.create(P, costs)
    tab = solve_desirability(mdp)
    shifted = costs.copy()
    shifted[int(rng.integers(0, N + 1))] += c
    tab2 = solve_desirability(FiniteMdp.create(P, shifted))
    np.testing.assert_allclose(tab2.log_z[0], tab.log_z[0] - c, atol=1e-10)
    pol = optimal_policy(mdp, tab)
    np.testing.assert_allclose(pol.sum(axis=2), 1.0, atol=1e-12)
    assert (tab.log_z <= -costs.min(axis=1, keepdims=True) + 1e-12).all()


state = arrays(float, 4, elements=st.floats(-10, 10))


@given(state, st.floats(-20, 20), st.floats(-100, 100))
def test_cartpole_shift_and_cost_symmetry(s, u, c):
    a = cp.euler_step(cp.CartPoleParams(), s, u)
    b = cp.euler_step(cp.CartPoleParams(), s + [c, 0, 0, 0], u)
    np.testing.assert_array_equal(a[1:], b[1:])
    q = cp.DEFAULT_Q
    assert cp.stage_cost(q, s) >= 0
    assert cp.stage_cost(q, -s) == cp.stage_cost(q, s)


@given(st.floats(0.1, 50), st.integers(1, 15), st.floats(0.1, 5))
def test_discretized_pmf_normalized_and_even(sigma, count, step):
    noise = discretized_gaussian_pmf(cp.action_grid(step, count), sigma)
    p = noise.pmf(0)
    assert abs(p.sum() - 1) <= 1e-12
    np.testing.assert_array_equal(p, p[::-1])


@given(seeds, st.integers(1, 3))
def test_kl_nonnegative(seed, m):
    rng = np.random.default_rng(seed)
    def spd():
        X = rng.standard_normal((m, m))
        return X @ X.T + 0.1 * np.eye(m)
    assert kl_gaussians(rng.standard_normal(m), spd(), rng.standard_normal(m), spd()) >= 0.0

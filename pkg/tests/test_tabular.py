import importlib.util
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trefree import tabular as tb
from trefree.tabular import Mdp, TabularPolicy


def one_state_mdp(r=1.0, gamma=0.9):
    return Mdp([[[1.0]]], [[r]], [1.0], gamma)


def value_iteration(mdp, pi, tol=1e-13):
    """Policy evaluation by fixed-point iteration, independent of the linear solve."""
    V = np.zeros(mdp.n_states)
    for _ in range(100_000):
        V_next = np.array(
            [
                sum(
                    pi.probs[s, a]
                    * (mdp.reward[s, a] + mdp.discount * sum(mdp.transition[s, a, t] * V[t] for t in range(mdp.n_states)))
                    for a in range(mdp.n_actions)
                )
                for s in range(mdp.n_states)
            ]
        )
        if np.max(np.abs(V_next - V)) < tol:
            return V_next
        V = V_next
    raise RuntimeError("value iteration did not converge")


def instance(seed, n_states=None, n_actions=None, gamma=0.9):
    rng = np.random.default_rng(seed)
    S = n_states or int(rng.integers(1, 6))
    A = n_actions or int(rng.integers(1, 4))
    mdp = tb.random_mdp(rng, S, A, gamma)
    return rng, mdp, tb.random_policy(rng, S, A), tb.random_policy(rng, S, A)


# -- validation ---------------------------------------------------------------


def test_mdp_rejects_bad_tables():
    with pytest.raises(ValueError, match="sum to 1"):
        Mdp([[[0.5]]], [[0.0]], [1.0], 0.5)
    with pytest.raises(ValueError, match="discount"):
        Mdp([[[1.0]]], [[0.0]], [1.0], 1.0)
    with pytest.raises(ValueError, match="initial_dist"):
        Mdp([[[1.0]]], [[0.0]], [0.9], 0.5)
    with pytest.raises(ValueError, match="negative"):
        Mdp([[[1.5, -0.5], [1.0, 0.0]]] * 2, [[0.0, 0.0]] * 2, [1.0, 0.0], 0.5)
    with pytest.raises(ValueError, match="reward shape"):
        Mdp([[[1.0]]], [[0.0, 1.0]], [1.0], 0.5)


def test_policy_shape_mismatch():
    mdp = one_state_mdp()
    with pytest.raises(ValueError, match="does not match"):
        tb.solve_value(mdp, TabularPolicy([[0.5, 0.5]]))
    with pytest.raises(ValueError, match="length"):
        tb.state_action_fn_from_f(mdp, [0.0, 1.0])


def test_json_roundtrip(tmp_path):
    _, mdp, _, _ = instance(3, 4, 3)
    path = tmp_path / "mdp.json"
    mdp.save(path)
    back = Mdp.load(path)
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    assert back.discount == mdp.discount
    assert set(json.loads(path.read_text())) == {"n_states", "n_actions", "P", "r", "d0", "gamma"}


# -- values and advantages ------------------------------------------------------


def test_value_single_state():
    V = tb.solve_value(one_state_mdp(), TabularPolicy([[1.0]]))
    assert V == pytest.approx([10.0], abs=1e-12)


def test_value_zero_reward():
    _, mdp, pi, _ = instance(1, 4, 3)
    zero = Mdp(mdp.transition, np.zeros_like(mdp.reward), mdp.initial_dist, mdp.discount)
    np.testing.assert_array_equal(tb.solve_value(zero, pi), 0.0)
    assert tb.performance(zero, pi) == 0.0


def test_value_matches_value_iteration():
    _, mdp, pi, _ = instance(11, 4, 3)
    np.testing.assert_allclose(tb.solve_value(mdp, pi), value_iteration(mdp, pi), atol=1e-11)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bellman_residual(seed):
    _, mdp, pi, _ = instance(seed)
    V = tb.solve_value(mdp, pi)
    residual = V - (tb.policy_reward(mdp, pi) + mdp.discount * tb.policy_transition(mdp, pi) @ V)
    assert np.max(np.abs(residual)) <= 1e-10


def test_advantage_single_action_is_zero():
    _, mdp, _, _ = instance(5, 3, 1)
    _, A = tb.q_and_advantage(mdp, TabularPolicy(np.ones((3, 1))))
    np.testing.assert_allclose(A, 0.0, atol=1e-12)


def test_advantage_bandit():
    mdp = Mdp([[[1.0], [1.0]]], [[1.0, 0.0]], [1.0], 0.0)
    Q, A = tb.q_and_advantage(mdp, TabularPolicy([[0.5, 0.5]]))
    np.testing.assert_allclose(Q, [[1.0, 0.0]])
    np.testing.assert_allclose(tb.solve_value(mdp, TabularPolicy([[0.5, 0.5]])), [0.5])
    np.testing.assert_allclose(A, [[0.5, -0.5]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_advantage_is_centered(seed):
    _, mdp, pi, _ = instance(seed)
    _, A = tb.q_and_advantage(mdp, pi)
    assert np.max(np.abs(np.sum(pi.probs * A, axis=1))) <= 1e-10


# -- discounted state distribution -------------------------------------------------


def test_state_dist_single_state():
    d = tb.discounted_state_dist(one_state_mdp(), TabularPolicy([[1.0]]))
    assert d == pytest.approx([10.0], abs=1e-12)


def test_state_dist_gamma_zero():
    _, mdp, pi, _ = instance(2, 4, 2, gamma=0.0)
    np.testing.assert_allclose(tb.discounted_state_dist(mdp, pi), mdp.initial_dist, atol=1e-15)


def test_state_dist_power_series():
    _, mdp, pi, _ = instance(21, 5, 3)
    P_pi = tb.policy_transition(mdp, pi)
    expected = np.zeros(5)
    row = mdp.initial_dist.copy()
    for t in range(501):
        expected += mdp.discount**t * row
        row = row @ P_pi
    np.testing.assert_allclose(tb.discounted_state_dist(mdp, pi), expected, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.99))
def test_state_dist_mass(seed, gamma):
    _, mdp, pi, _ = instance(seed, gamma=gamma)
    d = tb.discounted_state_dist(mdp, pi)
    assert abs(d.sum() - 1.0 / (1.0 - gamma)) <= 1e-10
    assert abs(tb.discounted_state_dist(mdp, pi, normalized=True).sum() - 1.0) <= 1e-10


# -- performance ---------------------------------------------------------------------


def test_performance_single_state():
    assert tb.performance(one_state_mdp(), TabularPolicy([[1.0]])) == pytest.approx(10.0, abs=1e-12)


def test_performance_monte_carlo():
    rng, mdp, pi, _ = instance(31, 4, 3)
    n, horizon = 100_000, 300  # 0.9**300 ~ 2e-14
    S, A = mdp.n_states, mdp.n_actions
    states = rng.choice(S, size=n, p=mdp.initial_dist)
    returns = np.zeros(n)
    cum_pi = np.cumsum(pi.probs, axis=1)
    cum_P = np.cumsum(mdp.transition, axis=2)
    for t in range(horizon):
        actions = np.minimum((rng.random(n)[:, None] > cum_pi[states]).sum(axis=1), A - 1)
        returns += mdp.discount**t * mdp.reward[states, actions]
        states = np.minimum((rng.random(n)[:, None] > cum_P[states, actions]).sum(axis=1), S - 1)
    se = returns.std(ddof=1) / np.sqrt(n)
    assert abs(returns.mean() - tb.performance(mdp, pi)) <= 3 * se


# -- state-action functions and the identity ---------------------------------------------


def test_saf_zero_f_is_reward():
    _, mdp, _, _ = instance(4, 3, 2)
    saf = tb.state_action_fn_from_f(mdp, np.zeros(3))
    np.testing.assert_array_equal(saf.values, mdp.reward)


def test_saf_from_value_is_advantage():
    _, mdp, pi, _ = instance(6, 4, 3)
    saf = tb.state_action_fn_from_f(mdp, tb.solve_value(mdp, pi))
    _, A = tb.q_and_advantage(mdp, pi)
    np.testing.assert_allclose(saf.values, A, atol=1e-10)


def test_saf_constant_shift():
    _, mdp, pi, _ = instance(7, 4, 3)
    V = tb.solve_value(mdp, pi)
    c = 2.5
    base = tb.state_action_fn_from_f(mdp, V).values
    shifted = tb.state_action_fn_from_f(mdp, V + c).values
    np.testing.assert_allclose(shifted - base, (mdp.discount - 1.0) * c, atol=1e-12)


def test_generator_invariant():
    _, mdp, _, _ = instance(8, 4, 3)
    f = np.random.default_rng(0).normal(size=4)
    saf = tb.state_action_fn_from_f(mdp, f)
    for s in range(4):
        for a in range(3):
            expected = mdp.reward[s, a] + mdp.discount * sum(mdp.transition[s, a, t] * f[t] for t in range(4)) - f[s]
            assert abs(saf.values[s, a] - expected) <= 1e-10


def test_identity_same_policy():
    _, mdp, pi, _ = instance(9, 4, 3)
    saf = tb.state_action_fn_from_f(mdp, np.arange(4.0))
    lhs, rhs = tb.performance_difference(mdp, pi, pi, saf)
    assert lhs == 0.0
    assert abs(rhs) <= 1e-12


def test_identity_reduces_to_classic_form():
    _, mdp, pi, pi_new = instance(10, 4, 3)
    saf = tb.state_action_fn_from_f(mdp, tb.solve_value(mdp, pi))
    _, rhs = tb.performance_difference(mdp, pi_new, pi, saf)
    _, A = tb.q_and_advantage(mdp, pi)
    classic = tb.discounted_state_dist(mdp, pi_new) @ np.sum(pi_new.probs * A, axis=1)
    assert rhs == pytest.approx(classic, abs=1e-10)


def test_identity_randomized():
    for seed in range(100):
        rng, mdp, pi, pi_new = instance(1000 + seed)
        saf = tb.state_action_fn_from_f(mdp, rng.normal(scale=3.0, size=mdp.n_states))
        lhs, rhs = tb.performance_difference(mdp, pi_new, pi, saf)
        assert abs(lhs - rhs) <= 1e-9


# -- surrogates --------------------------------------------------------------------------


def test_surrogate_L_same_policy():
    _, mdp, pi, _ = instance(12, 4, 3)
    assert tb.surrogate_L(mdp, pi, pi) == pytest.approx(tb.performance(mdp, pi), abs=1e-10)


def test_surrogate_L_brute_force():
    _, mdp, pi, pi_new = instance(13, 4, 3)
    V = value_iteration(mdp, pi)
    P_pi = tb.policy_transition(mdp, pi)
    d = np.zeros(4)
    row = mdp.initial_dist.copy()
    for t in range(800):
        d += mdp.discount**t * row
        row = row @ P_pi
    total = mdp.initial_dist @ V
    for s in range(4):
        for a in range(3):
            q = mdp.reward[s, a] + mdp.discount * mdp.transition[s, a] @ V
            total += d[s] * pi_new.probs[s, a] * (q - V[s])
    assert tb.surrogate_L(mdp, pi_new, pi) == pytest.approx(total, abs=1e-9)


def softmax_policy(theta):
    z = np.exp(theta - theta.max(axis=1, keepdims=True))
    return TabularPolicy(z / z.sum(axis=1, keepdims=True))


def test_surrogate_L_first_order_match():
    rng, mdp, _, _ = instance(14, 4, 3)
    theta0 = rng.normal(size=(4, 3))
    pi0 = softmax_policy(theta0)
    h = 1e-5
    for s in range(4):
        for a in range(3):
            e = np.zeros_like(theta0)
            e[s, a] = h
            dJ = (tb.performance(mdp, softmax_policy(theta0 + e)) - tb.performance(mdp, softmax_policy(theta0 - e))) / (2 * h)
            dL = (tb.surrogate_L(mdp, softmax_policy(theta0 + e), pi0) - tb.surrogate_L(mdp, softmax_policy(theta0 - e), pi0)) / (2 * h)
            assert abs(dL - dJ) <= 1e-5 * max(abs(dJ), 1e-8)


def test_surrogate_G_same_policy():
    _, mdp, pi, _ = instance(15, 4, 3)
    saf = tb.state_action_fn_from_f(mdp, np.ones(4))
    assert tb.surrogate_G(mdp, pi, pi, saf) == 0.0


@pytest.mark.parametrize("normalized", [False, True])
def test_surrogate_G_vs_L(normalized):
    _, mdp, pi, pi_new = instance(16, 4, 3)
    saf = tb.state_action_fn_from_f(mdp, tb.solve_value(mdp, pi))
    G = tb.surrogate_G(mdp, pi_new, pi, saf, normalized=normalized)
    L_minus_J = tb.surrogate_L(mdp, pi_new, pi) - tb.performance(mdp, pi)
    scale = (1.0 - mdp.discount) if normalized else 1.0
    assert G == pytest.approx(scale * L_minus_J, abs=1e-10)


def test_surrogate_G_brute_force():
    rng, mdp, pi, pi_new = instance(17, 5, 3)
    f = rng.normal(size=5)
    A = tb.state_action_fn_from_f(mdp, f)
    d = tb.discounted_state_dist(mdp, pi)
    total = 0.0
    for s in range(5):
        for a in range(3):
            total += d[s] * pi.probs[s, a] * (pi_new.probs[s, a] / pi.probs[s, a] - 1.0) * A.values[s, a]
    assert tb.surrogate_G(mdp, pi_new, pi, A) == pytest.approx(total, abs=1e-12)


def test_surrogate_G_zero_denominator():
    mdp = Mdp([[[1.0], [1.0]]], [[1.0, 0.5]], [1.0], 0.5)
    saf = tb.state_action_fn_from_f(mdp, [0.0])
    with pytest.raises(ZeroDivisionError, match=r"s=0, a=1"):
        tb.surrogate_G(mdp, TabularPolicy([[0.5, 0.5]]), TabularPolicy([[1.0, 0.0]]), saf)


# -- divergences --------------------------------------------------------------------------


def test_divergences():
    a = TabularPolicy([[1.0, 0.0]])
    b = TabularPolicy([[0.5, 0.5]])
    assert tb.max_tv(a, a) == 0.0 and tb.max_kl(a, a) == 0.0
    assert tb.max_tv(a, b) == 0.5
    assert tb.max_kl(a, b) == pytest.approx(np.log(2.0))
    with pytest.raises(ValueError, match="support"):
        tb.max_kl(b, a)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pinsker(seed):
    rng = np.random.default_rng(seed)
    a, b = tb.random_policy(rng, 5, 3), tb.random_policy(rng, 5, 3)
    tv = 0.5 * np.abs(a.probs - b.probs).sum(axis=1)
    assert np.all(tv**2 <= 0.5 * tb.kl_per_state(a, b) + 1e-15)


# -- bounds ---------------------------------------------------------------------------------


def test_theorem1_same_policy():
    _, mdp, pi, _ = instance(18, 4, 3)
    report = tb.check_theorem1(mdp, pi, pi)
    assert report.holds and report.penalty == 0.0
    assert report.lhs == pytest.approx(report.surrogate, abs=1e-10)


def test_theorem1_greedy():
    for seed in range(20):
        _, mdp, pi, _ = instance(200 + seed)
        _, A = tb.q_and_advantage(mdp, pi)
        assert tb.check_theorem1(mdp, tb.greedy_policy(A), pi).holds


def test_theorem2_same_policy():
    _, mdp, pi, _ = instance(19, 4, 3)
    saf = tb.state_action_fn_from_f(mdp, np.arange(4.0))
    report = tb.check_theorem2(mdp, pi, pi, saf)
    assert report.lhs == 0.0 and report.surrogate == 0.0
    assert report.penalty >= 0.0 and report.holds


def test_theorem2_value_f_has_zero_epsilon():
    # an exact-arithmetic 0 is not available through a linear solve; the centering error is ~1e-16
    _, mdp, pi, pi_new = instance(20, 4, 3)
    saf = tb.state_action_fn_from_f(mdp, tb.solve_value(mdp, pi))
    assert tb.check_theorem2(mdp, pi_new, pi, saf).epsilon_term <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_theorem2_penalty_nonnegative(seed):
    rng, mdp, pi, pi_new = instance(seed)
    saf = tb.state_action_fn_from_f(mdp, rng.normal(size=mdp.n_states))
    report = tb.check_theorem2(mdp, pi_new, pi, saf)
    assert report.penalty >= 0.0
    assert report.holds == (report.lhs >= report.surrogate - report.penalty - 1e-9)


def test_theorem2_calibration_fixture_consistent():
    path = Path(__file__).parents[1] / "scripts" / "calibrate_theorem2.py"
    spec = importlib.util.spec_from_file_location("calibrate_theorem2", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    fixture = json.loads((Path(__file__).parent / "fixtures" / "theorem2_calibration.json").read_text())
    rerun = mod.sweep(50, fixture["seed"])
    conv = fixture["asserted_convention"]
    for gamma, res in rerun.items():
        assert res[conv]["violations"] == 0 == fixture["results"][gamma][conv]["violations"]

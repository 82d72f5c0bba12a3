import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from teamdp.mdp import (
    CountableMdp,
    MdpValidationError,
    bellman_backup,
    extract_policy,
    finite_horizon_dp,
    policy_evaluation,
    policy_matrix,
    q_values,
    value_iteration,
    write_values_csv,
)


def random_mdp(rng, n, m, beta=0.9, density=0.6):
    P = []
    for _ in range(m):
        w = rng.random((n, n)) * (rng.random((n, n)) < density)
        w[np.arange(n), rng.integers(0, n, n)] += 0.1  # no empty rows
        P.append(sp.csr_matrix(w / w.sum(axis=1, keepdims=True)))
    return CountableMdp(P, rng.normal(size=(n, m)), beta)


def linear_solve(mdp, policy):
    P, r = policy_matrix(mdp, policy)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P.toarray(), r)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), beta=st.floats(0.1, 0.95))
def test_value_iteration_beats_every_deterministic_policy(seed, beta):
    mdp = random_mdp(np.random.default_rng(seed), 5, 2, beta)
    res = value_iteration(mdp, tol=1e-12)
    assert res.converged
    brute = np.max([linear_solve(mdp, np.array(pol)) for pol in itertools.product(range(2), repeat=5)], axis=0)
    np.testing.assert_allclose(res.values, brute, atol=1e-9)
    pol = extract_policy(mdp, res.values)
    np.testing.assert_allclose(linear_solve(mdp, pol), brute, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_policy_evaluation_matches_linear_solve(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 3)
    pol = rng.integers(0, 3, 4)
    res = policy_evaluation(mdp, pol, tol=1e-13)
    np.testing.assert_allclose(res.values, linear_solve(mdp, pol), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 12), m=st.integers(1, 4))
def test_backup_is_a_contraction(seed, n, m):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, n, m)
    u, v = rng.normal(size=n) * 5, rng.normal(size=n) * 5
    tu, _ = bellman_backup(mdp, u)
    tv, _ = bellman_backup(mdp, v)
    assert np.abs(tu - tv).max() <= mdp.discount * np.abs(u - v).max() + 1e-12
    res = value_iteration(mdp, tol=1e-11)
    r = np.array(res.residuals)
    assert np.all(r[1:] <= mdp.discount * r[:-1] + 1e-14)


def test_zero_rewards_converge_at_once():
    mdp = random_mdp(np.random.default_rng(0), 6, 2)
    mdp = CountableMdp(mdp.P, np.zeros((6, 2)), 0.9)
    res = value_iteration(mdp)
    assert res.iterations == 1 and res.converged
    assert np.all(res.values == 0)


def test_self_loop():
    mdp = CountableMdp([sp.csr_matrix([[1.0]])], np.array([[1.0]]), 0.9)
    assert value_iteration(mdp, tol=1e-12).values[0] == pytest.approx(10.0, abs=1e-10)
    assert policy_evaluation(mdp, np.array([0]), tol=1e-12).values[0] == pytest.approx(10.0, abs=1e-10)


def test_single_action_policy():
    mdp = random_mdp(np.random.default_rng(1), 5, 1)
    assert np.all(extract_policy(mdp, value_iteration(mdp).values) == 0)


def test_ties_go_to_lowest_action_or_preferred():
    P = [sp.identity(2, format="csr")] * 3
    mdp = CountableMdp(P, np.ones((2, 3)), 0.5)
    v = value_iteration(mdp).values
    assert list(extract_policy(mdp, v)) == [0, 0]
    assert list(extract_policy(mdp, v, prefer=np.array([2, 1]))) == [2, 1]


def test_unavailable_actions_are_masked():
    P = [sp.identity(2, format="csr"), sp.csr_matrix([[0, 1.0], [0, 0]])]
    allowed = np.array([[True, True], [True, False]])
    mdp = CountableMdp(P, np.array([[0.0, 5.0], [0.0, 100.0]]), 0.9, allowed=allowed)
    Q = q_values(mdp, np.zeros(2))
    assert Q[1, 1] == -np.inf
    assert list(extract_policy(mdp, value_iteration(mdp).values)) == [1, 0]
    with pytest.raises(MdpValidationError):
        policy_matrix(mdp, np.array([0, 1]))


def test_finite_horizon_first_stage_is_best_reward():
    mdp = random_mdp(np.random.default_rng(2), 5, 3)
    stages = finite_horizon_dp(mdp, 40)
    np.testing.assert_allclose(stages[0], mdp.R.max(axis=1))
    inf = value_iteration(mdp, tol=1e-12).values
    assert np.abs(stages[-1] - inf).max() <= mdp.discount**40 * np.abs(mdp.R).max() / (1 - mdp.discount) + 1e-12


@pytest.mark.parametrize(
    "P, R, match",
    [
        ([sp.csr_matrix([[1.2, -0.2]] * 2)], np.zeros((2, 1)), "negative"),
        ([sp.csr_matrix([[0.5, 0.4]] * 2)], np.zeros((2, 1)), "sum to"),
        ([sp.identity(2, format="csr")], np.array([[np.nan], [0.0]]), "finite"),
    ],
)
def test_validation_errors(P, R, match):
    with pytest.raises(MdpValidationError, match=match):
        CountableMdp(P, R, 0.9)


def test_state_without_actions_rejected():
    with pytest.raises(MdpValidationError, match="no available action"):
        CountableMdp([sp.identity(2, format="csr")], np.zeros((2, 1)), 0.9, allowed=np.array([[True], [False]]))


def test_bad_discount_rejected():
    with pytest.raises(MdpValidationError):
        CountableMdp([sp.identity(1, format="csr")], np.zeros((1, 1)), 1.0)


def test_callback_constructor_and_csv(tmp_path):
    def actions(s):
        return ["stay", "go"] if s == "a" else ["stay"]

    def transitions(s, a):
        if a == "go":
            return [(0.5, "a", 1.0), (0.5, "b", 3.0)]
        return [(1.0, s, 0.0)]

    mdp = CountableMdp.from_transitions(["a", "b"], actions, transitions, 0.5)
    assert mdp.action_labels == ["go", "stay"]
    assert mdp.actions(1) == [1]
    assert sorted(mdp.transitions(0, 0)) == [(0.5, 0, 2.0), (0.5, 1, 2.0)]
    res = value_iteration(mdp, tol=1e-12)
    assert res.values[0] == pytest.approx(2.0 / (1 - 0.25), abs=1e-9)
    write_values_csv(mdp, res.values, tmp_path / "v.csv")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "state_id,value" and lines[1].startswith("a,")
    with pytest.raises(MdpValidationError, match="not an enumerated state"):
        CountableMdp.from_transitions(["a"], lambda s: [0], lambda s, a: [(1.0, "z", 0.0)], 0.5)


def test_validation_does_not_touch_caller_matrices():
    P = sp.csr_matrix(np.array([[0.5, 0.5 + 1e-13], [0.0, 1.0]]))
    before = P.data.copy()
    CountableMdp([P], np.zeros((2, 1)), 0.9)
    np.testing.assert_array_equal(P.data, before)


def test_nonconvergence_is_flagged():
    mdp = CountableMdp([sp.csr_matrix([[1.0]])], np.array([[1.0]]), 0.99)
    res = value_iteration(mdp, tol=1e-12, max_iter=5)
    assert not res.converged and res.iterations == 5

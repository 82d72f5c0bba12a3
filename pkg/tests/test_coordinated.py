import itertools
import json
from collections import defaultdict

import numpy as np
import pytest

from teamdp.beliefs import INF, PRESCRIPTIONS, RecursionMode, advance_indices, q_value, z_value
from teamdp.coordinated import (
    CoordSpace,
    PatternRule,
    PatternSpec,
    build_coordinated_mdp,
    decentralize,
    match_pattern,
    match_solution,
    pattern_d,
    pattern_dbar,
    pattern_h,
    pattern_hhat,
    pattern_report,
    published_strategies,
    region_states,
    two_slot_plan_value,
    write_policy_csv,
)
from teamdp.mdp import finite_horizon_dp
from teamdp.model import ModelParams, feedback_of, simulate_batch, two_device_reward

ASYM = ModelParams(p1=0.25, p2=0.4, alpha0=0.65, alpha1=0.8, c=0.2)


def test_space_round_trip():
    space = CoordSpace(5, 4)
    assert len(space) == 6 * 6 * 2 * 4
    for i, st in enumerate(space):
        assert space.state_index(*st) == i
    assert space[len(space) - 1] == (INF, INF, 1, 4)
    with pytest.raises(IndexError):
        space[len(space)]
    with pytest.raises(ValueError):
        space.state_index(6, 1, 0, 1)


def expected_row(params, space, state, d, mode):
    """Successor distribution by enumerating the hidden state under the product belief."""
    k, l, s, m = state
    K, M = space.K, space.M
    z1, z2, q = z_value(params, 1, k), z_value(params, 2, l), q_value(params, s, m)
    code = space.encode_buffer
    dist, reward = defaultdict(float), 0.0
    for n1, n2, x in itertools.product((0, 1), repeat=3):
        w = (z1 if n1 else 1 - z1) * (z2 if n2 else 1 - z2) * (q if x else 1 - q)
        if w == 0:
            continue
        u1, u2 = n1 * d[0], n2 * d[1]
        h = int(feedback_of(x, u1, u2))
        reward += w * float(two_device_reward(params, x, u1, u2))
        nxt = advance_indices(code(k), code(l), s, m, d[0], d[1], u1, u2, h, mode=mode, K=K, M=M)
        dist[int(space.index(*nxt))] += w
    return dist, reward


@pytest.mark.parametrize("mode", list(RecursionMode))
def test_transitions_follow_index_updates(mode):
    space = CoordSpace(8, 6)
    mdp = build_coordinated_mdp(ASYM, 8, 6, mode)
    rng = np.random.default_rng(0)
    for i in rng.choice(len(space), 150, replace=False):
        for a, d in enumerate(PRESCRIPTIONS):
            want, r = expected_row(ASYM, space, space[i], d, mode)
            got = defaultdict(float)
            for prob, j, rew in mdp.transitions(i, a):
                got[j] += prob
            assert rew == pytest.approx(r, abs=1e-14)
            assert set(k for k, v in got.items() if v > 0) == set(k for k, v in want.items() if v > 0)
            for j, v in want.items():
                assert got[j] == pytest.approx(v, abs=1e-14)


def test_symmetric_values(small_coordinated):
    sol = small_coordinated(0.3)
    V = sol.value_grid()
    np.testing.assert_allclose(V, V.transpose(1, 0, 2, 3), atol=1e-12)


def test_pattern_functions():
    assert pattern_d(3, 1) == {(1, 0)} and pattern_d(1, INF) == {(0, 1)}
    assert pattern_d(2, 2) == {(1, 0), (0, 1)}
    assert pattern_dbar(3, 1) == {(0, 1)}
    assert pattern_h(2, 2, 1) == {(1, 1)} and pattern_h(2, 3, 1) == {(1, 0)}
    assert pattern_h(INF, INF, 1) == {(1, 1)}
    assert pattern_hhat(1, 1, 1) == {(0, 0)} and pattern_hhat(1, 1, 2) == {(0, 1)}


def test_reference_specs_load():
    params, specs = published_strategies()
    assert sorted(specs) == [0.1, 0.2, 0.3, 0.4, 0.5]
    assert params["p1"] == 0.3 and params["beta"] == 0.9
    assert specs[0.4].allowed(1, 3, 1, 2) == {(0, 0)}
    assert specs[0.4].allowed(1, 3, 1, 3) == {(0, 1)}
    assert specs[0.1].allowed(6, 1, 1, 1) == {(1, 0)}
    assert specs[0.1].allowed(5, 1, 1, 1) == {(1, 1)}


def test_uncovered_slice_is_an_error():
    spec = PatternSpec("partial", (PatternRule("d", s=0),))
    with pytest.raises(ValueError):
        spec.allowed(1, 1, 1, 1)


def test_region_must_fit_inside_caps():
    with pytest.raises(ValueError):
        list(region_states(CoordSpace(12, 20), 12))


@pytest.mark.parametrize("mode", ["printed", "bayes"])
def test_moderate_cost_pattern(small_coordinated, mode):
    sol = small_coordinated(0.3, mode)
    spec = published_strategies()[1][0.3]
    assert match_solution(sol, spec).matched
    assert match_pattern(sol.space, sol.policy, spec).matched
    report = pattern_report(sol, match_solution(sol, spec))
    assert report["matched"] and json.dumps(report)


def test_high_cost_fourth_slice_uses_mirrored_rule(small_coordinated):
    """At c = 0.5 the (busy, m = 4) slice is silent at (1, 1) and follows dbar elsewhere."""
    for mode in ("printed", "bayes"):
        sol = small_coordinated(0.5, mode)
        buf = list(range(1, 13)) + [INF]
        for k, l in itertools.product(buf, buf):
            want = {(0, 0)} if max(k, l) <= 1 else pattern_dbar(k, l)
            assert sol.prescription(k, l, 1, 4) in want


def test_two_slot_enumeration():
    mdp = build_coordinated_mdp(ASYM, 10, 10)
    v2 = finite_horizon_dp(mdp, 2)[1]
    space = mdp.labels
    for k, l, s, m in [(1, 1, 0, 1), (2, INF, 1, 3), (INF, 4, 0, 7), (INF, INF, 1, 1)]:
        ref = two_slot_plan_value(ASYM, z_value(ASYM, 1, k), z_value(ASYM, 2, l), q_value(ASYM, s, m))
        assert v2[space.state_index(k, l, s, m)] == pytest.approx(ref, abs=1e-12)


def test_device_controllers_stay_in_lockstep(small_coordinated):
    sol = small_coordinated(0.2)
    c1, c2 = decentralize(sol)

    class Watch:
        def __init__(self, inner, other):
            self.inner, self.other = inner, other

        def reset(self, batch):
            self.inner.reset(batch)

        def act(self, n):
            return self.inner.act(n)

        def observe(self, u1, u2, h):
            self.inner.observe(u1, u2, h)
            if self.other is not None:
                np.testing.assert_array_equal(self.inner.indices, self.other.indices)

    simulate_batch(sol.params, [Watch(c1, None), Watch(c2, c1)], 500, 40, seed=3, reveal_initial_channel=True)


def test_unprescribed_transmission_is_rejected(small_coordinated):
    sol = small_coordinated(0.3)
    c1, _ = decentralize(sol)
    c1.reset(1)
    c1.k[:], c1.l[:], c1.s[:], c1.m[:] = 1, 1, 1, 1  # busy last slot: everyone waits
    assert sol.prescription(1, 1, 1, 1) == (0, 0)
    with pytest.raises(ValueError):
        c1.observe(np.ones(1), np.zeros(1), np.zeros(1))


def test_policy_csv(tmp_path, small_coordinated):
    sol = small_coordinated(0.3)
    write_policy_csv(sol, tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "k,l,s,m,d1,d2,value"
    assert len(rows) == len(sol.space) + 1
    assert any(r.startswith("inf,inf,") for r in rows)

import numpy as np
import pytest

from teamdp.beliefs import RecursionMode, q_value
from teamdp.centralized import (
    CentralizedController,
    CentralizedSpace,
    build_centralized_mdp,
    format_threshold,
    reference_table1,
    solve_centralized,
    write_policy_csv,
)
from teamdp.mdp import CountableMdp, value_iteration
from teamdp.model import NO_OBS, ModelParams


def table_params(p, c):
    return ModelParams(p1=p, p2=p, c=c, alpha0=0.75, alpha1=0.75, r=1.0, beta=0.9)


def callback_mdp(params, M):
    """The same model written out state by state from the slot dynamics."""
    p, c, r = params.p1, params.c, params.r
    states = [(n, s, m) for n in (0, 1) for s in (0, 1) for m in range(1, M + 1)]

    def actions(x):
        return (0, 1) if x[0] == 1 else (0,)

    def transitions(x, u):
        n, s, m = x
        q = q_value(params, s, m)
        aged = min(m + 1, M)
        if u == 0:
            return [(1 - p, (0, s, aged), 0.0), (p, (1, s, aged), 0.0)] if n == 0 else [(1.0, (1, s, aged), 0.0)]
        # idle: success, buffer refills with probability p; busy: packet stays
        return [
            ((1 - q) * (1 - p), (0, 0, 1), r - c),
            ((1 - q) * p, (1, 0, 1), r - c),
            (q, (1, 1, 1), -c),
        ]

    return CountableMdp.from_transitions(states, actions, transitions, params.beta)


@pytest.mark.parametrize("p, c", [(0.1, 0.5), (0.3, 0.3), (0.4, 0.1)])
def test_matches_statewise_construction(p, c):
    params = table_params(p, c)
    sol = solve_centralized(params, M=15, tol=1e-12)
    ref = value_iteration(callback_mdp(params, 15), tol=1e-12)
    np.testing.assert_allclose(sol.values, ref.values, atol=1e-10)


def test_reference_cell():
    assert solve_centralized(table_params(0.3, 0.3)).thresholds == (1, 2)
    assert reference_table1()[(0.3, 0.3)] == (1, 2)


def test_printed_recursion_differs_on_some_cells():
    sol = solve_centralized(table_params(0.3, 0.5), mode=RecursionMode.AS_PRINTED)
    assert sol.thresholds == (1, 6)


def test_expensive_transmission_never_pays():
    sol = solve_centralized(ModelParams(c=1.0))
    assert sol.thresholds == (None, None)
    assert format_threshold(None, 60) == ">=60"
    assert np.all(sol.values == 0)


def test_transmission_sets_are_upward_closed_on_grid():
    for (p, c) in reference_table1():
        assert solve_centralized(table_params(p, c), M=40).is_upward_closed()


def test_empty_buffer_cannot_transmit():
    mdp = build_centralized_mdp(ModelParams(), 10)
    space = mdp.labels
    for i, (n, s, m) in enumerate(space):
        assert mdp.actions(i) == ([0, 1] if n == 1 else [0])
    assert isinstance(space, CentralizedSpace) and len(list(space)) == 40


def test_controller_tracks_feedback():
    tab = np.zeros((2, 5), dtype=int)
    tab[1, 2:] = 1
    tab[0, 4] = 1
    ctl = CentralizedController(tab)
    ctl.reset(2)
    assert list(ctl.act(np.array([1, 1]))) == [1, 1]  # unseen channel sits at (0, M)
    ctl.observe(np.array([1, 0]), np.zeros(2), np.array([1, NO_OBS]))
    assert list(ctl.s) == [1, 0] and list(ctl.m) == [1, 5]
    assert list(ctl.act(np.array([1, 1]))) == [0, 1]


def test_policy_csv(tmp_path):
    sol = solve_centralized(ModelParams(), M=5)
    write_policy_csv(sol, tmp_path / "pol.csv")
    rows = (tmp_path / "pol.csv").read_text().splitlines()
    assert rows[0] == "n,s,m,u,value" and len(rows) == 21

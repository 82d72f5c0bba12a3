import numpy as np
import pytest

from teamdp import pbp
from teamdp.beliefs import INF
from teamdp.centralized import solve_centralized
from teamdp.coordinated import CoordSpace, build_coordinated_mdp, initial_value
from teamdp.mdp import policy_evaluation
from teamdp.model import ModelParams
from teamdp.pbp import (
    DeviceStrategy,
    best_response,
    joint_actions,
    pbp_iteration,
    read_strategy_csv,
    write_strategy_csv,
)

CAP = 15


@pytest.mark.parametrize("mode", ["bayes", "printed"])
@pytest.mark.parametrize("c", [0.1, 0.3, 0.5])
def test_inert_partner_gives_centralized_policy(mode, c):
    params = ModelParams(c=c)
    space = CoordSpace(CAP, CAP)
    br = best_response(params, DeviceStrategy.never(space), 1, CAP, CAP, mode)
    cen = solve_centralized(params, CAP, "bayes").transmit_table()
    grid = br.strategy.bits.reshape(space.shape)
    for kp in range(CAP + 1):
        for lp in range(CAP + 1):
            np.testing.assert_array_equal(grid[kp, lp], cen)


def test_responder_two_mirrors_responder_one():
    params = ModelParams(c=0.3)
    space = CoordSpace(CAP, CAP)
    b1 = best_response(params, DeviceStrategy.never(space), 1, CAP, CAP).strategy.bits.reshape(space.shape)
    b2 = best_response(params, DeviceStrategy.never(space), 2, CAP, CAP).strategy.bits.reshape(space.shape)
    np.testing.assert_array_equal(b1, b2.transpose(1, 0, 2, 3))


def test_always_transmitting_partner_blocks_full_slices():
    space = CoordSpace(CAP, CAP)
    br = best_response(ModelParams(c=0.2), DeviceStrategy.always(space), 1, CAP, CAP)
    grid = br.strategy.bits.reshape(space.shape)
    assert not grid[:, CAP].any()  # partner known full and always sending


def test_optimum_is_person_by_person_optimal(small_coordinated):
    sol = small_coordinated(0.3, cap=CAP)
    v_joint = policy_evaluation(sol.mdp, sol.policy, tol=1e-12).values
    for responder in (1, 2):
        fixed = DeviceStrategy.from_solution(sol, 3 - responder)
        br = best_response(sol.params, fixed, responder, tol=1e-12, coord=sol.mdp,
                           prefer=DeviceStrategy.from_solution(sol, responder))
        assert np.max(br.values - v_joint) <= 1e-9
        assert br.strategy == DeviceStrategy.from_solution(sol, responder)


def test_iteration_from_optimum_stops_after_one_round(small_coordinated):
    sol = small_coordinated(0.2, cap=CAP)
    init = (DeviceStrategy.from_solution(sol, 1), DeviceStrategy.from_solution(sol, 2))
    res = pbp_iteration(sol.params, init, CAP, CAP)
    assert res.converged and res.rounds == 1
    assert res.strategies[0] == init[0] and res.strategies[1] == init[1]
    np.testing.assert_array_equal(joint_actions(*res.strategies), sol.policy)


def test_iteration_from_silence(small_coordinated):
    params = ModelParams(c=0.1)
    space = CoordSpace(CAP, CAP)
    res = pbp_iteration(params, (DeviceStrategy.never(space),) * 2, CAP, CAP)
    assert res.converged
    values = [t["initial_value"] for t in res.trace]
    assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))
    assert values[-1] <= small_coordinated(0.1, cap=CAP).initial_value() + 1e-9
    report = res.report(params, pbp.RecursionMode.BAYES)
    assert report["converged"] and len(report["initial_values"]) == 2 * res.rounds


def test_costly_transmission_keeps_silence():
    space = CoordSpace(CAP, CAP)
    never = DeviceStrategy.never(space)
    res = pbp_iteration(ModelParams(c=1.0), (never, never), CAP, CAP)
    assert res.converged and res.rounds == 1
    assert res.strategies == (never, never)


def test_cycles_are_reported(monkeypatch):
    space = CoordSpace(3, 3)
    a, b = DeviceStrategy.never(space), DeviceStrategy.always(space)
    calls = iter(range(100))

    def flip(params, fixed, responder, **kw):
        n = next(calls)
        strategy = a if (n // 2) % 2 else b
        return pbp.BestResponse(responder, strategy, pbp.SolveResult(np.zeros(len(space)), 1, 0.0, True))

    monkeypatch.setattr(pbp, "best_response", flip)
    res = pbp_iteration(ModelParams(), (a, a), 3, 3, max_rounds=10)
    assert not res.converged
    assert res.cycle == [0, 2]


def test_order_must_be_a_permutation():
    space = CoordSpace(3, 3)
    with pytest.raises(ValueError):
        pbp_iteration(ModelParams(), (DeviceStrategy.never(space),) * 2, 3, 3, order=(1, 1))


def test_strategy_validation_and_csv(tmp_path):
    space = CoordSpace(4, 3)
    with pytest.raises(ValueError):
        DeviceStrategy(space, np.zeros(5))
    with pytest.raises(ValueError):
        DeviceStrategy(space, np.full(len(space), 2))
    rng = np.random.default_rng(0)
    st = DeviceStrategy(space, rng.integers(0, 2, len(space)))
    write_strategy_csv(st, tmp_path / "s.csv")
    assert read_strategy_csv(tmp_path / "s.csv", space) == st
    assert st.at(INF, 2, 1, 3) == st.bits[space.state_index(INF, 2, 1, 3)]


def test_best_response_value_is_joint_value():
    params = ModelParams(c=0.3)
    mdp = build_coordinated_mdp(params, 10, 10)
    space = mdp.labels
    br = best_response(params, DeviceStrategy.never(space), 2, coord=mdp, tol=1e-12)
    joint = joint_actions(DeviceStrategy.never(space), br.strategy)
    v = policy_evaluation(mdp, joint, tol=1e-12).values
    np.testing.assert_allclose(br.values, v, atol=1e-9)
    assert initial_value(params, space, v) > 0

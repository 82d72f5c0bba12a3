"""Monte Carlo evaluation of strategies on the true system, with DP cross-checks.

By default episodes are synchronised: the slot-0 channel state is revealed
to everyone after slot 0 (nobody can transmit then, since buffers start
empty).  From slot 1 on, every belief sits exactly on the reachable index
sets, so the simulated return is comparable with a DP value at a reachable
state.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Any, Sequence


from .beliefs import RecursionMode
from .centralized import centralized_strategy_as_callback, solve_centralized
from .coordinated import DEFAULT_CAP, CoordSpace, decentralize, initial_value, solve_coordinated
from .model import Controller, ModelParams, simulate_batch
from .pbp import DeviceStrategy, PbpResult, controllers as pair_controllers, pbp_iteration

DEFAULT_EPISODES = 200_000


def default_horizon(beta: float, eps: float = 1e-4) -> int:
    """Smallest ``T`` with ``beta**T <= eps``."""
    return max(1, math.ceil(math.log(eps) / math.log(beta) - 1e-12))


def tail_bound(params: ModelParams, horizon: int) -> float:
    """Largest possible discounted reward mass after ``horizon`` slots.

    Per-slot rewards lie in ``[-2c, r - c]``, so ``max(r, 2c)`` bounds them.
    """
    return params.beta**horizon * max(params.r, 2 * params.c) / (1 - params.beta)


@dataclass
class EvalReport:
    mean: float
    stderr: float
    episodes: int
    horizon: int
    seed: int
    tail_bound: float
    dp_value: float | None = None
    solver: str | None = None

    def gap(self) -> float | None:
        return None if self.dp_value is None else abs(self.mean - self.dp_value)

    def consistent(self, k: float = 3.0) -> bool:
        """``|mean - dp| <= k * stderr + tail_bound``."""
        if self.dp_value is None:
            raise ValueError("no DP reference value attached")
        return self.gap() <= k * self.stderr + self.tail_bound

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write_json(self, path: Any) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)


def evaluate_mc(
    params: ModelParams,
    strategy: Controller | Sequence[Controller],
    episodes: int = DEFAULT_EPISODES,
    horizon: int | None = None,
    seed: int = 0,
    synchronize: bool = True,
) -> EvalReport:
    """Mean and standard error of the discounted return over seeded episodes."""
    if horizon is None:
        horizon = default_horizon(params.beta)
    ctls = list(strategy) if isinstance(strategy, (list, tuple)) else [strategy]
    out = simulate_batch(params, ctls, episodes, horizon, seed, reveal_initial_channel=synchronize)
    ret = out.returns
    stderr = float(ret.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return EvalReport(float(ret.mean()), stderr, episodes, horizon, seed, tail_bound(params, horizon))


def compare_dp_mc(
    params: ModelParams,
    solver: str | PbpResult,
    episodes: int = DEFAULT_EPISODES,
    seed: int = 0,
    K: int = DEFAULT_CAP,
    M: int = DEFAULT_CAP,
    mode: RecursionMode | str = RecursionMode.BAYES,
    horizon: int | None = None,
    tol: float = 1e-10,
) -> EvalReport:
    """Solve, run the resulting strategy, and attach the DP value at the synchronised start.

    ``solver`` is ``"centralized"``, ``"coordinated"``, ``"pbp"`` (iteration
    from the never-transmit pair) or an existing :class:`PbpResult`.  Only
    the Bayes-consistent recursion yields DP values that are true expected
    returns; the printed recursion is accepted for comparison studies.
    """
    mode = RecursionMode.parse(mode)
    if isinstance(solver, PbpResult):
        result, name = solver, "pbp"
    elif solver == "centralized":
        sol = solve_centralized(params, M, mode, tol)
        rep = evaluate_mc(params, centralized_strategy_as_callback(sol), episodes, horizon, seed)
        rep.dp_value, rep.solver = sol.initial_value(), "centralized"
        return rep
    elif solver == "coordinated":
        sol = solve_coordinated(params, K, M, mode, tol)
        rep = evaluate_mc(params, decentralize(sol), episodes, horizon, seed)
        rep.dp_value, rep.solver = sol.initial_value(), "coordinated"
        return rep
    elif solver == "pbp":
        space = CoordSpace(K, M)
        never = DeviceStrategy.never(space)
        result, name = pbp_iteration(params, (never, never), K, M, mode, tol=tol), "pbp"
    else:
        raise ValueError(f"unknown solver {solver!r}")
    pair = result.strategies
    rep = evaluate_mc(params, pair_controllers(pair, mode), episodes, horizon, seed)
    rep.dp_value = initial_value(params, pair[0].space, result.values)
    rep.solver = name
    return rep

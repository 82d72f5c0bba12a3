"""Person-by-person optimisation: best responses and best-response iteration.

Strategies are time-invariant prescription maps ``d_i(k, l, s, m)``; device
``i`` sends ``u_i = n_i * d_i``.  Fixing the partner's map turns the
coordinator's problem into a two-action MDP over the same public index
state, obtained by selecting rows of the four-prescription transition
matrices.  The responder's own buffer enters through the index ``k`` (or
``l``) exactly as for the coordinator.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp

from .beliefs import PRESCRIPTIONS, RecursionMode
from .coordinated import (
    DEFAULT_CAP,
    CoordinatedSolution,
    CoordSpace,
    DeviceController,
    _fmt,
    build_coordinated_mdp,
    initial_value,
)
from .mdp import CountableMdp, SolveResult, extract_policy, value_iteration
from .model import ModelParams


@dataclass
class DeviceStrategy:
    """Prescription bit per public state for one device."""

    space: CoordSpace
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8).ravel()
        if self.bits.shape != (len(self.space),):
            raise ValueError(f"strategy has {self.bits.size} entries, expected {len(self.space)}")
        if np.any((self.bits != 0) & (self.bits != 1)):
            raise ValueError("strategy entries must be 0 or 1")

    @classmethod
    def never(cls, space: CoordSpace) -> "DeviceStrategy":
        return cls(space, np.zeros(len(space)))

    @classmethod
    def always(cls, space: CoordSpace) -> "DeviceStrategy":
        return cls(space, np.ones(len(space)))

    @classmethod
    def from_solution(cls, solution: CoordinatedSolution, device: int) -> "DeviceStrategy":
        return cls(solution.space, solution.component(device))

    def at(self, k, l, s: int, m: int) -> int:
        return int(self.bits[self.space.state_index(k, l, s, m)])

    def __eq__(self, other) -> bool:
        return isinstance(other, DeviceStrategy) and np.array_equal(self.bits, other.bits)


def joint_actions(d1: DeviceStrategy, d2: DeviceStrategy) -> np.ndarray:
    """Prescription ids ``d1 + 2 * d2`` (matching ``PRESCRIPTIONS``)."""
    return d1.bits.astype(np.int64) + 2 * d2.bits.astype(np.int64)


def restricted_mdp(coord: CountableMdp, fixed: DeviceStrategy, responder: int) -> CountableMdp:
    """Two-action MDP of ``responder`` (action = its bit) against ``fixed``."""
    if responder not in (1, 2):
        raise ValueError("responder must be 1 or 2")
    other = fixed.bits.astype(np.int64)
    S = coord.n_states
    rows = np.arange(S)
    P, R = [], np.empty((S, 2))
    for b in (0, 1):
        ids = b + 2 * other if responder == 1 else other + 2 * b
        R[:, b] = coord.R[rows, ids]
        acc = None
        for a in range(4):
            sel = (ids == a).astype(np.float64)
            if not sel.any():
                continue
            part = sp.diags(sel) @ coord.P[a]
            acc = part if acc is None else acc + part
        P.append(sp.csr_matrix(acc))
    return CountableMdp(P, R, coord.discount, labels=coord.labels, action_labels=(0, 1), validate=False)


@dataclass
class BestResponse:
    responder: int
    strategy: DeviceStrategy
    result: SolveResult

    @property
    def values(self) -> np.ndarray:
        return self.result.values


def best_response(
    params: ModelParams,
    fixed: DeviceStrategy,
    responder: int,
    K: int = DEFAULT_CAP,
    M: int = DEFAULT_CAP,
    mode: RecursionMode | str = RecursionMode.BAYES,
    tol: float = 1e-10,
    prefer: DeviceStrategy | None = None,
    coord: CountableMdp | None = None,
) -> BestResponse:
    """Optimal time-invariant prescription map of ``responder`` given ``fixed``.

    Ties go to ``prefer`` (the incumbent strategy) when given, else to 0.
    ``coord`` reuses an already built coordinator MDP.
    """
    if coord is None:
        coord = build_coordinated_mdp(params, K, M, mode)
    if fixed.bits.size != coord.n_states:
        raise ValueError("fixed strategy does not match the state space")
    mdp = restricted_mdp(coord, fixed, responder)
    res = value_iteration(mdp, tol=tol)
    pol = extract_policy(mdp, res.values, prefer=None if prefer is None else prefer.bits)
    return BestResponse(responder, DeviceStrategy(coord.labels, pol), res)


@dataclass
class PbpResult:
    strategies: tuple[DeviceStrategy, DeviceStrategy]
    converged: bool
    rounds: int
    trace: list[dict] = field(default_factory=list)
    cycle: list[int] | None = None
    values: np.ndarray | None = None

    def report(self, params: ModelParams, mode: RecursionMode) -> dict[str, Any]:
        return {
            "params": params.as_dict(),
            "mode": mode.value,
            "rounds": self.rounds,
            "converged": self.converged,
            "cycle": self.cycle,
            "trace": self.trace,
            "initial_values": [t["initial_value"] for t in self.trace],
        }


def pbp_iteration(
    params: ModelParams,
    initial: tuple[DeviceStrategy, DeviceStrategy],
    K: int = DEFAULT_CAP,
    M: int = DEFAULT_CAP,
    mode: RecursionMode | str = RecursionMode.BAYES,
    max_rounds: int = 50,
    tol: float = 1e-10,
    order: Sequence[int] = (1, 2),
) -> PbpResult:
    """Alternate best responses until the pair repeats or ``max_rounds`` is hit.

    One round lets each device in ``order`` respond once.  A pair seen in an
    earlier round that differs from the previous one is reported as a cycle.
    """
    if sorted(order) != [1, 2]:
        raise ValueError("order must be a permutation of (1, 2)")
    mode = RecursionMode.parse(mode)
    coord = build_coordinated_mdp(params, K, M, mode)
    space = coord.labels
    cur = list(initial)
    seen = {_key(cur): 0}
    trace: list[dict] = []
    values = None
    for rnd in range(1, max_rounds + 1):
        changed = False
        for i in order:
            br = best_response(params, cur[2 - i], i, mode=mode, tol=tol, prefer=cur[i - 1], coord=coord)
            moved = br.strategy != cur[i - 1]
            changed |= moved
            cur[i - 1] = br.strategy
            values = br.values
            trace.append({
                "round": rnd, "device": i, "changed": bool(moved),
                "initial_value": initial_value(params, space, br.values),
                "iterations": br.result.iterations,
            })
        if not changed:
            return PbpResult(tuple(cur), True, rnd, trace, None, values)
        key = _key(cur)
        if key in seen:
            return PbpResult(tuple(cur), False, rnd, trace, [seen[key], rnd], values)
        seen[key] = rnd
    return PbpResult(tuple(cur), False, max_rounds, trace, None, values)


def _key(pair) -> bytes:
    return pair[0].bits.tobytes() + pair[1].bits.tobytes()


def controllers(pair: tuple[DeviceStrategy, DeviceStrategy], mode: RecursionMode | str):
    """Executable controllers for a strategy pair."""
    space = pair[0].space
    d1, d2 = pair[0].bits, pair[1].bits
    return DeviceController(space, d1, d2, 1, mode), DeviceController(space, d1, d2, 2, mode)


def write_strategy_csv(strategy: DeviceStrategy, path: Any) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "l", "s", "m", "d"])
        for i, (k, l, s, m) in enumerate(strategy.space):
            w.writerow([_fmt(k), _fmt(l), s, m, int(strategy.bits[i])])


def read_strategy_csv(path: Any, space: CoordSpace, column: str = "d") -> DeviceStrategy:
    """Load a strategy; ``column`` picks ``d`` or, from a policy dump, ``d1``/``d2``.

    States missing from the file default to 0.
    """
    bits = np.zeros(len(space), dtype=np.int8)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            k = float("inf") if row["k"] == "inf" else int(row["k"])
            l = float("inf") if row["l"] == "inf" else int(row["l"])
            bits[space.state_index(k, l, int(row["s"]), int(row["m"]))] = int(row[column])
    return DeviceStrategy(space, bits)


def write_report(report: dict, path: Any) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)

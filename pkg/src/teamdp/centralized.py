"""Single-device scheduling on the information state (buffer, channel belief).

The channel belief ranges over the reachable set ``q[s, m]`` truncated at
``m <= M``.  The transmit decision is summarised per last-seen channel state
``s`` by the threshold ``k_s``, the smallest staleness ``m`` at which a full
buffer transmits.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp

from .beliefs import RecursionMode, q_table
from .mdp import CountableMdp, SolveResult, extract_policy, value_iteration
from .model import NO_OBS, ModelParams

DEFAULT_CAP = 60


class CentralizedSpace:
    """States ``(n, s, m)`` with ``n, s in {0, 1}`` and ``1 <= m <= M``."""

    def __init__(self, M: int):
        if M < 2:
            raise ValueError("channel cap M must be at least 2")
        self.M = M
        self.shape = (2, 2, M)

    def __len__(self) -> int:
        return 4 * self.M

    def __getitem__(self, i: int) -> tuple[int, int, int]:
        if not 0 <= i < len(self):
            raise IndexError(i)
        n, s, m = np.unravel_index(i, self.shape)
        return int(n), int(s), int(m) + 1

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def index(self, n, s, m):
        return np.ravel_multi_index((n, s, np.asarray(m) - 1), self.shape)


def build_centralized_mdp(
    params: ModelParams, M: int = DEFAULT_CAP, mode: RecursionMode | str = RecursionMode.BAYES
) -> CountableMdp:
    """Action 0 waits, action 1 transmits (only with a full buffer)."""
    mode = RecursionMode.parse(mode)
    space = CentralizedSpace(M)
    S = len(space)
    p, c, r = params.p1, params.c, params.r
    qtab = q_table(params, M)
    s_ax, m_ax = np.meshgrid([0, 1], np.arange(1, M + 1), indexing="ij")
    s_ax, m_ax = s_ax.ravel(), m_ax.ravel()
    q = qtab[s_ax, m_ax]
    aged = np.minimum(m_ax + 1, M)

    empty = space.index(0, s_ax, m_ax)
    full = space.index(1, s_ax, m_ax)
    rows0 = [empty, empty, full]
    cols0 = [space.index(0, s_ax, aged), space.index(1, s_ax, aged), space.index(1, s_ax, aged)]
    vals0 = [np.full_like(q, 1 - p), np.full_like(q, p), np.ones_like(q)]

    after_idle = space.index(0, 0, 1)
    if mode is RecursionMode.AS_PRINTED:
        rows1 = [full, full]
        cols1 = [np.full_like(full, after_idle), space.index(1, s_ax, aged)]
        vals1 = [(1 - p) * (1 - q), p * (1 - q) + q]
    else:
        rows1 = [full, full, full]
        cols1 = [
            np.full_like(full, after_idle),
            np.full_like(full, space.index(1, 0, 1)),
            np.full_like(full, space.index(1, 1, 1)),
        ]
        vals1 = [(1 - p) * (1 - q), p * (1 - q), q]

    def mat(rows, cols, vals):
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(S, S)
        )

    R = np.zeros((S, 2))
    R[full, 1] = (1 - q) * r - c
    allowed = np.ones((S, 2), dtype=bool)
    allowed[empty, 1] = False
    return CountableMdp(
        [mat(rows0, cols0, vals0), mat(rows1, cols1, vals1)],
        R, params.beta, allowed=allowed, labels=space, action_labels=(0, 1),
    )


@dataclass
class CentralizedSolution:
    params: ModelParams
    mode: RecursionMode
    space: CentralizedSpace
    mdp: CountableMdp
    result: SolveResult
    policy: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.result.values

    def transmit_table(self) -> np.ndarray:
        """``(2, M)`` array: 1 where a full buffer transmits at ``(s, m)``."""
        return self.policy.reshape(self.space.shape)[1]

    @property
    def thresholds(self) -> tuple[int | None, int | None]:
        """``(k0, k1)``; ``None`` when no transmission occurs within the cap."""
        tab = self.transmit_table()
        out = []
        for s in (0, 1):
            hits = np.flatnonzero(tab[s])
            out.append(int(hits[0]) + 1 if hits.size else None)
        return tuple(out)

    def is_upward_closed(self) -> bool:
        """Transmission sets ``{m : transmit at (1, s, m)}`` are intervals ending at the cap."""
        tab = self.transmit_table()
        return all(np.all(np.diff(tab[s]) >= 0) for s in (0, 1))

    def initial_value(self) -> float:
        """DP value at the synchronised start (empty buffer, slot-0 channel revealed)."""
        v = self.values.reshape(self.space.shape)
        pi = self.params.stationary
        p = self.params.p1
        return self.params.beta * sum(pi[s] * (p * v[1, s, 0] + (1 - p) * v[0, s, 0]) for s in (0, 1))


def solve_centralized(
    params: ModelParams,
    M: int = DEFAULT_CAP,
    mode: RecursionMode | str = RecursionMode.BAYES,
    tol: float = 1e-10,
) -> CentralizedSolution:
    mode = RecursionMode.parse(mode)
    mdp = build_centralized_mdp(params, M, mode)
    res = value_iteration(mdp, tol=tol)
    policy = extract_policy(mdp, res.values)
    return CentralizedSolution(params, mode, mdp.labels, mdp, res, policy)


def format_threshold(k: int | None, M: int) -> str:
    return str(k) if k is not None else f">={M}"


class CentralizedController:
    """Runs a solved single-device policy online from channel feedback.

    Before any channel state is seen the belief is approximated by the
    capped index ``(0, M)``, whose value is within ``|alpha0 + alpha1 - 1|**M``
    of the stationary law.
    """

    def __init__(self, transmit: np.ndarray):
        self.transmit = np.asarray(transmit, dtype=np.int64)
        self.M = self.transmit.shape[1]

    def reset(self, batch: int) -> None:
        self.s = np.zeros(batch, dtype=np.int64)
        self.m = np.full(batch, self.M, dtype=np.int64)

    def act(self, n: np.ndarray) -> np.ndarray:
        return np.asarray(n) * self.transmit[self.s, self.m - 1]

    def observe(self, u1, u2, feedback) -> None:
        seen = np.asarray(feedback) != NO_OBS
        self.s = np.where(seen, feedback, self.s)
        self.m = np.where(seen, 1, np.minimum(self.m + 1, self.M))


def centralized_strategy_as_callback(solution: CentralizedSolution) -> CentralizedController:
    return CentralizedController(solution.transmit_table())


def write_policy_csv(solution: CentralizedSolution, path: Any) -> None:
    """Rows ``n,s,m,u,value`` over the whole truncated state space."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "s", "m", "u", "value"])
        for i, (n, s, m) in enumerate(solution.space):
            w.writerow([n, s, m, int(solution.policy[i]), repr(float(solution.values[i]))])


TABLE_P = (0.1, 0.2, 0.3, 0.4)
TABLE_C = (0.1, 0.2, 0.3, 0.4, 0.5)
TABLE_FIXED = {"alpha0": 0.75, "alpha1": 0.75, "r": 1.0, "beta": 0.9}


def reference_table1() -> dict[tuple[float, float], tuple[int, int]]:
    """Expected ``(k0, k1)`` per ``(p, c)`` from the shipped data file."""
    text = (resources.files("teamdp") / "data" / "table1.csv").read_text()
    return {
        (float(r["p"]), float(r["c"])): (int(r["k0"]), int(r["k1"]))
        for r in csv.DictReader(io.StringIO(text))
    }


def reproduce_table1(M: int = 60, tol: float = 1e-10, modes: Sequence[RecursionMode] = tuple(RecursionMode)):
    """Rows ``p, c, k0, k1, mode, expected_k0, expected_k1, match`` for every cell and mode."""
    expected = reference_table1()
    rows = []
    for mode in modes:
        for p in TABLE_P:
            for c in TABLE_C:
                params = ModelParams(p1=p, p2=p, c=c, **TABLE_FIXED)
                k0, k1 = solve_centralized(params, M, mode, tol).thresholds
                e0, e1 = expected[(p, c)]
                rows.append(dict(p=p, c=c, k0=format_threshold(k0, M), k1=format_threshold(k1, M),
                                 mode=mode.value, expected_k0=e0, expected_k1=e1,
                                 match=(k0, k1) == (e0, e1)))
    return rows

"""Coordinator's dynamic program for the two-device system.

The coordinator sees only common information (past actions and channel
feedback) and picks a prescription ``(d1, d2)``; device ``i`` then sends
``u_i = n_i * d_i``.  Its information state is the triple of reachable-set
indices ``(k, l, (s, m))``: buffer beliefs ``z1[k]``, ``z2[l]`` and channel
belief ``q[s, m]``.

Buffer indices run over ``1..K`` plus ``INF`` (buffer known full); the
channel staleness over ``1..M``.  Both saturate at their caps.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable

import numpy as np
import scipy.sparse as sp

from .beliefs import (
    INF,
    PRESCRIPTIONS,
    RecursionMode,
    advance_indices,
    age_buffer,
    event_matrices,
    q_table,
    z_table,
)
from .mdp import CountableMdp, SolveResult, extract_policy, q_values, value_iteration
from .model import NO_OBS, ModelParams, two_device_reward

DEFAULT_CAP = 60
DEFAULT_REGION = 12


class CoordSpace:
    """Grid ``(k, l, s, m)``; buffer codes ``1..K`` and ``K + 1`` for ``INF``."""

    def __init__(self, K: int, M: int):
        if K < 2 or M < 2:
            raise ValueError("caps K and M must be at least 2")
        self.K, self.M = K, M
        self.shape = (K + 1, K + 1, 2, M)

    def __len__(self) -> int:
        return int(np.prod(self.shape))

    def decode_buffer(self, code: int) -> float:
        return INF if code == self.K + 1 else int(code)

    def encode_buffer(self, k) -> int:
        if k == INF:
            return self.K + 1
        if not 1 <= k <= self.K:
            raise ValueError(f"buffer index {k} outside 1..{self.K}")
        return int(k)

    def __getitem__(self, i: int) -> tuple:
        if not 0 <= i < len(self):
            raise IndexError(i)
        kp, lp, s, mp = np.unravel_index(i, self.shape)
        return self.decode_buffer(kp + 1), self.decode_buffer(lp + 1), int(s), int(mp) + 1

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def index(self, k, l, s, m):
        """Flat index from buffer codes, channel state and staleness."""
        return np.ravel_multi_index(
            (np.asarray(k) - 1, np.asarray(l) - 1, s, np.asarray(m) - 1), self.shape
        )

    def state_index(self, k, l, s: int, m: int) -> int:
        """Flat index from symbolic indices (``INF`` allowed)."""
        return int(self.index(self.encode_buffer(k), self.encode_buffer(l), s, m))

    def grid(self):
        """Flattened code arrays ``(k, l, s, m)`` in state order."""
        k, l, s, m = np.meshgrid(
            np.arange(1, self.K + 2), np.arange(1, self.K + 2), [0, 1], np.arange(1, self.M + 1),
            indexing="ij",
        )
        return k.ravel(), l.ravel(), s.ravel(), m.ravel()


def _fixed_row_csr(cols: list[np.ndarray], vals: list[np.ndarray], n: int) -> sp.csr_matrix:
    b = len(cols)
    indptr = np.arange(0, n * b + 1, b, dtype=np.int64)
    indices = np.stack(cols, axis=1).ravel().astype(np.int32)
    data = np.stack(vals, axis=1).ravel()
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def build_coordinated_mdp(
    params: ModelParams,
    K: int = DEFAULT_CAP,
    M: int = DEFAULT_CAP,
    mode: RecursionMode | str = RecursionMode.BAYES,
) -> CountableMdp:
    """Four prescriptions in the order ``(0,0), (1,0), (0,1), (1,1)``."""
    mode = RecursionMode.parse(mode)
    space = CoordSpace(K, M)
    S = len(space)
    r, c = params.r, params.c
    kc, lc, s, m = space.grid()
    z1 = z_table(params, 1, K)[kc]
    z2 = z_table(params, 2, K)[lc]
    q = q_table(params, M)[s, m]
    zb1, zb2, qb = 1 - z1, 1 - z2, 1 - q
    ak, al, am = age_buffer(kc, K), age_buffer(lc, K), np.minimum(m + 1, M)
    one, full = np.ones_like(kc), np.full_like(kc, K + 1)
    idle_s, idle_m = np.zeros_like(s), np.ones_like(m)
    busy_s = np.ones_like(s)
    idx = space.index

    R = np.zeros((S, 4))
    P = []
    # (0, 0): everything ages
    P.append(_fixed_row_csr([idx(ak, al, s, am)], [np.ones(S)], S))
    # (1, 0)
    R[:, 1] = z1 * qb * r - z1 * c
    P.append(_fixed_row_csr(
        [idx(one, al, s, am), idx(one, al, idle_s, idle_m), idx(full, al, busy_s, idle_m)],
        [zb1, z1 * qb, z1 * q], S,
    ))
    # (0, 1)
    R[:, 2] = z2 * qb * r - z2 * c
    P.append(_fixed_row_csr(
        [idx(ak, one, s, am), idx(ak, one, idle_s, idle_m), idx(ak, full, busy_s, idle_m)],
        [zb2, z2 * qb, z2 * q], S,
    ))
    # (1, 1)
    single = z1 * zb2 + zb1 * z2
    R[:, 3] = single * qb * r - (z1 + z2) * c
    cols = [idx(one, one, s, am), idx(one, one, idle_s, idle_m), idx(full, full, idle_s, idle_m)]
    vals = [zb1 * zb2, single * qb, z1 * z2 * qb]
    if mode is RecursionMode.AS_PRINTED:
        cols.append(idx(full, full, busy_s, idle_m))
        vals.append((z1 + z2 - z1 * z2) * q)
    else:
        cols += [idx(full, one, busy_s, idle_m), idx(one, full, busy_s, idle_m), idx(full, full, busy_s, idle_m)]
        vals += [z1 * zb2 * q, zb1 * z2 * q, z1 * z2 * q]
    P.append(_fixed_row_csr(cols, vals, S))
    return CountableMdp(P, R, params.beta, labels=space, action_labels=PRESCRIPTIONS)


@dataclass
class CoordinatedSolution:
    params: ModelParams
    mode: RecursionMode
    space: CoordSpace
    mdp: CountableMdp
    result: SolveResult
    policy: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.result.values

    def policy_grid(self) -> np.ndarray:
        return self.policy.reshape(self.space.shape)

    def value_grid(self) -> np.ndarray:
        return self.values.reshape(self.space.shape)

    def prescription(self, k, l, s: int, m: int) -> tuple[int, int]:
        return PRESCRIPTIONS[int(self.policy[self.space.state_index(k, l, s, m)])]

    def component(self, device: int) -> np.ndarray:
        """Prescription bit of ``device`` at every state."""
        table = np.array(PRESCRIPTIONS)[:, device - 1]
        return table[self.policy]

    def initial_value(self) -> float:
        return initial_value(self.params, self.space, self.values)


def initial_value(params: ModelParams, space: CoordSpace, values: np.ndarray) -> float:
    """Value at the synchronised start: empty buffers, slot-0 channel revealed.

    Slot 0 earns nothing; from slot 1 the state is ``(1, 1, (S_0, 1))``.
    """
    pi = params.stationary
    return params.beta * sum(pi[s] * values[space.state_index(1, 1, s, 1)] for s in (0, 1))


def solve_coordinated(
    params: ModelParams,
    K: int = DEFAULT_CAP,
    M: int = DEFAULT_CAP,
    mode: RecursionMode | str = RecursionMode.BAYES,
    tol: float = 1e-10,
    mdp: CountableMdp | None = None,
) -> CoordinatedSolution:
    """Value iteration over prescriptions; ties go to the lowest prescription."""
    mode = RecursionMode.parse(mode)
    if mdp is None:
        mdp = build_coordinated_mdp(params, K, M, mode)
    res = value_iteration(mdp, tol=tol)
    policy = extract_policy(mdp, res.values)
    return CoordinatedSolution(params, mode, mdp.labels, mdp, res, policy)


# ----------------------------------------------------------------------------
# pattern descriptions of prescription policies

TIE = frozenset({(1, 0), (0, 1)})


def pattern_d(k, l) -> frozenset:
    """Poll the device more likely to hold a packet; either one on a tie."""
    if k > l:
        return frozenset({(1, 0)})
    if k < l:
        return frozenset({(0, 1)})
    return TIE


def pattern_dbar(k, l) -> frozenset:
    if k > l:
        return frozenset({(0, 1)})
    if k < l:
        return frozenset({(1, 0)})
    return TIE


def pattern_h(n, k, l) -> frozenset:
    """Both transmit on the fringe ``{(k, 1): k <= n} | {(1, l): l <= n}``, else ``d``."""
    if (l == 1 and k <= n) or (k == 1 and l <= n):
        return frozenset({(1, 1)})
    return pattern_d(k, l)


def pattern_hhat(n, k, l) -> frozenset:
    """Stay silent on the square ``max(k, l) <= n``, else ``d``."""
    if max(k, l) <= n:
        return frozenset({(0, 0)})
    return pattern_d(k, l)


@dataclass(frozen=True)
class PatternRule:
    kind: str
    s: int | None = None
    m_min: int = 1
    m_max: float = INF
    n: float | None = None

    def covers(self, s: int, m: int) -> bool:
        return (self.s is None or self.s == s) and self.m_min <= m <= self.m_max

    def allowed(self, k, l) -> frozenset:
        if self.kind == "zero":
            return frozenset({(0, 0)})
        if self.kind == "d":
            return pattern_d(k, l)
        if self.kind == "dbar":
            return pattern_dbar(k, l)
        if self.kind == "h":
            return pattern_h(self.n, k, l)
        if self.kind == "hhat":
            return pattern_hhat(self.n, k, l)
        raise ValueError(f"unknown pattern kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PatternRule":
        def num(x):
            return INF if x is None or x == "inf" else x

        return cls(
            kind=d["kind"], s=d.get("s"), m_min=d.get("m_min", 1),
            m_max=num(d.get("m_max")), n=num(d["n"]) if "n" in d else None,
        )


@dataclass(frozen=True)
class PatternSpec:
    """Ordered rules over channel slices; the first rule covering ``(s, m)`` applies."""

    name: str
    rules: tuple[PatternRule, ...]

    def allowed(self, k, l, s: int, m: int) -> frozenset:
        for rule in self.rules:
            if rule.covers(s, m):
                return rule.allowed(k, l)
        raise ValueError(f"pattern {self.name!r} does not cover channel index ({s}, {m})")

    def to_policy(self, space: CoordSpace) -> np.ndarray:
        """A policy realising the spec (lowest prescription where it allows several)."""
        out = np.empty(len(space), dtype=np.int64)
        for i, (k, l, s, m) in enumerate(space):
            allowed = self.allowed(k, l, s, m)
            out[i] = min(PRESCRIPTIONS.index(a) for a in allowed)
        return out


def _data(name: str):
    return resources.files("teamdp") / "data" / name


def published_strategies() -> tuple[dict, dict[float, PatternSpec]]:
    """Parameters and per-cost pattern specs of the reference decentralized optima."""
    raw = json.loads(_data("strategies.json").read_text())
    specs = {
        float(c): PatternSpec(f"c={c}", tuple(PatternRule.from_dict(r) for r in rules))
        for c, rules in raw["strategies"].items()
    }
    return raw["params"], specs


def region_states(space: CoordSpace, region: int = DEFAULT_REGION) -> Iterable[tuple]:
    """``k, l in 1..region`` plus ``INF``, ``s in {0, 1}``, ``m in 1..region``."""
    if region >= min(space.K, space.M):
        raise ValueError("region must lie strictly inside the truncation caps")
    buf = list(range(1, region + 1)) + [INF]
    return itertools.product(buf, buf, (0, 1), range(1, region + 1))


@dataclass
class PatternMatch:
    spec_name: str
    matched: bool
    checked: int
    mismatches: list[dict] = field(default_factory=list)


def _fmt(k):
    return "inf" if k == INF else k


def match_pattern(
    space: CoordSpace, policy: np.ndarray, spec: PatternSpec, region: int = DEFAULT_REGION
) -> PatternMatch:
    """Compare a prescription policy with a pattern on the verification region."""
    mismatches = []
    checked = 0
    for k, l, s, m in region_states(space, region):
        checked += 1
        got = PRESCRIPTIONS[int(policy[space.state_index(k, l, s, m)])]
        allowed = spec.allowed(k, l, s, m)
        if got not in allowed:
            mismatches.append(
                {"k": _fmt(k), "l": _fmt(l), "s": s, "m": m,
                 "got": list(got), "allowed": sorted(list(a) for a in allowed)}
            )
    return PatternMatch(spec.name, not mismatches, checked, mismatches)


def optimal_sets(solution: "CoordinatedSolution", tie_tol: float = 1e-9) -> np.ndarray:
    """Boolean ``(S, 4)`` mask of prescriptions within ``tie_tol`` of the optimum."""
    Q = q_values(solution.mdp, solution.values)
    return Q >= Q.max(axis=1, keepdims=True) - tie_tol


def match_solution(
    solution: "CoordinatedSolution", spec: PatternSpec, region: int = DEFAULT_REGION,
    tie_tol: float = 1e-9,
) -> PatternMatch:
    """Like :func:`match_pattern` but any optimal prescription counts as a match."""
    space = solution.space
    opt = optimal_sets(solution, tie_tol)
    mismatches = []
    checked = 0
    for k, l, s, m in region_states(space, region):
        checked += 1
        i = space.state_index(k, l, s, m)
        got = {PRESCRIPTIONS[a] for a in np.flatnonzero(opt[i])}
        allowed = spec.allowed(k, l, s, m)
        if not got & allowed:
            mismatches.append(
                {"k": _fmt(k), "l": _fmt(l), "s": s, "m": m,
                 "got": sorted(list(a) for a in got), "allowed": sorted(list(a) for a in allowed)}
            )
    return PatternMatch(spec.name, not mismatches, checked, mismatches)


def pattern_report(solution: CoordinatedSolution, match: PatternMatch) -> dict:
    return {
        "params": solution.params.as_dict(),
        "mode": solution.mode.value,
        "caps": {"K": solution.space.K, "M": solution.space.M},
        "spec_name": match.spec_name,
        "matched": match.matched,
        "checked": match.checked,
        "mismatches": match.mismatches,
    }


def write_policy_csv(solution: CoordinatedSolution, path: Any) -> None:
    """Rows ``k,l,s,m,d1,d2,value`` with ``inf`` for a buffer known to be full."""
    d = np.array(PRESCRIPTIONS)[solution.policy]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "l", "s", "m", "d1", "d2", "value"])
        for i, (k, l, s, m) in enumerate(solution.space):
            w.writerow([_fmt(k), _fmt(l), s, m, d[i, 0], d[i, 1], repr(float(solution.values[i]))])


# ----------------------------------------------------------------------------
# decentralized execution


class DeviceController:
    """One device running a coordination law from common information.

    Every device recomputes the coordinator's indices from the shared slot
    outcome, so all devices hold the same index state on every sample path.
    Before slot 0 both buffers are known to be empty (code 0) and, without a
    channel observation, the channel index is approximated by ``(0, M)``.
    """

    def __init__(self, space: CoordSpace, d1: np.ndarray, d2: np.ndarray, device: int,
                 mode: RecursionMode | str = RecursionMode.BAYES):
        if device not in (1, 2):
            raise ValueError("device must be 1 or 2")
        self.space = space
        self.d1 = np.asarray(d1, dtype=np.int64).reshape(space.shape)
        self.d2 = np.asarray(d2, dtype=np.int64).reshape(space.shape)
        self.device = device
        self.mode = RecursionMode.parse(mode)

    def reset(self, batch: int) -> None:
        self.k = np.zeros(batch, dtype=np.int64)
        self.l = np.zeros(batch, dtype=np.int64)
        self.s = np.zeros(batch, dtype=np.int64)
        self.m = np.full(batch, self.space.M, dtype=np.int64)

    @property
    def indices(self) -> np.ndarray:
        return np.stack([self.k, self.l, self.s, self.m], axis=1)

    def prescriptions(self) -> tuple[np.ndarray, np.ndarray]:
        at = (np.maximum(self.k, 1) - 1, np.maximum(self.l, 1) - 1, self.s, self.m - 1)
        return self.d1[at], self.d2[at]

    def act(self, n: np.ndarray) -> np.ndarray:
        d1, d2 = self.prescriptions()
        return np.asarray(n) * (d1 if self.device == 1 else d2)

    def observe(self, u1, u2, feedback) -> None:
        d1, d2 = self.prescriptions()
        u1, u2, h = np.asarray(u1), np.asarray(u2), np.asarray(feedback)
        if np.any(u1 > d1) or np.any(u2 > d2):
            raise ValueError("observed a transmission the coordination law did not prescribe")
        if np.any((u1 + u2 > 0) & (h == NO_OBS)):
            raise ValueError("transmission without channel feedback")
        self.k, self.l, self.s, self.m = advance_indices(
            self.k, self.l, self.s, self.m, d1, d2, u1, u2, h,
            mode=self.mode, K=self.space.K, M=self.space.M,
        )


def decentralize(solution: CoordinatedSolution) -> tuple[DeviceController, DeviceController]:
    """Per-device controllers ``u_i = n_i * psi_i(k, l, s, m)``."""
    d1, d2 = solution.component(1), solution.component(2)
    return (
        DeviceController(solution.space, d1, d2, 1, solution.mode),
        DeviceController(solution.space, d1, d2, 2, solution.mode),
    )


# ----------------------------------------------------------------------------
# brute-force oracle: exhaustive two-slot prescription plans


def _expected_rewards(params: ModelParams) -> np.ndarray:
    """``out[x, a]``: reward of prescription ``a`` in joint state ``x = (n1, n2, s)``."""
    out = np.zeros((8, 4))
    for x in range(8):
        n1, n2, s = x >> 2, (x >> 1) & 1, x & 1
        for a, (d1, d2) in enumerate(PRESCRIPTIONS):
            out[x, a] = two_device_reward(params, s, n1 * d1, n2 * d2)
    return out


def product_prior(z1: float, z2: float, q: float) -> np.ndarray:
    prior = np.zeros(8)
    for x in range(8):
        n1, n2, s = x >> 2, (x >> 1) & 1, x & 1
        prior[x] = (z1 if n1 else 1 - z1) * (z2 if n2 else 1 - z2) * (q if s else 1 - q)
    return prior


def two_slot_plan_value(params: ModelParams, z1: float, z2: float, q: float) -> float:
    """Best two-slot discounted reward over every plan, by direct expectation.

    A plan is a first prescription plus a second prescription for each
    observable outcome of the first slot.  Expectations run over the hidden
    joint state ``(n1, n2, s)``, starting from independent beliefs.
    """
    prior = product_prior(z1, z2, q)
    rew = _expected_rewards(params)
    mats = event_matrices(params)
    best = -np.inf
    for a0, d in enumerate(PRESCRIPTIONS):
        events = [e for e in mats if (e.d1, e.d2) == d]
        r0 = prior @ rew[:, a0]
        # unnormalised second-slot reward per (outcome, prescription)
        r1 = np.array([(prior @ mats[e]) @ rew for e in events])
        plans = np.array(list(itertools.product(range(4), repeat=len(events))))
        totals = r0 + params.beta * r1[np.arange(len(events)), plans].sum(axis=1)
        best = max(best, float(totals.max()))
    return best

"""Reachable-set posteriors for the channel and the buffers.

The channel posterior after the last observed channel state ``s`` and ``m``
slots of silence is ``q[s, m] = P(S_m = 1 | S_0 = s)``.  The common belief
that a buffer holds a packet, ``k`` slots after it was last known to be
empty and never polled since, is ``z[k] = 1 - (1 - p)**k``; after a failed
transmission the buffer is known to be full (index ``INF``, ``z = 1``).

Array code for buffer indices: ``0`` known empty, ``1..K`` finite, ``K + 1``
for ``INF``.  Channel code ``s = -1`` means no channel state observed yet
(belief equal to the stationary law).

The module also carries an exact Bayes filter over the hidden joint state
``(n1, n2, s)`` that is independent of the index arithmetic; it backs the
oracle checks.
"""

from __future__ import annotations

import enum
import math
from typing import NamedTuple, Sequence

import numpy as np

from .model import NO_OBS, ModelParams, two_device_transition

INF = math.inf


class RecursionMode(enum.Enum):
    """Which belief recursion a solver uses.

    ``AS_PRINTED`` follows the published recursions literally;
    ``BAYES`` follows the observation model exactly.
    """

    AS_PRINTED = "printed"
    BAYES = "bayes"

    @classmethod
    def parse(cls, value: "RecursionMode | str") -> "RecursionMode":
        return value if isinstance(value, cls) else cls(value)


def q_value(params: ModelParams, s: int, m: int) -> float:
    """``P(S_m = 1 | S_0 = s)`` via the one-step recursion."""
    if s not in (0, 1) or m < 1:
        raise ValueError(f"invalid channel index ({s}, {m})")
    a0, a1 = params.alpha0, params.alpha1
    q = 1 - a0 if s == 0 else a1
    for _ in range(m - 1):
        q = q * a1 + (1 - q) * (1 - a0)
    return q


def z_value(params: ModelParams, device: int, k: float) -> float:
    """Common belief that ``device`` holds a packet at buffer index ``k``."""
    if k == INF:
        return 1.0
    if k != int(k) or k < 1:
        raise ValueError(f"invalid buffer index {k}")
    p = params.arrival(device)
    z = p
    for _ in range(int(k) - 1):
        z = z + (1 - z) * p
    return z


def q_table(params: ModelParams, M: int) -> np.ndarray:
    """``(2, M + 1)`` array with ``q[s, m]``; column 0 is unused (NaN)."""
    out = np.full((2, M + 1), np.nan)
    a0, a1 = params.alpha0, params.alpha1
    for s in (0, 1):
        q = 1 - a0 if s == 0 else a1
        for m in range(1, M + 1):
            out[s, m] = q
            q = q * a1 + (1 - q) * (1 - a0)
    return out


def z_table(params: ModelParams, device: int, K: int) -> np.ndarray:
    """Length ``K + 2`` array indexed by buffer code (0 empty, K+1 full)."""
    p = params.arrival(device)
    out = np.empty(K + 2)
    out[0] = 0.0
    z = 0.0
    for k in range(1, K + 1):
        z = z + (1 - z) * p
        out[k] = z
    out[K + 1] = 1.0
    return out


def channel_belief(params: ModelParams, qtab: np.ndarray, s, m) -> np.ndarray:
    """Posterior busy probability for channel codes (``s = -1`` is stationary)."""
    s, m = np.asarray(s), np.asarray(m)
    unseen = s < 0
    val = qtab[np.where(unseen, 0, s), np.where(unseen, 1, m)]
    return np.where(unseen, params.stationary[1], val)


def age_buffer(k, K: int):
    k = np.asarray(k)
    return np.where(k == K + 1, K + 1, np.minimum(k + 1, K))


def advance_indices(k, l, s, m, d1, d2, u1, u2, h, *, mode: RecursionMode, K: int, M: int):
    """Common-information index update after one slot.

    ``(d1, d2)`` is the prescription in force, ``(u1, u2)`` the realised
    actions and ``h`` the channel feedback.  A transmitting device either
    succeeded (index 1) or is known to be full (``INF``).  A prescribed
    device that stayed silent was empty, so it restarts at 1.  Otherwise the
    index ages.  ``AS_PRINTED`` sends a silent prescribed device to ``INF``
    as well when the other one failed on a busy channel under (1, 1).
    """
    k, l, s, m, d1, d2, u1, u2, h = (np.asarray(x, dtype=np.int64) for x in (k, l, s, m, d1, d2, u1, u2, h))
    full = K + 1

    def one(idx, d, u, u_other, d_other):
        success = (u == 1) & (u_other == 0) & (h == 0)
        out = np.where(u == 1, np.where(success, 1, full), np.where(d == 1, 1, age_buffer(idx, K)))
        if mode is RecursionMode.AS_PRINTED:
            lumped = (d == 1) & (d_other == 1) & (u == 0) & (u_other == 1) & (h == 1)
            out = np.where(lumped, full, out)
        return out

    k_next = one(k, d1, u1, u2, d2)
    l_next = one(l, d2, u2, u1, d1)
    seen = h != NO_OBS
    s_next = np.where(seen, h, s)
    m_next = np.where(seen, 1, np.where(s < 0, m, np.minimum(m + 1, M)))
    return k_next, l_next, s_next, m_next


# ----------------------------------------------------------------------------
# exact Bayes filter over (n1, n2, s)

PRESCRIPTIONS = ((0, 0), (1, 0), (0, 1), (1, 1))


class HistoryStep(NamedTuple):
    """One slot of common information: prescription, actions, feedback."""

    d1: int
    d2: int
    u1: int
    u2: int
    h: int


def joint_index(n1, n2, s):
    return 4 * n1 + 2 * n2 + s


def arrival_pmf(params: ModelParams, arrivals: str = "independent") -> np.ndarray:
    """``pmf[w1, w2]``.  ``"correlated"`` couples ``w2 = w1`` (rate ``p1``)."""
    p1, p2 = params.p1, params.p2
    if arrivals == "independent":
        return np.outer([1 - p1, p1], [1 - p2, p2])
    if arrivals == "correlated":
        return np.array([[1 - p1, 0.0], [0.0, p1]])
    raise ValueError(f"unknown arrival model {arrivals!r}")


def slot_events(d: tuple[int, int]) -> list[HistoryStep]:
    """All observable outcomes of one slot under prescription ``d``."""
    out = []
    for u1 in range(d[0] + 1):
        for u2 in range(d[1] + 1):
            hs = [NO_OBS] if u1 + u2 == 0 else [0, 1]
            out.extend(HistoryStep(d[0], d[1], u1, u2, h) for h in hs)
    return out


def event_matrices(params: ModelParams, arrivals: str = "independent") -> dict[HistoryStep, np.ndarray]:
    """``M[e][x, x'] = P(next joint state x', outcome e | joint state x)``."""
    pw = arrival_pmf(params, arrivals)
    P = params.channel_matrix
    mats: dict[HistoryStep, np.ndarray] = {}
    for d in PRESCRIPTIONS:
        for e in slot_events(d):
            mats[e] = np.zeros((8, 8))
    for n1 in (0, 1):
        for n2 in (0, 1):
            for s in (0, 1):
                x = joint_index(n1, n2, s)
                for d in PRESCRIPTIONS:
                    u1, u2 = n1 * d[0], n2 * d[1]
                    h = s if u1 + u2 > 0 else NO_OBS
                    e = HistoryStep(d[0], d[1], u1, u2, h)
                    for w1 in (0, 1):
                        for w2 in (0, 1):
                            if pw[w1, w2] == 0:
                                continue
                            m1, m2 = two_device_transition(n1, n2, s, u1, u2, w1, w2)
                            for s2 in (0, 1):
                                mats[e][x, joint_index(int(m1), int(m2), s2)] += pw[w1, w2] * P[s, s2]
    return mats


def initial_joint(params: ModelParams, initial_channel: int | None = None) -> np.ndarray:
    """Empty buffers; channel stationary or known to be ``initial_channel``."""
    prior = np.zeros(8)
    if initial_channel is None:
        prior[joint_index(0, 0, 0)] = params.stationary[0]
        prior[joint_index(0, 0, 1)] = params.stationary[1]
    else:
        prior[joint_index(0, 0, initial_channel)] = 1.0
    return prior


def bayes_oracle(
    params: ModelParams,
    history: Sequence[HistoryStep | tuple],
    initial_channel: int | None = None,
    arrivals: str = "independent",
) -> np.ndarray:
    """Exact posterior ``post[n1, n2, s]`` by enumerating every hidden path.

    A hidden path fixes the initial channel state and, for each slot, the two
    arrivals and the next channel state.  Paths inconsistent with the
    observed actions or feedback get weight zero.
    """
    history = [HistoryStep(*step) for step in history]
    T = len(history)
    pw = arrival_pmf(params, arrivals)
    P = params.channel_matrix
    codes = np.arange(2 * 8**T, dtype=np.int64)
    s = codes % 2
    rest = codes // 2
    if initial_channel is None:
        weight = params.stationary[s]
    else:
        weight = (s == initial_channel).astype(float)
    n1 = np.zeros_like(s)
    n2 = np.zeros_like(s)
    for step in history:
        digit = rest % 8
        rest = rest // 8
        w1, w2, s_next = digit & 1, (digit >> 1) & 1, (digit >> 2) & 1
        u1, u2 = n1 * step.d1, n2 * step.d2
        h = np.where(u1 + u2 > 0, s, NO_OBS)
        ok = (u1 == step.u1) & (u2 == step.u2) & (h == step.h)
        weight = weight * ok * pw[w1, w2] * P[s, s_next]
        n1, n2 = two_device_transition(n1, n2, s, u1, u2, w1, w2)
        s = s_next
    total = weight.sum()
    if total <= 0:
        raise ValueError("history has probability zero under the model")
    post = np.bincount(joint_index(n1, n2, s), weights=weight, minlength=8) / total
    return post.reshape(2, 2, 2)


def _merge(post, idx, mult):
    key = np.concatenate([np.round(post, 14), idx.astype(float)], axis=1)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.zeros(len(first))
    np.add.at(counts, inverse, mult)
    return post[first], idx[first], counts


def enumerate_histories(
    params: ModelParams,
    horizon: int,
    arrivals: str = "independent",
    mode: RecursionMode = RecursionMode.BAYES,
    K: int = 64,
    M: int = 64,
):
    """Walk every common-information history up to ``horizon`` slots.

    Yields ``(depth, posteriors, indices, multiplicity)`` per depth, where
    ``posteriors`` are Bayes-filter joints (rows of 8), ``indices`` the
    matching ``(k, l, s, m)`` codes and ``multiplicity`` the number of
    distinct histories folded into each row.  Rows with an identical
    posterior and index state are merged; their futures coincide.
    """
    mats = event_matrices(params, arrivals)
    events = list(mats)
    post = initial_joint(params)[None, :]
    idx = np.array([[0, 0, -1, 0]], dtype=np.int64)
    mult = np.ones(1)
    yield 0, post, idx, mult
    for depth in range(1, horizon + 1):
        posts, idxs, mults = [], [], []
        for e in events:
            un = post @ mats[e]
            prob = un.sum(axis=1)
            keep = prob > 0
            if not keep.any():
                continue
            child = un[keep] / prob[keep, None]
            cur = idx[keep]
            nk, nl, ns, nm = advance_indices(
                cur[:, 0], cur[:, 1], cur[:, 2], cur[:, 3],
                e.d1, e.d2, e.u1, e.u2, e.h, mode=mode, K=K, M=M,
            )
            posts.append(child)
            idxs.append(np.stack([nk, nl, ns, nm], axis=1))
            mults.append(mult[keep])
        post, idx, mult = _merge(np.concatenate(posts), np.concatenate(idxs), np.concatenate(mults))
        yield depth, post, idx, mult


def _marginals(post: np.ndarray):
    j = post.reshape(-1, 2, 2, 2)
    return j.sum(axis=(2, 3))[:, 1], j.sum(axis=(1, 3))[:, 1], j.sum(axis=(1, 2))[:, 1], j.sum(axis=3)


def belief_oracle_deviation(
    params: ModelParams,
    horizon: int,
    mode: RecursionMode = RecursionMode.BAYES,
) -> dict:
    """Largest gap between index beliefs and Bayes marginals over all histories."""
    K = M = horizon + 4
    z1, z2 = z_table(params, 1, K), z_table(params, 2, K)
    qtab = q_table(params, M)
    worst = {"buffer1": 0.0, "buffer2": 0.0, "channel": 0.0}
    n_hist = 0.0
    for _, post, idx, mult in enumerate_histories(params, horizon, mode=mode, K=K, M=M):
        b1, b2, bs, _ = _marginals(post)
        worst["buffer1"] = max(worst["buffer1"], float(np.max(np.abs(b1 - z1[idx[:, 0]]))))
        worst["buffer2"] = max(worst["buffer2"], float(np.max(np.abs(b2 - z2[idx[:, 1]]))))
        qb = channel_belief(params, qtab, idx[:, 2], idx[:, 3])
        worst["channel"] = max(worst["channel"], float(np.max(np.abs(bs - qb))))
        n_hist += float(mult.sum())
    return {"max_deviation": max(worst.values()), **worst, "histories": int(n_hist)}


def check_conditional_independence(
    params: ModelParams, horizon: int, arrivals: str = "independent"
) -> float:
    """Max over histories of ``|P(n1, n2 | common) - P(n1 | common) P(n2 | common)|``."""
    if horizon > 8:
        raise ValueError("horizon is limited to 8")
    gap = 0.0
    for _, post, _, _ in enumerate_histories(params, horizon, arrivals=arrivals):
        b1, b2, _, joint = _marginals(post)
        prod = np.stack([np.outer([1 - a, a], [1 - b, b]) for a, b in zip(b1, b2)])
        gap = max(gap, float(np.max(np.abs(joint - prod))))
    return gap

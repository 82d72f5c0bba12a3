"""Discounted dynamic programming on finite (truncated countable) state spaces.

States and actions are dense integer ids.  Each action owns a sparse
``n_states x n_states`` transition matrix; rows of actions that are not
available in a state are empty and masked out of every maximisation.
Rewards are stored as expected one-step rewards ``R[s, a]``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

PROB_ATOL = 1e-12
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
TIE_TOL = 1e-9


class MdpValidationError(ValueError):
    """A transition structure violates the MDP contract."""


class CountableMdp:
    """Stationary discounted MDP over states ``0..n_states-1``.

    Parameters
    ----------
    transitions:
        One sparse matrix per action; row ``s`` is the successor
        distribution of taking that action in ``s``.
    rewards:
        ``(n_states, n_actions)`` expected one-step rewards.
    discount:
        Discount factor in (0, 1).
    allowed:
        Boolean ``(n_states, n_actions)`` availability mask.  Defaults to
        every action everywhere.
    labels, action_labels:
        Optional opaque ids for states and actions (any sequence supporting
        ``len`` and indexing).
    """

    def __init__(
        self,
        transitions: Sequence[sp.spmatrix],
        rewards: np.ndarray,
        discount: float,
        allowed: np.ndarray | None = None,
        labels: Sequence[Hashable] | None = None,
        action_labels: Sequence[Hashable] | None = None,
        validate: bool = True,
    ):
        if not 0.0 < discount < 1.0:
            raise MdpValidationError(f"discount must lie in (0, 1), got {discount}")
        self.P = [sp.csr_matrix(P, dtype=np.float64) for P in transitions]
        self.R = np.asarray(rewards, dtype=np.float64)
        self.discount = float(discount)
        n = self.R.shape[0]
        if self.R.shape != (n, len(self.P)):
            raise MdpValidationError(
                f"rewards shape {self.R.shape} does not match "
                f"{n} states x {len(self.P)} actions"
            )
        for a, P in enumerate(self.P):
            if P.shape != (n, n):
                raise MdpValidationError(f"transition matrix of action {a} has shape {P.shape}")
        if allowed is None:
            allowed = np.ones_like(self.R, dtype=bool)
        self.allowed = np.asarray(allowed, dtype=bool)
        self.labels = labels
        self.action_labels = action_labels
        if validate:
            self._validate()
        self._r_rows = np.ascontiguousarray(self.R.T)
        self._blocked = [
            None if col.all() else np.flatnonzero(~col) for col in self.allowed.T
        ]

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    def _validate(self) -> None:
        if self.allowed.shape != self.R.shape:
            raise MdpValidationError("allowed mask shape does not match rewards")
        empty = ~self.allowed.any(axis=1)
        if empty.any():
            s = int(np.flatnonzero(empty)[0])
            raise MdpValidationError(f"state {self._label(s)} has no available action")
        if not np.isfinite(self.R[self.allowed]).all():
            raise MdpValidationError("rewards must be finite for available actions")
        for a, P in enumerate(self.P):
            if P.nnz and (P.data < -PROB_ATOL).any():
                row = int(np.searchsorted(P.indptr, np.flatnonzero(P.data < -PROB_ATOL)[0], "right") - 1)
                raise MdpValidationError(
                    f"negative probability at (state={self._label(row)}, action={self._action(a)})"
                )
            sums = np.asarray(P.sum(axis=1)).ravel()
            mask = self.allowed[:, a]
            bad = mask & (np.abs(sums - 1.0) > PROB_ATOL)
            if bad.any():
                s = int(np.flatnonzero(bad)[0])
                raise MdpValidationError(
                    f"probabilities of (state={self._label(s)}, action={self._action(a)}) "
                    f"sum to {sums[s]!r}"
                )
            # rows of unavailable actions carry no mass; available rows are
            # renormalised (they are within PROB_ATOL of 1 here)
            scale = np.where(mask, 1.0 / np.where(sums > 0, sums, 1.0), 0.0)
            rep = np.repeat(scale, np.diff(P.indptr))
            if np.any(rep != 1.0) or np.any(P.data == 0):
                P = sp.csr_matrix((P.data * rep, P.indices, P.indptr), shape=P.shape, copy=True)
                P.eliminate_zeros()
                self.P[a] = P

    def _label(self, s: int) -> Hashable:
        return self.labels[s] if self.labels is not None else s

    def _action(self, a: int) -> Hashable:
        return self.action_labels[a] if self.action_labels is not None else a

    @property
    def states(self) -> Sequence[Hashable]:
        return self.labels if self.labels is not None else range(self.n_states)

    def actions(self, state: int) -> list[int]:
        """Available action ids at ``state``."""
        return [int(a) for a in np.flatnonzero(self.allowed[state])]

    def transitions(self, state: int, action: int) -> list[tuple[float, int, float]]:
        """``(probability, next state, expected reward)`` triples."""
        P = self.P[action]
        lo, hi = P.indptr[state], P.indptr[state + 1]
        r = float(self.R[state, action])
        return [(float(p), int(j), r) for p, j in zip(P.data[lo:hi], P.indices[lo:hi])]

    @classmethod
    def from_transitions(
        cls,
        states: Sequence[Hashable],
        actions: Callable[[Hashable], Iterable[Hashable]],
        transitions: Callable[[Hashable, Hashable], Iterable[tuple[float, Hashable, float]]],
        discount: float,
    ) -> "CountableMdp":
        """Build from the callback form used by small hand-written models.

        Per-successor rewards are folded into expected rewards.  Action ids
        are sorted when comparable, which fixes the tie-breaking order.
        """
        states = list(states)
        index = {s: i for i, s in enumerate(states)}
        seen: dict[Hashable, None] = {}
        per_state = [list(actions(s)) for s in states]
        for acts in per_state:
            for a in acts:
                seen.setdefault(a)
        try:
            action_ids = sorted(seen)
        except TypeError:
            action_ids = list(seen)
        a_index = {a: i for i, a in enumerate(action_ids)}
        n, m = len(states), len(action_ids)
        rows: list[list[int]] = [[] for _ in range(m)]
        cols: list[list[int]] = [[] for _ in range(m)]
        vals: list[list[float]] = [[] for _ in range(m)]
        R = np.zeros((n, m))
        allowed = np.zeros((n, m), dtype=bool)
        for i, s in enumerate(states):
            for a in per_state[i]:
                j = a_index[a]
                allowed[i, j] = True
                for prob, nxt, reward in transitions(s, a):
                    if nxt not in index:
                        raise MdpValidationError(
                            f"successor {nxt!r} of (state={s!r}, action={a!r}) is not an enumerated state"
                        )
                    rows[j].append(i)
                    cols[j].append(index[nxt])
                    vals[j].append(prob)
                    R[i, j] += prob * reward
        P = [sp.csr_matrix((vals[j], (rows[j], cols[j])), shape=(n, n)) for j in range(m)]
        return cls(P, R, discount, allowed=allowed, labels=states, action_labels=action_ids)


@dataclass
class SolveResult:
    """Outcome of an iterative fixed-point computation."""

    values: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residuals: list[float] = field(default_factory=list)
    q: np.ndarray | None = None


def _q_rows(mdp: CountableMdp, v: np.ndarray) -> np.ndarray:
    """Action-major Q table ``(A, S)``; contiguous rows keep the backup fast."""
    Q = np.empty((mdp.n_actions, mdp.n_states))
    for a, P in enumerate(mdp.P):
        np.multiply(P @ v, mdp.discount, out=Q[a])
        Q[a] += mdp._r_rows[a]
        if mdp._blocked[a] is not None:
            Q[a, mdp._blocked[a]] = -np.inf
    return Q


def q_values(mdp: CountableMdp, v: np.ndarray) -> np.ndarray:
    """``Q[s, a] = R[s, a] + beta * sum_s' P_a[s, s'] v[s']``; unavailable pairs are ``-inf``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"value table has shape {v.shape}, expected ({mdp.n_states},)")
    return _q_rows(mdp, v).T


def bellman_backup(mdp: CountableMdp, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One optimality backup; returns the new value table and the Q table."""
    Q = q_values(mdp, v)
    return np.maximum.reduce(Q.T), Q


def value_iteration(
    mdp: CountableMdp,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    v0: np.ndarray | None = None,
) -> SolveResult:
    """Iterate the optimality backup until the sup-norm step is at most ``tol``.

    ``converged`` is False when ``max_iter`` is exhausted first.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.n_states) if v0 is None else np.array(v0, dtype=np.float64)
    residuals: list[float] = []
    Q = None
    for it in range(1, max_iter + 1):
        v_new, Q = bellman_backup(mdp, v)
        res = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        residuals.append(res)
        v = v_new
        if res <= tol:
            return SolveResult(v, it, res, True, residuals, Q)
    log.warning("value iteration stopped after %d sweeps with residual %.3e", max_iter, residuals[-1])
    return SolveResult(v, max_iter, residuals[-1], False, residuals, Q)


def extract_policy(
    mdp: CountableMdp,
    v: np.ndarray,
    tie_tol: float = TIE_TOL,
    prefer: np.ndarray | None = None,
) -> np.ndarray:
    """Greedy policy with respect to ``v``.

    Actions whose Q-value is within ``tie_tol`` of the best are tied; ties
    go to ``prefer[s]`` when it is among them, otherwise to the lowest
    action id.
    """
    Q = q_values(mdp, v)
    near = Q >= Q.max(axis=1, keepdims=True) - tie_tol
    policy = np.argmax(near, axis=1)
    if prefer is not None:
        prefer = np.asarray(prefer)
        keep = near[np.arange(mdp.n_states), prefer]
        policy = np.where(keep, prefer, policy)
    return policy


def policy_matrix(mdp: CountableMdp, policy: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Transition matrix and reward vector of the chain induced by ``policy``."""
    policy = np.asarray(policy)
    if policy.shape != (mdp.n_states,):
        raise ValueError("policy must assign one action per state")
    if not mdp.allowed[np.arange(mdp.n_states), policy].all():
        s = int(np.flatnonzero(~mdp.allowed[np.arange(mdp.n_states), policy])[0])
        raise MdpValidationError(f"policy uses unavailable action {policy[s]} at state {mdp._label(s)}")
    P = None
    for a in range(mdp.n_actions):
        sel = sp.diags((policy == a).astype(np.float64))
        part = sel @ mdp.P[a]
        P = part if P is None else P + part
    r = mdp.R[np.arange(mdp.n_states), policy]
    return sp.csr_matrix(P), r


def policy_evaluation(
    mdp: CountableMdp,
    policy: np.ndarray,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SolveResult:
    """Fixed point of the backup restricted to ``policy``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    P, r = policy_matrix(mdp, policy)
    v = np.zeros(mdp.n_states)
    residuals: list[float] = []
    for it in range(1, max_iter + 1):
        v_new = r + mdp.discount * (P @ v)
        res = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        residuals.append(res)
        v = v_new
        if res <= tol:
            return SolveResult(v, it, res, True, residuals)
    log.warning("policy evaluation stopped after %d sweeps with residual %.3e", max_iter, residuals[-1])
    return SolveResult(v, max_iter, residuals[-1], False, residuals)


def finite_horizon_dp(mdp: CountableMdp, horizon: int) -> list[np.ndarray]:
    """Backward induction; element ``t - 1`` is the optimal ``t``-step discounted value."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    v = np.zeros(mdp.n_states)
    stages = []
    for _ in range(horizon):
        v, _ = bellman_backup(mdp, v)
        stages.append(v)
    return stages


def write_values_csv(mdp: CountableMdp, values: np.ndarray, path: Any) -> None:
    """Debug dump with rows ``state_id,value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state_id", "value"])
        for s, val in zip(mdp.states, values):
            w.writerow([s, repr(float(val))])

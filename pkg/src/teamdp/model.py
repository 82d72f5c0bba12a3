"""Ground-truth dynamics of the one- and two-device multiple-access channel.

Buffers hold at most one packet, arrivals are Bernoulli, and the channel is
a two-state Markov chain (0 = idle, 1 = busy).  A transmission succeeds only
when exactly one device transmits on an idle channel.  After any
transmission both devices learn the channel state of that slot; otherwise
they get no channel observation (encoded as ``NO_OBS``).

The step functions accept scalars or equally shaped numpy arrays.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Any, NamedTuple, Protocol, Sequence

import numpy as np

NO_OBS = -1


class IllegalActionError(ValueError):
    """A device transmitted from an empty buffer (or produced a non-binary action)."""


@dataclass(frozen=True)
class ModelParams:
    p1: float = 0.3
    p2: float = 0.3
    alpha0: float = 0.75
    alpha1: float = 0.75
    c: float = 0.3
    r: float = 1.0
    beta: float = 0.9

    def __post_init__(self):
        for name in ("p1", "p2", "alpha0", "alpha1", "beta"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        for name in ("c", "r"):
            v = getattr(self, name)
            if not v >= 0.0:
                raise ValueError(f"{name} must be non-negative, got {v}")

    @property
    def channel_matrix(self) -> np.ndarray:
        a0, a1 = self.alpha0, self.alpha1
        return np.array([[a0, 1 - a0], [1 - a1, a1]])

    @property
    def stationary(self) -> np.ndarray:
        """Stationary distribution ``(P(idle), P(busy))`` of the channel chain."""
        b0, b1 = 1 - self.alpha0, 1 - self.alpha1
        return np.array([b1, b0]) / (b0 + b1)

    def arrival(self, device: int) -> float:
        if device not in (1, 2):
            raise ValueError("device must be 1 or 2")
        return self.p1 if device == 1 else self.p2

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


class SystemState(NamedTuple):
    n1: int
    n2: int
    s: int


def feedback_label(h: int) -> str:
    return "E" if h == NO_OBS else str(int(h))


def _check_action(u, n, who: str) -> None:
    u, n = np.asarray(u), np.asarray(n)
    if np.any((u != 0) & (u != 1)):
        raise IllegalActionError(f"{who}: actions must be 0 or 1")
    if np.any(u > n):
        raise IllegalActionError(f"{who}: cannot transmit from an empty buffer")


def _scalar(x):
    x = np.asarray(x)
    return x.item() if x.ndim == 0 else x


def two_device_transition(n1, n2, s, u1, u2, w1, w2):
    """Next buffer contents for one slot (no legality checks)."""
    n1, n2, s, u1, u2 = (np.asarray(x, dtype=np.int64) for x in (n1, n2, s, u1, u2))
    idle = 1 - s
    n1_next = np.minimum(n1 - u1 * (1 - u2) * idle + w1, 1)
    n2_next = np.minimum(n2 - u2 * (1 - u1) * idle + w2, 1)
    return n1_next, n2_next


def two_device_reward(params: ModelParams, s, u1, u2):
    s, u1, u2 = np.asarray(s), np.asarray(u1), np.asarray(u2)
    return -(u1 + u2) * params.c + (u1 ^ u2) * (1 - s) * params.r


def feedback_of(s, u1, u2):
    return np.where((np.asarray(u1) + np.asarray(u2)) > 0, s, NO_OBS)


def step_two_device(params: ModelParams, state: SystemState, u1, u2, noise):
    """Advance the two-device system by one slot.

    ``noise`` is ``(w1, w2, s_next)``: the arrival indicators and the already
    drawn next channel state.  Returns ``(next_state, reward, feedback)``.
    """
    n1, n2, s = state
    _check_action(u1, n1, "device 1")
    _check_action(u2, n2, "device 2")
    w1, w2, s_next = noise
    n1n, n2n = two_device_transition(n1, n2, s, u1, u2, w1, w2)
    reward = two_device_reward(params, s, u1, u2)
    h = feedback_of(s, u1, u2)
    return SystemState(_scalar(n1n), _scalar(n2n), _scalar(s_next)), _scalar(reward), _scalar(h)


def step_one_device(params: ModelParams, state: tuple, u, noise):
    """Advance the single-device system; ``noise`` is ``(w, s_next)``."""
    n, s = state
    _check_action(u, n, "device")
    w, s_next = noise
    n_next = np.minimum(np.asarray(n) - np.asarray(u) * (1 - np.asarray(s)) + w, 1)
    reward = np.asarray(u) * (-params.c + params.r * (1 - np.asarray(s)))
    h = np.where(np.asarray(u) > 0, s, NO_OBS)
    return (_scalar(n_next), _scalar(s_next)), _scalar(reward), _scalar(h)


class Controller(Protocol):
    """Batched decision maker for one device.

    ``act`` maps the device's own buffer contents to actions; ``observe``
    receives the shared slot outcome ``(u1, u2, feedback)``.  For the
    single-device system ``u2`` is always zero.
    """

    def reset(self, batch: int) -> None: ...

    def act(self, n: np.ndarray) -> np.ndarray: ...

    def observe(self, u1: np.ndarray, u2: np.ndarray, feedback: np.ndarray) -> None: ...


class NeverTransmit:
    def reset(self, batch: int) -> None:
        pass

    def act(self, n: np.ndarray) -> np.ndarray:
        return np.zeros_like(n)

    def observe(self, u1, u2, feedback) -> None:
        pass


class AlwaysTransmit(NeverTransmit):
    """Transmit whenever the buffer holds a packet."""

    def act(self, n: np.ndarray) -> np.ndarray:
        return np.array(n, copy=True)


def make_streams(seed: int, n: int = 4) -> list[np.random.Generator]:
    """Independent counter-based (Philox) streams spawned from one seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


@dataclass
class BatchOutcome:
    returns: np.ndarray
    records: list[dict[str, Any]] | None = None


def simulate_batch(
    params: ModelParams,
    controllers: Sequence[Controller],
    episodes: int,
    horizon: int,
    seed: int,
    reveal_initial_channel: bool = False,
    record: bool = False,
) -> BatchOutcome:
    """Run ``episodes`` independent trajectories and return discounted returns.

    One controller means the single-device system; two mean the two-device
    system.  Episodes start with empty buffers and the channel drawn from its
    stationary law.  With ``reveal_initial_channel`` the slot-0 channel state
    is delivered as feedback after slot 0 even though nobody transmits, which
    synchronises all beliefs on the reachable set.  ``record`` keeps the
    per-slot trace of episode 0.
    """
    if horizon < 1 or episodes < 1:
        raise ValueError("episodes and horizon must be at least 1")
    if len(controllers) not in (1, 2):
        raise ValueError("expected one or two controllers")
    two = len(controllers) == 2
    g_init, g_chan, g_w1, g_w2 = make_streams(seed)
    for ctl in controllers:
        ctl.reset(episodes)
    a0, a1 = params.alpha0, params.alpha1
    s = (g_init.random(episodes) < params.stationary[1]).astype(np.int64)
    n1 = np.zeros(episodes, dtype=np.int64)
    n2 = np.zeros(episodes, dtype=np.int64)
    zero = np.zeros(episodes, dtype=np.int64)
    returns = np.zeros(episodes)
    disc = 1.0
    records: list[dict[str, Any]] | None = [] if record else None
    for t in range(horizon):
        u1 = np.asarray(controllers[0].act(n1.copy()), dtype=np.int64)
        u2 = np.asarray(controllers[1].act(n2.copy()), dtype=np.int64) if two else zero
        try:
            _check_action(u1, n1, "device 1")
            _check_action(u2, n2, "device 2")
        except IllegalActionError as exc:
            raise IllegalActionError(f"slot {t}: {exc}") from None
        reward = two_device_reward(params, s, u1, u2)
        h = feedback_of(s, u1, u2)
        if t == 0 and reveal_initial_channel:
            h = s.copy()
        w1 = (g_w1.random(episodes) < params.p1).astype(np.int64)
        w2 = (g_w2.random(episodes) < params.p2).astype(np.int64) if two else zero
        draw = g_chan.random(episodes)
        s_next = np.where(s == 0, draw >= a0, draw < a1).astype(np.int64)
        if records is not None:
            records.append(
                dict(t=t, n1=int(n1[0]), n2=int(n2[0]), s=int(s[0]), u1=int(u1[0]),
                     u2=int(u2[0]), reward=float(reward[0]), feedback=int(h[0]),
                     w1=int(w1[0]), w2=int(w2[0]))
            )
        returns += disc * reward
        disc *= params.beta
        n1, n2 = two_device_transition(n1, n2, s, u1, u2, w1, w2)
        s = s_next
        for ctl in controllers:
            ctl.observe(u1, u2, h)
    return BatchOutcome(returns, records)


def sample_trajectory(
    params: ModelParams,
    strategy: Controller | Sequence[Controller],
    horizon: int,
    seed: int,
    reveal_initial_channel: bool = False,
) -> list[dict[str, Any]]:
    """One seeded trajectory as a list of per-slot records.

    Record keys: ``t, n1, n2, s, u1, u2, reward, feedback`` plus the arrival
    draws ``w1, w2`` of that slot.
    """
    controllers = list(strategy) if isinstance(strategy, (list, tuple)) else [strategy]
    out = simulate_batch(params, controllers, 1, horizon, seed, reveal_initial_channel, record=True)
    return out.records


def write_trajectory_csv(records: Sequence[dict[str, Any]], path: Any) -> None:
    cols = ["t", "n1", "n2", "s", "u1", "u2", "reward", "feedback"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for rec in records:
            row = [rec[c] for c in cols]
            row[-1] = feedback_label(rec["feedback"])
            w.writerow(row)

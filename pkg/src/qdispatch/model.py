"""Core domain types for the discrete-time multi-server dispatch system.

A single dispatcher receives Bernoulli(lambda) job arrivals, one per slot at
most, and routes each to one of K queues. Server i offers service with
probability mu_i per slot, so service times are Geometric(mu_i). Queues
evolve by ``Q_i(t+1) = Q_i(t) + A_i(t) - D_i(t)`` where a job arriving to an
empty queue may depart in the same slot.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np


class StabilityError(ValueError):
    """Raised when an arrival rate meets or exceeds the available service rate."""


@dataclass(frozen=True)
class SystemParams:
    """Ground-truth world: arrival rate and per-server service rates."""

    lam: float
    mu: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"arrival rate must be in (0, 1), got {self.lam}")
        if len(self.mu) < 1:
            raise ValueError("need at least one server")
        for m in self.mu:
            if not 0.0 < m < 1.0:
                raise ValueError(f"service rates must be in (0, 1), got {m}")
        if self.lam >= sum(self.mu):
            raise StabilityError(
                f"unstable system: lambda={self.lam} >= sum(mu)={sum(self.mu)}"
            )

    @property
    def K(self) -> int:
        return len(self.mu)

    def mu_array(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=np.float64)


@dataclass
class QueueState:
    """Queue lengths at the beginning of a slot. Owned by one simulation worker."""

    q: np.ndarray
    t: int = 0

    @classmethod
    def empty(cls, K: int) -> "QueueState":
        return cls(q=np.zeros(K, dtype=np.int64), t=0)

    def copy(self) -> "QueueState":
        return QueueState(q=self.q.copy(), t=self.t)


def step(state: QueueState, arrivals: np.ndarray, offered: np.ndarray) -> QueueState:
    """Advance one slot: arrivals join first, then each nonempty queue departs
    one job iff its offered-service coin is 1.

    ``arrivals`` must contain at most a single 1 (single-arrival model).
    """
    arrivals = np.asarray(arrivals, dtype=np.int64)
    offered = np.asarray(offered, dtype=np.int64)
    if arrivals.sum() > 1:
        raise ValueError("at most one arrival per slot")
    backlog = state.q + arrivals
    departures = np.where(backlog > 0, offered, 0)
    new_q = backlog - departures
    assert (new_q >= 0).all()
    return QueueState(q=new_q, t=state.t + 1)


def geo_mean_queue(lambda_eff: float, mu: float) -> float:
    """Steady-state mean queue length of a Geo/Geo/1 queue,
    lambda'(1-mu')/(mu'-lambda')."""
    if lambda_eff < 0.0:
        raise ValueError("arrival rate must be nonnegative")
    if not 0.0 < mu < 1.0:
        raise ValueError(f"service rate must be in (0, 1), got {mu}")
    if lambda_eff >= mu:
        raise StabilityError(f"unstable queue: lambda={lambda_eff} >= mu={mu}")
    return lambda_eff * (1.0 - mu) / (mu - lambda_eff)


def total_mean_queue(params: SystemParams, p) -> float:
    """Mean total queue length under weighted random routing with vector p."""
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    if p.shape != (params.K,):
        raise ValueError("routing vector length must match server count")
    return float(sum(geo_mean_queue(params.lam * pi, mi) for pi, mi in zip(p, params.mu)))


def geometric_fleet(lam: float, K: int = 6, total: float = 0.99) -> SystemParams:
    """Heterogeneous fleet with mu_i = 2^(i-1) * mu_1 and sum(mu) = total."""
    mu1 = total / (2**K - 1)
    return SystemParams(lam=lam, mu=tuple(mu1 * 2**i for i in range(K)))


def _encode_stream_part(part) -> int:
    if part is None:
        return 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


@dataclass(frozen=True)
class RandomStream:
    """Counter-based, splittable random stream.

    Identified by a 64-bit seed plus a stream id tuple, conventionally
    (replication index, purpose tag, server index or None). The same
    (seed, stream_id) yields the identical draw sequence on every platform;
    distinct ids give statistically independent Philox streams. Coupled twin
    systems share randomness by sharing streams, not by storing sample paths.
    """

    seed: int
    stream_id: tuple = field(default=())

    def child(self, *parts) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id + tuple(parts))

    def generator(self) -> np.random.Generator:
        key = tuple(_encode_stream_part(p) for p in self.stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

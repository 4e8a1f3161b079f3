"""Dispatch policies: the genie baseline, the eps_t-exploration learner, the
bandit comparison policies, and the queue-aware JSQ/JFSQ baselines.

Learner policies only ever see the arrival rate, the estimator snapshot, and
(for queue-aware policies) the observed queue lengths. The true service rates
are reserved for the genie and for JSQ/JFSQ tie-breaking.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimation import RateEstimator
from .model import SystemParams
from .routing import optimal_routing

RATE_CLAMP_LO = 1e-9
RATE_CLAMP_HI = 1.0 - 1e-9

LEARNER_KINDS = ("eps-klnt", "eps-kt", "ucb", "ts", "uniform", "fixed", "pinned")
QUEUE_AWARE_KINDS = ("jsq", "jfsq")
ALL_KINDS = ("owr",) + LEARNER_KINDS + QUEUE_AWARE_KINDS


@dataclass(frozen=True)
class PolicySpec:
    """Which dispatch law to run and what the dispatcher is allowed to observe.

    ``observation`` is one of "none", "full", "own", "delayed"; queue-aware
    kinds require a non-"none" observation model and vice versa.
    ``explore_first`` is the naive fixed-exploration budget (number of initial
    jobs dispatched uniformly) for kind "fixed". ``pinned_p`` freezes the
    exploit distribution for diagnostic runs. ``uniform_until_sampled``
    replaces the optimistic warm start: dispatch uniformly while any server
    has zero departures.
    """

    kind: str
    observation: str = "none"
    explore_first: int = 0
    refresh_prob: float = 1.0 / 3.0
    pinned_p: tuple[float, ...] | None = None
    uniform_until_sampled: bool = False

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind in QUEUE_AWARE_KINDS:
            if self.observation == "none":
                raise ValueError(f"{self.kind} requires queue observation")
        elif self.observation != "none":
            raise ValueError(f"{self.kind} must use observation='none'")
        if self.kind == "fixed" and self.explore_first < 0:
            raise ValueError("explore_first must be >= 0")
        if self.kind == "pinned" and self.pinned_p is None:
            raise ValueError("pinned policy needs a distribution")

    @property
    def is_learner(self) -> bool:
        return self.kind in LEARNER_KINDS


def parse_policy(text: str) -> PolicySpec:
    """Parse a CLI policy string, e.g. "eps-klnt", "fixed:20",
    "jsq/obs=delayed:0.33"."""
    obs = "none"
    if "/" in text:
        text, obs_part = text.split("/", 1)
        if not obs_part.startswith("obs="):
            raise ValueError(f"bad observation spec {obs_part!r}")
        obs = obs_part[4:]
    refresh = 1.0 / 3.0
    if obs.startswith("delayed"):
        if ":" in obs:
            obs, refresh_s = obs.split(":", 1)
            refresh = float(refresh_s)
        obs = "delayed"
    if obs not in ("none", "full", "own", "delayed"):
        raise ValueError(f"unknown observation model {obs!r}")
    if text.startswith("fixed:"):
        return PolicySpec(kind="fixed", explore_first=int(text.split(":", 1)[1]),
                          observation=obs)
    if text in ("jsq", "jfsq") and obs == "none":
        obs = "full"
    return PolicySpec(kind=text, observation=obs, refresh_prob=refresh)


@dataclass
class DispatchContext:
    """Everything a policy may look at when an arrival must be routed.

    ``mu_true`` is populated only for the genie and for JSQ/JFSQ tie-breaks;
    learner policies must not read it.
    """

    t: int
    lam: float
    K: int
    estimator: RateEstimator | None = None
    mu_true: np.ndarray | None = None
    observed_q: np.ndarray | None = None
    jobs_dispatched: int = 0


def exploration_prob(t: int, K: int) -> float:
    """Exploration probability min{1, K ln t / t}; the first slot always
    explores (a literal ln 1 = 0 would force exploitation with no data)."""
    if t < 1:
        raise ValueError("slots are indexed from 1")
    if t == 1:
        return 1.0
    return min(1.0, K * math.log(t) / t)


def ucb_rates(est: RateEstimator) -> np.ndarray:
    """Optimistic rates mu_hat_i + 1/sqrt(N_i), clamped into (0, 1)."""
    n = np.maximum(est.n, 1)
    return np.clip(est.estimates() + 1.0 / np.sqrt(n), RATE_CLAMP_LO, RATE_CLAMP_HI)


def ts_rates(est: RateEstimator, rng: np.random.Generator) -> np.ndarray:
    """One Beta(mu_hat*N + 1, (1-mu_hat)*N + 1) draw per server; servers with
    no data draw from Beta(1, 1)."""
    mu_hat = est.estimates()
    a = mu_hat * est.n + 1.0
    b = (1.0 - mu_hat) * est.n + 1.0
    return rng.beta(a, b)


def routing_from_rates(lam: float, rates: np.ndarray) -> np.ndarray | None:
    """Routing vector for estimated rates, or None when the estimated system
    is infeasible (sum of rates <= lam) and the caller must fall back to
    uniform dispatch."""
    rates = np.clip(rates, RATE_CLAMP_LO, RATE_CLAMP_HI)
    if rates.sum() <= lam:
        return None
    params = SystemParams(lam=lam, mu=tuple(rates))
    return optimal_routing(params).as_array()


def exploit_distribution(
    spec: PolicySpec, ctx: DispatchContext, rng: np.random.Generator
) -> np.ndarray:
    """The distribution this policy would exploit from at slot ctx.t."""
    uniform = np.full(ctx.K, 1.0 / ctx.K)
    if spec.kind == "owr":
        p = routing_from_rates(ctx.lam, np.asarray(ctx.mu_true))
        assert p is not None  # true params are stable by construction
        return p
    if spec.kind == "uniform":
        return uniform
    if spec.kind == "pinned":
        return np.asarray(spec.pinned_p, dtype=np.float64)
    if spec.kind == "ucb":
        rates = ucb_rates(ctx.estimator)
    elif spec.kind == "ts":
        rates = ts_rates(ctx.estimator, rng)
    else:  # eps-klnt, eps-kt, fixed: exploit the plain estimates
        rates = ctx.estimator.estimates()
    p = routing_from_rates(ctx.lam, rates)
    return uniform if p is None else p


def _sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return int(np.searchsorted(np.cumsum(p), u, side="right").clip(0, len(p) - 1))


def decide(spec: PolicySpec, ctx: DispatchContext, rng: np.random.Generator) -> int:
    """Route one arrival. Returns the destination server index."""
    if spec.kind in QUEUE_AWARE_KINDS:
        q = np.asarray(ctx.observed_q)
        shortest = np.flatnonzero(q == q.min())
        if len(shortest) == 1:
            return int(shortest[0])
        if spec.kind == "jsq":
            return int(shortest[rng.integers(len(shortest))])
        mu = np.asarray(ctx.mu_true)[shortest]
        return int(shortest[int(np.argmax(mu))])

    if spec.uniform_until_sampled and ctx.estimator is not None \
            and (ctx.estimator.n == 0).any():
        return int(rng.integers(ctx.K))

    if spec.kind == "fixed":
        if ctx.jobs_dispatched < spec.explore_first:
            return int(rng.integers(ctx.K))
    elif spec.kind in ("eps-klnt", "eps-kt"):
        eps = exploration_prob(ctx.t, ctx.K) if spec.kind == "eps-klnt" \
            else min(1.0, ctx.K / ctx.t)
        if rng.random() < eps:
            return int(rng.integers(ctx.K))

    return _sample_index(exploit_distribution(spec, ctx, rng), rng)

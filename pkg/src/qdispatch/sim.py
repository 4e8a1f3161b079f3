"""Discrete-time engine: coupled twin-system regret runs and single-system
steady-state runs.

The coupled run advances a learner system and a genie system (optimal
weighted random routing with true rates) on shared arrival and
offered-service coins; dispatch decisions are coupled through the maximal
coupling of the learner's current exploit distribution with p*. Regret is
the running sum of the total queue-length difference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .model import RandomStream, SystemParams
from .policies import PolicySpec
from .routing import RoutingVector, optimal_routing

_POLICY_CODE = {
    "owr": _engine.GENIE,
    "eps-klnt": _engine.EPS_KLNT,
    "eps-kt": _engine.EPS_KT,
    "ucb": _engine.UCB,
    "ts": _engine.TS,
    "uniform": _engine.UNIFORM,
    "fixed": _engine.FIXED,
    "pinned": _engine.PINNED,
}

_OBS_CODE = {"full": _engine.OBS_FULL, "own": _engine.OBS_OWN,
             "delayed": _engine.OBS_DELAYED}


def tv_distance(p, q) -> float:
    """Total variation distance sum_j max(0, q_j - p_j) between two
    probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.maximum(q - p, 0.0).sum())


def sample_maximal_coupling(p_hat, p_star, rng: np.random.Generator, size=None):
    """Draw (sigma, sigma_star) with marginals p_hat and p_star such that
    P(sigma != sigma_star) = tv_distance(p_hat, p_star).

    With probability sum_j min(p_hat_j, p_star_j) both indices are drawn
    together from the normalized min vector; otherwise sigma comes from the
    normalized p_hat-excess and sigma_star independently from the normalized
    p_star-excess. ``size=None`` returns a scalar pair, otherwise arrays.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    p_star = np.asarray(p_star, dtype=np.float64)
    K = len(p_hat)
    n = 1 if size is None else int(size)
    common = np.minimum(p_hat, p_star)
    m = common.sum()
    u = rng.random(n)
    sigma = np.empty(n, dtype=np.int64)
    sigma_star = np.empty(n, dtype=np.int64)

    take_common = (u < m) | (1.0 - m < 1e-12)
    cum_common = np.cumsum(common)
    idx = np.searchsorted(cum_common, u[take_common], side="right")
    sigma[take_common] = np.clip(idx, 0, K - 1)
    sigma_star[take_common] = sigma[take_common]

    split = ~take_common
    if split.any():
        ex_hat = np.cumsum(p_hat - common)
        ex_star = np.cumsum(p_star - common)
        t1 = u[split] - m
        t2 = rng.random(int(split.sum())) * (1.0 - m)
        sigma[split] = np.clip(np.searchsorted(ex_hat, t1, side="right"), 0, K - 1)
        sigma_star[split] = np.clip(
            np.searchsorted(ex_star, t2, side="right"), 0, K - 1)
    if size is None:
        return int(sigma[0]), int(sigma_star[0])
    return sigma, sigma_star


def geometric_checkpoints(horizon: int, count: int = 64) -> tuple[int, ...]:
    """Default log-spaced checkpoint grid over [1, horizon]."""
    pts = np.unique(np.geomspace(1, horizon, count).round().astype(np.int64))
    return tuple(int(x) for x in pts)


@dataclass(frozen=True)
class Scenario:
    """One simulated world: system parameters, horizon, policy, optional
    per-server external Bernoulli traffic, and the regret checkpoint grid."""

    params: SystemParams
    horizon: int
    policy: PolicySpec
    external: tuple[float, ...] | None = None
    checkpoints: tuple[int, ...] = ()

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        cps = self.checkpoints or geometric_checkpoints(self.horizon)
        cps = tuple(sorted(set(int(c) for c in cps)))
        if cps and (cps[0] < 1 or cps[-1] > self.horizon):
            raise ValueError("checkpoints must lie in [1, horizon]")
        object.__setattr__(self, "checkpoints", cps)
        if self.external is not None:
            ext = tuple(float(x) for x in self.external)
            if len(ext) != self.params.K:
                raise ValueError("external rates must match server count")
            if any(not 0.0 <= x < 1.0 for x in ext):
                raise ValueError("external rates must lie in [0, 1)")
            object.__setattr__(self, "external", ext)

    def routing_params(self) -> SystemParams:
        """Parameters the OWR baseline solves: with external traffic the
        dispatcher knows only the residual rates mu_i - lam_i_ext."""
        if self.external is None:
            return self.params
        resid = tuple(m - e for m, e in zip(self.params.mu, self.external))
        if any(x <= 0 for x in resid):
            raise ValueError("external traffic saturates a server")
        return SystemParams(lam=self.params.lam, mu=resid)


@dataclass(frozen=True)
class RegretTrace:
    """Cumulative regret sum_{tau<=t} sum_i (Q_i - Q*_i) at each checkpoint."""

    checkpoints: tuple[int, ...]
    values: tuple[int, ...]
    seed: int


@dataclass
class CoupledDiagnostics:
    p_star: RoutingVector
    mismatch: np.ndarray            # per-server count of {A^O_i=1, A*_i=0}
    exploit_counts_first_half: np.ndarray
    exploit_counts_second_half: np.ndarray
    explore_slots: int
    exploit_slots: int
    fallback_slots: int
    busy_at_checkpoints: np.ndarray  # (C, K) learner busy-period lengths
    final_q_learner: np.ndarray
    final_q_genie: np.ndarray
    arrivals: int
    departures_learner: int
    departures_genie: int
    queue_totals: np.ndarray | None = None  # (T, 2) when recorded


def busy_period(history, t: int) -> int:
    """Slots since queue was last empty: min{s >= 0 : history[t - s] == 0}.
    ``history`` holds queue lengths indexed by slot, with history[0] the empty
    initial state."""
    history = np.asarray(history)
    if not 0 <= t < len(history):
        raise ValueError("t outside recorded range")
    s = 0
    while history[t - s] != 0:
        s += 1
    return s


def _draw_coins(stream: RandomStream, T: int, K: int, lam: float, mu,
                need_ts: bool):
    arr = (stream.child("arrival").generator().random(T) < lam).astype(np.uint8)
    svc = np.empty((T, K), dtype=np.uint8)
    for i in range(K):
        svc[:, i] = stream.child("service", i).generator().random(T) < mu[i]
    eps_u = stream.child("explore").generator().random(T)
    unif_u = stream.child("uniform").generator().random(T)
    cpl_u = stream.child("coupling").generator().random((T, 2))
    if need_ts:
        n_buf = int(2 * K * (lam * T + 10 * math.sqrt(lam * T) + 100) * 1.3)
        g = stream.child("ts").generator()
        ts_normals = g.standard_normal(n_buf)
        ts_uniforms = g.random(n_buf)
    else:
        ts_normals = np.empty(0)
        ts_uniforms = np.empty(0)
    return arr, svc, eps_u, unif_u, cpl_u, ts_normals, ts_uniforms


def run_coupled(
    scenario: Scenario,
    seed: int,
    replication: int = 0,
    record_totals: bool = False,
) -> tuple[RegretTrace, CoupledDiagnostics]:
    """Run the learner system and the genie twin on shared randomness and
    return the regret trace plus coupling diagnostics."""
    spec = scenario.policy
    if spec.kind not in _POLICY_CODE:
        raise ValueError(f"policy {spec.kind!r} cannot run coupled")
    if scenario.external is not None:
        raise ValueError("coupled regret runs do not support external traffic")
    params = scenario.params
    T = scenario.horizon
    K = params.K
    p_star = optimal_routing(params)

    stream = RandomStream(seed, (replication,))
    need_ts = spec.kind == "ts"
    coins = _draw_coins(stream, T, K, params.lam, params.mu, need_ts)
    arr, svc, eps_u, unif_u, cpl_u, ts_normals, ts_uniforms = coins
    pinned = np.asarray(spec.pinned_p if spec.pinned_p is not None
                        else np.zeros(K), dtype=np.float64)
    checkpoints = np.asarray(scenario.checkpoints, dtype=np.int64)

    while True:
        out = _engine.coupled_kernel(
            params.lam,
            params.mu_array(),
            p_star.as_array(),
            _POLICY_CODE[spec.kind],
            spec.explore_first,
            pinned,
            spec.uniform_until_sampled,
            arr, svc, eps_u, unif_u, cpl_u,
            ts_normals, ts_uniforms,
            checkpoints,
            record_totals,
        )
        (regret_cp, busy_cp, mismatch, exploit_h1, exploit_h2, explore_slots,
         exploit_slots, fallback, qL, qG, cum_arr, cum_dep_L, cum_dep_G,
         totals, overflow) = out
        if not overflow:
            break
        # TS consumed more rejection-sampling draws than budgeted; redraw wider
        g = stream.child("ts", len(ts_normals)).generator()
        ts_normals = np.concatenate([ts_normals, g.standard_normal(len(ts_normals))])
        ts_uniforms = np.concatenate([ts_uniforms, g.random(len(ts_uniforms))])

    assert cum_arr - cum_dep_L == qL.sum(), "learner conservation violated"
    assert cum_arr - cum_dep_G == qG.sum(), "genie conservation violated"

    trace = RegretTrace(
        checkpoints=scenario.checkpoints,
        values=tuple(int(v) for v in regret_cp),
        seed=seed,
    )
    diag = CoupledDiagnostics(
        p_star=p_star,
        mismatch=mismatch,
        exploit_counts_first_half=exploit_h1,
        exploit_counts_second_half=exploit_h2,
        explore_slots=int(explore_slots),
        exploit_slots=int(exploit_slots),
        fallback_slots=int(fallback),
        busy_at_checkpoints=busy_cp,
        final_q_learner=qL,
        final_q_genie=qG,
        arrivals=int(cum_arr),
        departures_learner=int(cum_dep_L),
        departures_genie=int(cum_dep_G),
        queue_totals=totals if record_totals else None,
    )
    return trace, diag


@dataclass(frozen=True)
class SingleRunMetrics:
    time_avg_total_queue: float
    utilization: tuple[float, ...]
    mean_response_time: float
    dispatched_jobs: int
    completed_jobs: int
    arrivals: int
    departures: int
    final_q: tuple[int, ...]


def run_single(scenario: Scenario, seed: int, replication: int = 0) -> SingleRunMetrics:
    """Uncoupled single-system run for steady-state metrics; supports the
    static policies (owr, uniform, pinned) and queue-aware JSQ/JFSQ with
    full, own-jobs, or delayed observation, plus external cross-traffic."""
    spec = scenario.policy
    params = scenario.params
    T = scenario.horizon
    K = params.K

    if spec.kind in ("jsq", "jfsq"):
        policy_code = _engine.JSQ if spec.kind == "jsq" else _engine.JFSQ
        obs_code = _OBS_CODE[spec.observation]
        p_static = np.zeros(K)
    elif spec.kind in ("owr", "uniform", "pinned"):
        policy_code = _engine.STATIC
        obs_code = _engine.OBS_FULL
        if spec.kind == "owr":
            p_static = optimal_routing(scenario.routing_params()).as_array()
        elif spec.kind == "uniform":
            p_static = np.full(K, 1.0 / K)
        else:
            p_static = np.asarray(spec.pinned_p, dtype=np.float64)
    else:
        raise ValueError(
            f"policy {spec.kind!r} is a learner policy; use run_coupled")

    stream = RandomStream(seed, (replication,))
    arr = (stream.child("arrival").generator().random(T) < params.lam
           ).astype(np.uint8)
    svc = np.empty((T, K), dtype=np.uint8)
    for i in range(K):
        svc[:, i] = stream.child("service", i).generator().random(T) < params.mu[i]
    if scenario.external is not None:
        ext = np.empty((T, K), dtype=np.uint8)
        for i in range(K):
            ext[:, i] = (stream.child("external", i).generator().random(T)
                         < scenario.external[i])
    else:
        ext = np.zeros((T, K), dtype=np.uint8)
    unif_u = stream.child("uniform").generator().random(T)
    refresh_u = stream.child("refresh").generator().random(T)

    (qtot_sum, busy_slots, sojourn_sum, sojourn_n, dispatched, q,
     cum_arr, cum_dep, overflow) = _engine.single_kernel(
        params.lam, params.mu_array(), p_static, policy_code, obs_code,
        spec.refresh_prob, arr, svc, ext, unif_u, refresh_u,
    )
    if overflow:
        raise RuntimeError("queue buffer overflow: system appears unstable")
    assert cum_arr - cum_dep == q.sum(), "conservation violated"

    return SingleRunMetrics(
        time_avg_total_queue=qtot_sum / T,
        utilization=tuple(busy_slots / T),
        mean_response_time=(sojourn_sum / sojourn_n) if sojourn_n else math.nan,
        dispatched_jobs=int(dispatched),
        completed_jobs=int(sojourn_n),
        arrivals=int(cum_arr),
        departures=int(cum_dep),
        final_q=tuple(int(x) for x in q),
    )

"""Optimal weighted random routing: closed form, support-set search,
sensitivity constants, and the tolerance-gap certification.

The optimal routing vector minimizes the total steady-state queue length
sum_i lam*p_i*(1-mu_i)/(mu_i - lam*p_i) subject to p being a distribution
with lam*p_i < mu_i. On its support S the solution is

    p_i = mu_i/lam - (s_i / sum_{j in S} s_j) * (sum_{j in S} mu_j / lam - 1),

with s_i = sqrt(mu_i * (1 - mu_i)). The support is always a prefix of the
servers sorted by decreasing service rate, found by dropping the slowest
server while the candidate has a nonpositive entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import StabilityError, SystemParams, total_mean_queue

ZERO_TOL = 1e-12


@dataclass(frozen=True)
class RoutingVector:
    """A validated probability vector over servers with its support set."""

    p: tuple[float, ...]
    support: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "p", tuple(float(x) for x in self.p))
        object.__setattr__(self, "support", frozenset(self.support))

    @classmethod
    def from_array(cls, p) -> "RoutingVector":
        p = np.asarray(p, dtype=np.float64)
        if (p < 0).any():
            raise ValueError("routing probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"routing probabilities must sum to 1, got {p.sum()}")
        return cls(p=tuple(p), support=frozenset(int(i) for i in np.nonzero(p > 0)[0]))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.p, dtype=np.float64)


def sorted_server_order(mu) -> list[int]:
    """Server indices by decreasing rate; ties keep the lower original index."""
    mu = list(mu)
    return sorted(range(len(mu)), key=lambda i: (-mu[i], i))


def routing_for_support(params: SystemParams, support) -> np.ndarray:
    """Evaluate the closed form on a candidate support.

    Entries off the support are zero; entries on the support may come out
    negative, which marks the candidate infeasible. The entries always sum
    to 1 in exact arithmetic.
    """
    support = sorted(set(int(i) for i in support))
    if not support:
        raise ValueError("support must be nonempty")
    if any(i < 0 or i >= params.K for i in support):
        raise ValueError("support indices out of range")
    mu_sum = sum(params.mu[i] for i in support)
    if mu_sum <= params.lam:
        raise StabilityError(
            f"support total service rate {mu_sum} <= lambda {params.lam}"
        )
    s = {i: math.sqrt(params.mu[i] * (1.0 - params.mu[i])) for i in support}
    s_sum = sum(s.values())
    excess = mu_sum / params.lam - 1.0
    p = np.zeros(params.K, dtype=np.float64)
    for i in support:
        p[i] = params.mu[i] / params.lam - (s[i] / s_sum) * excess
    return p


def optimal_routing(params: SystemParams) -> RoutingVector:
    """Closed-form optimum via the shrinking-support iteration: start with all
    servers, drop the slowest while any support entry is <= 0."""
    order = sorted_server_order(params.mu)
    m = params.K
    while True:
        support = order[:m]
        assert sum(params.mu[i] for i in support) > params.lam
        p = routing_for_support(params, support)
        if all(p[i] > ZERO_TOL for i in support):
            break
        m -= 1
    p[p < ZERO_TOL] = 0.0
    return RoutingVector(p=tuple(p), support=frozenset(support))


def oracle_optimal_routing(params: SystemParams) -> RoutingVector:
    """Independent oracle: enumerate every sorted-prefix support, keep the
    feasible candidates, and return the one with the smallest objective.

    Intended for tests and verification only; it never shares code paths with
    the iterative search beyond the closed-form evaluation.
    """
    order = sorted_server_order(params.mu)
    best = None
    best_obj = math.inf
    for m in range(1, params.K + 1):
        support = order[:m]
        if sum(params.mu[i] for i in support) <= params.lam:
            continue
        p = routing_for_support(params, support)
        if any(p[i] <= ZERO_TOL for i in support):
            continue
        obj = total_mean_queue(params, p)
        if obj < best_obj:
            best_obj = obj
            best = (p, support)
    assert best is not None, "no feasible prefix support (contradicts stability)"
    p, support = best
    return RoutingVector(p=tuple(p), support=frozenset(support))


def residual_capacities(params: SystemParams, p) -> np.ndarray:
    """Per-server slack r_i = mu_i - lam * p_i under routing p."""
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    r = params.mu_array() - params.lam * p
    if (r <= 0).any():
        raise StabilityError(f"nonpositive residual capacity: {r}")
    return r


def _support_of(params_lam: float, mu: np.ndarray) -> frozenset[int] | None:
    """Support of the perturbed instance, or None if the instance is invalid."""
    if (mu <= 0.0).any() or (mu >= 1.0).any() or params_lam >= mu.sum():
        return None
    try:
        perturbed = SystemParams(lam=params_lam, mu=tuple(mu))
    except (ValueError, StabilityError):
        return None
    return optimal_routing(perturbed).support


MAX_CORNER_K = 16


def tolerance_gap_estimate(
    params: SystemParams,
    resolution: float = 1e-4,
    sample_budget: int = 200,
    seed: int = 0,
) -> tuple[float, float]:
    """Bracket the tolerance gap: the largest uniform perturbation of the
    service rates that leaves the optimal support set unchanged.

    A perturbation that flips the support certifies an upper bound; surviving
    all 2^K corner perturbations plus ``sample_budget`` random ones only gives
    confidence in a lower bound, so the result is an interval [lo, hi]. For
    K > MAX_CORNER_K corner enumeration is skipped and the (wider, flagged by
    the caller via K) sampling-only interval is returned.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    base_support = optimal_routing(params).support
    mu = params.mu_array()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    use_corners = params.K <= MAX_CORNER_K
    if use_corners:
        signs = np.array(
            [[1.0 if (mask >> i) & 1 else -1.0 for i in range(params.K)]
             for mask in range(1 << params.K)]
        )
    else:
        signs = None

    def support_changes(delta: float) -> bool:
        if delta == 0.0:
            return False
        if use_corners:
            for sign in signs:
                if _support_of(params.lam, mu + delta * sign) != base_support:
                    return True
        for _ in range(sample_budget):
            pert = mu + rng.uniform(-delta, delta, size=params.K)
            if _support_of(params.lam, pert) != base_support:
                return True
        return False

    # Largest delta worth testing: beyond this the instance itself breaks.
    hi = float(min(min(mu), min(1.0 - mu), (mu.sum() - params.lam) / params.K))
    if support_changes(0.0):  # pragma: no cover - degenerate guard
        return (0.0, 0.0)
    if not support_changes(hi):
        return (hi, hi)
    lo = 0.0
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if support_changes(mid):
            hi = mid
        else:
            lo = mid
    return (lo, hi)


def geometric_concentration_coeff(mu: float) -> float:
    """Exponent constant for the geometric-rate estimator tail bound:
    min{1/(8 mu^2 (1-mu)), 1/(6 mu^2 (1-mu)(3-mu))}."""
    if not 0.0 < mu < 1.0:
        raise ValueError(f"rate must be in (0, 1), got {mu}")
    a = 1.0 / (8.0 * mu * mu * (1.0 - mu))
    b = 1.0 / (6.0 * mu * mu * (1.0 - mu) * (3.0 - mu))
    return min(a, b)


@dataclass(frozen=True)
class SensitivityConstants:
    """Constants controlling how routing reacts to service-rate error.

    ``c`` is the Lipschitz-style constant max(c1, c2); ``delta_cap`` is the
    largest rate error for which the per-server bound min{c*delta, r_i/(4 lam)}
    on the routing error is guaranteed; ``c_g`` is the smallest per-server
    geometric-concentration exponent.
    """

    r: tuple[float, ...]
    delta_cap: float
    c: float
    c_g: float
    delta_s_interval: tuple[float, float]
    lam: float

    def bound_p_error(self, delta: float) -> np.ndarray:
        """Per-server guaranteed bound on |p_hat_i - p*_i| for rate error delta."""
        if delta < 0:
            raise ValueError("delta must be nonnegative")
        r = np.asarray(self.r)
        return np.minimum(self.c * delta, r / (4.0 * self.lam))

    @property
    def zero_tolerance_gap(self) -> bool:
        return self.delta_s_interval[0] <= 0.0


def sensitivity_constants(
    params: SystemParams,
    delta_s_interval: tuple[float, float] | None = None,
    **gap_kwargs,
) -> SensitivityConstants:
    """Evaluate the sensitivity constants at the optimum of ``params``.

    Uses the lower endpoint of the tolerance-gap interval (computed here
    unless supplied).
    """
    star = optimal_routing(params)
    r = residual_capacities(params, star)
    support = sorted(star.support)
    mu_tilde = min(min(params.mu[j], 1.0 - params.mu[j]) for j in support)
    r_sum = float(sum(r[j] for j in support))
    size = len(support)
    lam = params.lam
    c1 = (1.0 / lam) * (1.0 + 4.0 * r_sum / mu_tilde + size)
    c2 = 1.0 / lam + 30.0 * r_sum / (lam * mu_tilde) + 16.0 * size / lam
    c = max(c1, c2)
    if delta_s_interval is None:
        delta_s_interval = tolerance_gap_estimate(params, **gap_kwargs)
    delta_cap = min(
        mu_tilde / 2.0,
        r_sum / size,
        min(r[j] for j in support) / (4.0 * c * lam),
        delta_s_interval[0],
    )
    c_g = min(geometric_concentration_coeff(m) for m in params.mu)
    return SensitivityConstants(
        r=tuple(float(x) for x in r),
        delta_cap=float(delta_cap),
        c=float(c),
        c_g=float(c_g),
        delta_s_interval=(float(delta_s_interval[0]), float(delta_s_interval[1])),
        lam=lam,
    )

"""Online service-rate estimation from observed departures.

The dispatcher never sees mu_i directly. Each departing job reveals its
service time (slots from head-of-queue to departure), and the rate estimate
for server i is the count of departures divided by their total service time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .routing import geometric_concentration_coeff

WARM_START_RATE = 1.0


@dataclass
class RateEstimator:
    """Per-server departure counts and cumulative observed service slots."""

    n: np.ndarray
    total_service: np.ndarray

    @classmethod
    def fresh(cls, K: int) -> "RateEstimator":
        return cls(n=np.zeros(K, dtype=np.int64),
                   total_service=np.zeros(K, dtype=np.int64))

    @property
    def K(self) -> int:
        return len(self.n)

    def record_departure(self, server: int, service_time: int) -> None:
        if service_time < 1:
            raise ValueError("service time is at least one slot")
        self.n[server] += 1
        self.total_service[server] += service_time

    def estimate(self, server: int) -> float:
        """n_i / sum of service times; servers with no data get the optimistic
        warm-start rate so they stay inside the estimated support set."""
        if self.n[server] == 0:
            return WARM_START_RATE
        return float(self.n[server] / self.total_service[server])

    def estimates(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            est = self.n / np.where(self.total_service > 0, self.total_service, 1)
        return np.where(self.n > 0, est, WARM_START_RATE)

    def copy(self) -> "RateEstimator":
        return RateEstimator(n=self.n.copy(), total_service=self.total_service.copy())


def concentration_bound(n: int, delta: float, mu: float) -> float:
    """Tail bound P(|mu_hat^(n) - mu| >= delta) <= exp(-n * c_g(mu) * delta^2),
    valid for delta in [0, mu*(1-mu)]."""
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    if not 0.0 <= delta <= mu * (1.0 - mu):
        raise ValueError(
            f"delta={delta} outside validity range [0, {mu * (1.0 - mu)}]"
        )
    return math.exp(-n * geometric_concentration_coeff(mu) * delta * delta)

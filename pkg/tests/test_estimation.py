"""Service-rate estimation from departures and the geometric tail bound."""
import math

import numpy as np
import pytest

from qdispatch import RateEstimator, concentration_bound
from qdispatch.estimation import WARM_START_RATE


class TestRateEstimator:
    def test_single_record(self):
        est = RateEstimator.fresh(3)
        est.record_departure(0, 4)
        np.testing.assert_array_equal(est.n, [1, 0, 0])
        np.testing.assert_array_equal(est.total_service, [4, 0, 0])

    def test_accumulation(self):
        est = RateEstimator.fresh(1)
        for x in (2, 3, 5):
            est.record_departure(0, x)
        assert est.n[0] == 3
        assert est.total_service[0] == 10
        assert est.estimate(0) == pytest.approx(0.3, abs=1e-15)

    def test_warm_start_default(self):
        est = RateEstimator.fresh(2)
        est.record_departure(0, 2)
        assert est.estimate(1) == WARM_START_RATE == 1.0
        np.testing.assert_array_equal(est.estimates(), [0.5, 1.0])

    def test_estimates_matches_scalar_path(self):
        rng = np.random.default_rng(0)
        est = RateEstimator.fresh(5)
        for _ in range(200):
            est.record_departure(int(rng.integers(5)),
                                 int(rng.geometric(0.4)))
        vec = est.estimates()
        for i in range(5):
            assert vec[i] == pytest.approx(est.estimate(i), abs=1e-15)

    def test_scale_consistency(self):
        one = RateEstimator.fresh(1)
        many = RateEstimator.fresh(1)
        batch = [3, 1, 7, 2]
        for x in batch:
            one.record_departure(0, x)
        for _ in range(5):
            for x in batch:
                many.record_departure(0, x)
        assert one.estimate(0) == pytest.approx(many.estimate(0), abs=1e-15)

    def test_estimates_stay_in_unit_interval(self):
        rng = np.random.default_rng(1)
        est = RateEstimator.fresh(3)
        for _ in range(1000):
            est.record_departure(int(rng.integers(3)),
                                 int(rng.geometric(0.05)))
            assert (0 < est.estimates()).all()
            assert (est.estimates() <= 1).all()

    def test_monte_carlo_consistency(self):
        rng = np.random.default_rng(2)
        est = RateEstimator.fresh(1)
        for x in rng.geometric(0.5, size=100_000):
            est.record_departure(0, int(x))
        assert abs(est.estimate(0) - 0.5) < 0.01

    def test_rejects_zero_service_time(self):
        est = RateEstimator.fresh(1)
        with pytest.raises(ValueError):
            est.record_departure(0, 0)

    def test_copy_is_independent(self):
        est = RateEstimator.fresh(2)
        est.record_departure(0, 3)
        dup = est.copy()
        dup.record_departure(0, 1)
        assert est.n[0] == 1 and dup.n[0] == 2

    def test_no_overflow_at_desk_scale(self):
        est = RateEstimator.fresh(1)
        est.n[0] = 10**6
        est.total_service[0] = 10**8
        est.record_departure(0, 10**6)
        assert est.total_service[0] == 10**8 + 10**6  # still exact int64


class TestConcentrationBound:
    def test_zero_delta(self):
        assert concentration_bound(10, 0.0, 0.5) == 1.0

    def test_half_rate_value(self):
        # c_g(0.5) = 8/15
        expected = math.exp(-10 * (8 / 15) * 0.04)
        assert concentration_bound(10, 0.2, 0.5) == pytest.approx(
            expected, rel=1e-12)
        assert concentration_bound(10, 0.2, 0.5) == pytest.approx(
            0.8079, abs=5e-4)

    def test_rejects_out_of_range_delta(self):
        with pytest.raises(ValueError):
            concentration_bound(10, 0.3, 0.5)  # 0.3 > mu(1-mu) = 0.25
        with pytest.raises(ValueError):
            concentration_bound(10, -0.1, 0.5)
        with pytest.raises(ValueError):
            concentration_bound(-1, 0.1, 0.5)

    def test_decreasing_in_n_and_delta(self):
        assert (concentration_bound(100, 0.1, 0.5)
                < concentration_bound(10, 0.1, 0.5))
        assert (concentration_bound(10, 0.2, 0.5)
                < concentration_bound(10, 0.1, 0.5))

    def test_tail_domination_spot_check(self):
        mu, n, delta, trials = 0.5, 100, 0.1, 20_000
        rng = np.random.default_rng(3)
        samples = rng.geometric(mu, size=(trials, n))
        est = n / samples.sum(axis=1)
        tail = (np.abs(est - mu) >= delta).mean()
        bound = concentration_bound(n, delta, mu)
        se = math.sqrt(bound * (1 - bound) / trials)
        assert tail <= bound + 3 * se

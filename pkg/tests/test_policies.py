"""Dispatch policies: parsing, exploration schedule, optimistic/posterior
rate variants, and the dispatch decision function."""
import math

import numpy as np
import pytest
from scipy import stats

from qdispatch import (
    DispatchContext,
    PolicySpec,
    RateEstimator,
    SystemParams,
    decide,
    exploration_prob,
    optimal_routing,
    parse_policy,
)
from qdispatch.policies import (
    RATE_CLAMP_HI,
    exploit_distribution,
    routing_from_rates,
    ts_rates,
    ucb_rates,
)


class TestPolicySpec:
    def test_queue_aware_requires_observation(self):
        with pytest.raises(ValueError):
            PolicySpec(kind="jsq")
        PolicySpec(kind="jsq", observation="full")

    def test_learners_reject_observation(self):
        with pytest.raises(ValueError):
            PolicySpec(kind="eps-klnt", observation="full")

    def test_fixed_needs_nonnegative_budget(self):
        with pytest.raises(ValueError):
            PolicySpec(kind="fixed", explore_first=-1)
        PolicySpec(kind="fixed", explore_first=0)

    def test_pinned_needs_distribution(self):
        with pytest.raises(ValueError):
            PolicySpec(kind="pinned")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            PolicySpec(kind="round-robin")


class TestParsePolicy:
    def test_simple_kinds(self):
        assert parse_policy("eps-klnt").kind == "eps-klnt"
        assert parse_policy("eps-kt").kind == "eps-kt"
        assert parse_policy("ucb").kind == "ucb"

    def test_fixed_with_budget(self):
        spec = parse_policy("fixed:20")
        assert spec.kind == "fixed"
        assert spec.explore_first == 20

    def test_queue_aware_defaults_to_full_observation(self):
        assert parse_policy("jsq").observation == "full"
        assert parse_policy("jfsq").observation == "full"

    def test_delayed_observation_with_refresh(self):
        spec = parse_policy("jsq/obs=delayed:0.33")
        assert spec.observation == "delayed"
        assert spec.refresh_prob == pytest.approx(0.33)
        spec = parse_policy("jfsq/obs=delayed")
        assert spec.refresh_prob == pytest.approx(1 / 3)

    def test_own_observation(self):
        assert parse_policy("jsq/obs=own").observation == "own"

    def test_bad_strings(self):
        with pytest.raises(ValueError):
            parse_policy("jsq/queue=full")
        with pytest.raises(ValueError):
            parse_policy("jsq/obs=psychic")
        with pytest.raises(ValueError):
            parse_policy("sed")


class TestExplorationProb:
    def test_first_slot_always_explores(self):
        assert exploration_prob(1, 6) == 1.0

    def test_cap_active_early(self):
        assert exploration_prob(2, 6) == 1.0  # 6 ln2 / 2 > 1

    def test_direct_values(self):
        assert exploration_prob(3, 1) == pytest.approx(math.log(3) / 3)
        assert exploration_prob(10**6, 6) == pytest.approx(
            6 * math.log(10**6) / 10**6)

    def test_rejects_nonpositive_slot(self):
        with pytest.raises(ValueError):
            exploration_prob(0, 6)


class TestRateVariants:
    def test_ucb_no_data_is_clamped_optimism(self):
        est = RateEstimator.fresh(2)
        rates = ucb_rates(est)
        np.testing.assert_allclose(rates, [RATE_CLAMP_HI, RATE_CLAMP_HI])

    def test_ucb_bonus(self):
        est = RateEstimator.fresh(1)
        est.n[0] = 100
        est.total_service[0] = 400
        assert ucb_rates(est)[0] == pytest.approx(0.25 + 0.1, abs=1e-12)

    def test_ts_parameters(self):
        captured = {}

        class FakeRng:
            def beta(self, a, b):
                captured["a"], captured["b"] = a, b
                return np.full(len(a), 0.5)

        est = RateEstimator.fresh(2)
        est.n[0] = 10
        est.total_service[0] = 20  # mu_hat = 0.5
        ts_rates(est, FakeRng())
        np.testing.assert_allclose(captured["a"], [6.0, 1.0])
        np.testing.assert_allclose(captured["b"], [6.0, 1.0])

    def test_ts_no_data_is_uniform_prior(self):
        rng = np.random.default_rng(0)
        draws = np.array([ts_rates(RateEstimator.fresh(1), rng)[0]
                          for _ in range(4000)])
        assert ((draws > 0) & (draws < 1)).all()
        assert abs(draws.mean() - 0.5) < 0.03  # Beta(1,1) mean


class TestRoutingFromRates:
    def test_feasible_matches_solver(self):
        p = routing_from_rates(0.2, np.array([0.45, 0.55]))
        expected = optimal_routing(
            SystemParams(lam=0.2, mu=(0.45, 0.55))).as_array()
        np.testing.assert_allclose(p, expected, atol=1e-12)

    def test_infeasible_returns_none(self):
        assert routing_from_rates(0.5, np.array([0.2, 0.2])) is None

    def test_handles_warm_start_ones(self):
        p = routing_from_rates(0.2, np.array([1.0, 1.0]))
        assert p is not None
        assert abs(p.sum() - 1.0) < 1e-9


def _ctx(t, lam, K, est=None, mu=None, q=None, jobs=0):
    return DispatchContext(t=t, lam=lam, K=K, estimator=est,
                           mu_true=None if mu is None else np.asarray(mu),
                           observed_q=None if q is None else np.asarray(q),
                           jobs_dispatched=jobs)


class TestDecide:
    def test_jsq_unique_argmin(self):
        spec = PolicySpec(kind="jsq", observation="full")
        rng = np.random.default_rng(0)
        ctx = _ctx(5, 0.2, 3, q=[5, 0, 2], mu=[0.1, 0.2, 0.3])
        assert decide(spec, ctx, rng) == 1

    def test_jsq_tie_break_is_random(self):
        spec = PolicySpec(kind="jsq", observation="full")
        rng = np.random.default_rng(1)
        picks = {decide(spec, _ctx(5, 0.2, 3, q=[0, 3, 0],
                                   mu=[0.1, 0.2, 0.3]), rng)
                 for _ in range(200)}
        assert picks == {0, 2}

    def test_jfsq_tie_break_prefers_fast_server(self):
        spec = PolicySpec(kind="jfsq", observation="full")
        rng = np.random.default_rng(2)
        for _ in range(50):
            ctx = _ctx(5, 0.2, 3, q=[0, 3, 0], mu=[0.1, 0.2, 0.3])
            assert decide(spec, ctx, rng) == 2

    def test_pinned_degenerate_distribution(self):
        spec = PolicySpec(kind="pinned", pinned_p=(1.0, 0.0))
        rng = np.random.default_rng(3)
        for _ in range(50):
            assert decide(spec, _ctx(5, 0.2, 2), rng) == 0

    def test_fixed_exploits_after_budget(self):
        spec = PolicySpec(kind="fixed", explore_first=5)
        est = RateEstimator.fresh(2)
        est.n[:] = (100, 100)
        est.total_service[:] = (1000, 100)  # (0.1, 1.0) -> support {1}
        rng = np.random.default_rng(4)
        assert all(
            decide(spec, _ctx(50, 0.2, 2, est=est, jobs=9), rng) == 1
            for _ in range(50))

    def test_uniform_until_sampled_overrides_exploit(self):
        spec = PolicySpec(kind="eps-kt", uniform_until_sampled=True)
        est = RateEstimator.fresh(2)
        est.record_departure(1, 2)  # server 0 still unsampled
        rng = np.random.default_rng(5)
        picks = {decide(spec, _ctx(10**9, 0.2, 2, est=est), rng)
                 for _ in range(100)}
        assert picks == {0, 1}

    def test_information_barrier(self):
        """Learner decisions depend only on the estimator and the rng, never
        on the true rates."""
        for kind in ("eps-klnt", "eps-kt", "ucb", "ts", "uniform"):
            spec = PolicySpec(kind=kind)
            est = RateEstimator.fresh(3)
            est.n[:] = (5, 9, 4)
            est.total_service[:] = (25, 18, 40)
            rng_a = np.random.default_rng(42)
            rng_b = np.random.default_rng(42)
            for t in range(1, 400):
                a = decide(spec, _ctx(t, 0.3, 3, est=est,
                                      mu=[0.2, 0.3, 0.4]), rng_a)
                b = decide(spec, _ctx(t, 0.3, 3, est=est,
                                      mu=[0.7, 0.8, 0.9]), rng_b)
                assert a == b, kind

    def test_genie_dispatch_frequencies(self):
        params = SystemParams(lam=0.2, mu=(0.45, 0.55))
        p_star = optimal_routing(params).as_array()
        spec = PolicySpec(kind="owr")
        rng = np.random.default_rng(6)
        n = 30_000
        counts = np.zeros(2)
        for _ in range(n):
            counts[decide(spec, _ctx(10, 0.2, 2, mu=params.mu), rng)] += 1
        assert stats.chisquare(counts, p_star * n).pvalue > 1e-3

    def test_exploit_with_perfect_estimates_matches_p_star(self):
        params = SystemParams(lam=0.2, mu=(0.45, 0.55))
        p_star = optimal_routing(params).as_array()
        est = RateEstimator.fresh(2)
        est.n[:] = (45, 55)
        est.total_service[:] = (100, 100)  # exact rates
        spec = PolicySpec(kind="eps-klnt")
        ctx = _ctx(10**9, 0.2, 2, est=est)  # eps ~ 0: always exploit
        rng = np.random.default_rng(7)
        np.testing.assert_allclose(
            exploit_distribution(spec, ctx, rng), p_star, atol=1e-9)
        n = 30_000
        counts = np.zeros(2)
        for _ in range(n):
            counts[decide(spec, ctx, rng)] += 1
        assert stats.chisquare(counts, p_star * n).pvalue > 1e-3

    def test_infeasible_estimates_fall_back_to_uniform(self):
        est = RateEstimator.fresh(2)
        est.n[:] = (1, 1)
        est.total_service[:] = (100, 100)  # sum(mu_hat) = 0.02 < lam
        spec = PolicySpec(kind="eps-kt")
        ctx = _ctx(10**9, 0.5, 2, est=est)
        rng = np.random.default_rng(8)
        np.testing.assert_allclose(
            exploit_distribution(spec, ctx, rng), [0.5, 0.5])

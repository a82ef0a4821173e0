"""Dynamic weighting and LR-schedule tests with hand-computed expectations."""

from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuseseg.errors import ConfigError, NumericalError
from fuseseg.weighting import (
    RateHistory,
    WeightState,
    convergence_rate,
    dynamic_weights,
    poly_lr,
    weighting_strategy,
)

rates_st = st.tuples(
    st.floats(0.0, 10.0, allow_nan=False), st.floats(0.0, 10.0, allow_nan=False)
)


class TestDynamicWeights:
    def test_equal_rates_split_evenly(self):
        assert dynamic_weights((1.0, 1.0), (1.0, 1.0)) == pytest.approx((0.5, 0.5), abs=1e-9)

    def test_unit_temperature_hand_value(self):
        lam = dynamic_weights((1.0, 0.0), (1.0, 1.0), temperature=1.0)
        e = math.e
        assert lam[0] == pytest.approx(e / (e + 1.0), abs=1e-6)  # ~0.73106
        assert lam[1] == pytest.approx(1.0 / (e + 1.0), abs=1e-6)  # ~0.26894

    def test_preference_scales_each_weight(self):
        lam = dynamic_weights((1.0, 1.0), (2.0, 1.0), temperature=1.0)
        assert lam == pytest.approx((1.0, 0.5), abs=1e-6)

    def test_stalled_task_gets_more_weight(self):
        slow = dynamic_weights((1.0, 0.5), (1.0, 1.0))
        assert slow[0] > slow[1]
        slower = dynamic_weights((1.2, 0.5), (1.0, 1.0))
        assert slower[0] > slow[0]

    @settings(max_examples=100, deadline=None)
    @given(rates=rates_st)
    def test_unit_preferences_sum_to_one(self, rates):
        lam = dynamic_weights(rates, (1.0, 1.0))
        assert abs(sum(lam) - 1.0) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(rates=rates_st)
    def test_high_temperature_approaches_uniform(self, rates):
        lam = dynamic_weights(rates, (1.0, 1.0), temperature=1e9)
        assert lam == pytest.approx((0.5, 0.5), abs=1e-8)

    def test_extreme_rates_stay_finite(self):
        lam = dynamic_weights((700.0, 0.0), (1.0, 1.0), temperature=0.5)
        assert all(math.isfinite(v) for v in lam)
        assert lam[0] == pytest.approx(1.0, abs=1e-6)

    def test_non_finite_rate_rejected(self):
        with pytest.raises(NumericalError):
            dynamic_weights((float("nan"), 1.0))

    def test_bad_temperature_rejected(self):
        with pytest.raises(ConfigError):
            dynamic_weights((1.0, 1.0), temperature=0.0)


class TestConvergenceRate:
    def test_bootstrap_is_one(self):
        h = RateHistory()
        assert convergence_rate(h, "fusion") == 1.0
        h.record("fusion", 2.0)
        assert convergence_rate(h, "fusion") == 1.0

    def test_ratio_of_last_two(self):
        h = RateHistory()
        h.record("seg", 4.0)
        h.record("seg", 1.0)
        assert convergence_rate(h, "seg") == 0.25
        h.record("seg", 3.0)  # window slides: 3.0 / 1.0
        assert convergence_rate(h, "seg") == 3.0

    def test_vanishing_denominator_raises(self):
        h = RateHistory()
        h.record("fusion", 0.0)
        h.record("fusion", 1.0)
        with pytest.raises(NumericalError):
            convergence_rate(h, "fusion")

    def test_non_finite_mean_rejected_at_record(self):
        with pytest.raises(NumericalError):
            RateHistory().record("seg", float("inf"))

    def test_round_trips_through_lists(self):
        h = RateHistory()
        h.record("fusion", 2.0)
        h.record("fusion", 1.5)
        h.record("seg", 0.9)
        clone = RateHistory.from_lists(h.as_lists())
        assert clone.as_lists() == h.as_lists()


class TestPolyLr:
    def test_endpoints(self):
        assert poly_lr(0, 100, 1e-4, 1e-8) == pytest.approx(1e-4)
        assert poly_lr(100, 100, 1e-4, 1e-8) == pytest.approx(1e-8)

    def test_halfway_hand_value(self):
        got = poly_lr(50, 100, 1e-4, 1e-8, power=0.9)
        assert got == pytest.approx(1e-8 + (1e-4 - 1e-8) * 0.5**0.9, rel=1e-12)
        assert got == pytest.approx(5.3589e-5, rel=1e-4)

    def test_monotone_decay(self):
        vals = [poly_lr(s, 10, 1e-3, 1e-6) for s in range(11)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_step_rejected(self):
        with pytest.raises(ConfigError):
            poly_lr(11, 10, 1e-3, 1e-6)


class TestStrategies:
    def test_uniform_ignores_rates(self):
        s = weighting_strategy("uniform")
        assert s((5.0, 0.1)) == (0.5, 0.5)

    def test_manual_returns_constants(self):
        s = weighting_strategy("manual", manual_lambdas=(0.7, 0.3))
        assert s((9.0, 9.0)) == (0.7, 0.3)

    def test_dwa_equal_rates_give_unit_weights(self):
        s = weighting_strategy("dwa", temperature=2.0)
        assert s((1.0, 1.0)) == pytest.approx((1.0, 1.0), abs=1e-9)

    def test_dwa_sums_to_task_count(self):
        s = weighting_strategy("dwa")
        assert sum(s((1.3, 0.4))) == pytest.approx(2.0, abs=1e-9)

    def test_dynamic_matches_direct_call(self):
        s = weighting_strategy("dynamic", eta_pref=(2.0, 1.0), temperature=1.0)
        assert s((1.0, 1.0)) == dynamic_weights((1.0, 1.0), (2.0, 1.0), 1.0)

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigError):
            weighting_strategy("adaptive")

    def test_weight_state_holds_knobs(self):
        ws = WeightState(lambdas=(0.5, 0.5), eta_pref=(1.0, 1.0), temperature=2.0)
        assert ws.lambdas == (0.5, 0.5)

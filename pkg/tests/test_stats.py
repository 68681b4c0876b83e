from __future__ import annotations

import math

import numpy as np
import pytest

from mbrw.stats import (
    MIN_REPLICAS,
    Comparison,
    Estimate,
    Moments,
    SeriesAccumulator,
    estimate_of,
    exact,
)


class TestEstimate:
    def test_agrees_with_float(self):
        est = Estimate(value=1.0, se=0.1, replicas=100)
        assert est.agrees_with(1.25)
        assert not est.agrees_with(1.5)

    def test_agrees_with_estimate_uses_combined_se(self):
        a = Estimate(value=0.0, se=0.3, replicas=100)
        b = Estimate(value=1.4, se=0.4, replicas=100)
        # combined se 0.5, so 1.4 is inside 3 se
        assert a.agrees_with(b)
        assert not a.agrees_with(b, k=2)

    def test_estimate_of(self):
        est = estimate_of(np.array([1.0, 2.0, 3.0, 4.0]), seed=5)
        assert est.value == 2.5
        assert est.se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
        assert est.seed == 5

    def test_degenerate_samples(self):
        assert estimate_of(np.array([3.0])).se == 0.0
        assert math.isnan(estimate_of(np.array([])).value)


class TestMoments:
    def test_add_matches_estimate_of(self):
        values = np.random.default_rng(0).normal(size=200)
        m = Moments()
        for v in values:
            m.add(float(v))
        est, ref = m.estimate(), estimate_of(values)
        assert est.value == pytest.approx(ref.value)
        assert est.se == pytest.approx(ref.se)
        assert m.maximum == values.max()

    def test_merge_equals_single_pass(self):
        values = np.arange(10, dtype=float)
        left, right, whole = Moments(), Moments(), Moments()
        left.add_many(values[:4])
        right.add_many(values[4:])
        whole.add_many(values)
        merged = left.merge(right)
        assert merged.count == whole.count
        assert merged.mean == pytest.approx(whole.mean)
        assert merged.variance == pytest.approx(whole.variance)
        assert (merged.minimum, merged.maximum) == (0.0, 9.0)

    def test_empty(self):
        m = Moments()
        m.add_many(np.array([]))
        assert m.count == 0
        assert math.isnan(m.mean)
        assert m.variance == 0.0


def test_series_accumulator_orders_keys():
    acc = SeriesAccumulator()
    acc.add((2, "W"), 1.0)
    acc.add((1, "W"), 3.0)
    acc.add((1, "W"), 5.0)
    estimates = acc.estimates()
    assert list(estimates) == [(1, "W"), (2, "W")]
    assert estimates[(1, "W")].value == 4.0


class TestComparison:
    def test_small_samples_are_inconclusive(self):
        small = Estimate(value=1.0, se=0.1, replicas=MIN_REPLICAS - 1)
        assert Comparison("x", small, exact(5.0)).status == "inconclusive"

    def test_exact_against_sampled(self):
        sampled = Estimate(value=1.0, se=0.1, replicas=100)
        assert Comparison("x", sampled, exact(1.2)).status == "pass"
        assert Comparison("x", sampled, exact(1.5)).status == "fail"

    def test_slack_widens_the_band(self):
        sampled = Estimate(value=1.0, se=0.1, replicas=100)
        assert Comparison("x", sampled, exact(1.5), slack=0.25).passed

    def test_exact_pair(self):
        assert Comparison("x", exact(2.0), exact(2.0)).passed
        assert not Comparison("x", exact(2.0), exact(2.5)).passed

    def test_non_finite_is_inconclusive(self):
        sampled = Estimate(value=math.nan, se=0.1, replicas=100)
        assert Comparison("x", sampled, exact(1.0)).status == "inconclusive"

    def test_to_dict(self):
        doc = Comparison("mean", exact(1.0), exact(1.0)).to_dict()
        assert doc == {
            "statistic": "mean",
            "lhs": 1.0,
            "rhs": 1.0,
            "se": 0.0,
            "pass": True,
            "status": "pass",
        }

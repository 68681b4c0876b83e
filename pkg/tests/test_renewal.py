from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from mbrw.errors import (
    ConfigError,
    HorizonError,
    InsufficientSampleError,
    InvariantViolation,
)
from mbrw.model import model_hash
from mbrw.renewal import (
    EXP_DECAY,
    ZERO,
    GreenWeight,
    SandwichReport,
    SpitzerReport,
    StoppingTimes,
    UniformBoundReport,
    VAlphaTable,
    Window,
    additivity_check,
    ascending_ladder_epochs,
    check_green_weight,
    cllt_slope_check,
    descending_ladder_epochs,
    duality_involution,
    duality_sandwich,
    estimate_V,
    exit_probability_profile,
    green_functional,
    ladder_consistency,
    renewal_measure,
    renewal_scan,
    reversed_bound_check,
    running_minimum,
    spitzer_bound_check,
    tau_minus,
    tau_plus,
    uniform_bound_check,
    walk,
    walk_matrix,
)
from mbrw.spectral import DirectionGrid

X0 = np.array([0.5, 0.5])


class TestStoppingTimes:
    def test_tau_minus(self):
        S = np.array([0.0, 1.0, -0.5, 2.0])
        assert tau_minus(S, 0.0)[0] == 2
        # Never below -1: reported as the path length.
        assert tau_minus(S, 1.0)[0] == 4

    def test_tau_plus(self):
        S = np.array([0.0, -1.0, 0.5])
        assert tau_plus(S, 0.0)[0] == 2
        assert tau_plus(S, 1.0)[0] == 3

    def test_ladder_epochs(self):
        np.testing.assert_array_equal(
            ascending_ladder_epochs(np.array([0.0, 1.0, 0.5, 1.0, 2.0])), [0, 1, 3, 4]
        )
        np.testing.assert_array_equal(
            descending_ladder_epochs(np.array([0.0, -1.0, -0.5, -2.0])), [0, 1, 3]
        )

    def test_bundle(self):
        times = StoppingTimes.of(np.array([0.0, 2.0, -1.0, 3.0]))
        assert times.tau_minus == 2
        assert times.tau_plus == 1
        np.testing.assert_array_equal(times.L, running_minimum(np.array([0.0, 2.0, -1.0, 3.0])))

    def test_ladder_heights_on_simulated_walks(self, mixed_boundary):
        spec, boundary = mixed_boundary
        rng = np.random.default_rng(0)
        primal = walk(spec, boundary, "primal", X0, 0.0, 200, rng)
        dual = walk(spec, boundary, "dual", X0, 0.0, 200, rng)
        ladder_consistency(primal.S, dual.S)
        assert primal.steps == 200

    def test_unknown_measure(self, mixed_boundary):
        spec, boundary = mixed_boundary
        with pytest.raises(ConfigError, match="unknown walk measure"):
            walk_matrix(spec, boundary, "sideways", X0, 5, 2, np.random.default_rng(0))


class TestDuality:
    def test_reversed_paths_stay_within_window(self, mixed):
        report = reversed_bound_check(mixed, 60, 40, np.random.default_rng(1))
        assert report.passed
        assert report.max_gap <= mixed.fk().window + 1e-9

    def test_dual_of_dual_is_primal(self, mixed_boundary):
        spec, boundary = mixed_boundary
        assert duality_involution(spec, boundary) <= 1e-12

    def test_involution_detects_wrong_primal_eigenvector(self, mixed_boundary):
        spec, boundary = mixed_boundary
        nodes = boundary.grid.nodes
        bent = dataclasses.replace(
            boundary.spectral, r=boundary.spectral.r * (1.0 + 0.05 * nodes[:, 0])
        )
        with pytest.raises(InvariantViolation, match="dual of dual"):
            duality_involution(spec, dataclasses.replace(boundary, spectral=bent))

    def test_sandwich_doubling_stability(self):
        def report(base: float, doubled: float, replicas: int = 100) -> SandwichReport:
            return SandwichReport(
                ts=(1.0,), killed=(1.0,), dual=(2.0,), C_base=base, C_doubled=doubled,
                replicas=replicas,
            )

        assert report(0.5, 0.55).passed
        assert report(0.5, 1.0).status == "fail"
        assert report(0.5, math.inf).status == "fail"
        assert report(0.5, 0.5, replicas=10).status == "inconclusive"
        assert report(0.5, 0.55).to_dict()["C_hat"] == 0.55

    def test_sandwich_on_collinear_walk(self, collinear_boundary):
        # For i.i.d. steps the killed walk from 0 and the weak ladder walk
        # have the same per-step window masses, so C stays below 1.
        spec, boundary = collinear_boundary
        report = duality_sandwich(
            spec, boundary, (0.5, 1.0, 1.5), 1.0, replicas=2000, horizon=400, seed=21
        )
        assert report.ts == (0.5, 1.0, 1.5)
        assert report.passed
        assert 0.0 < report.C_base <= report.C_doubled
        assert report.C_hat <= 1.1


class TestVAlphaTable:
    @staticmethod
    def _table(values=None) -> VAlphaTable:
        grid = DirectionGrid.build(2, 4)
        y = np.array([0.0, 1.0, 2.0])
        if values is None:
            values = np.tile(y + 1.0, (grid.n_nodes, 1))
        return VAlphaTable(grid=grid, y_grid=y, values=values, certified_error=0.01)

    def test_lookup(self):
        table = self._table()
        pts = np.tile(X0, (3, 1))
        np.testing.assert_allclose(table.value(pts, np.array([-1.0, 0.5, 5.0])), [0.0, 1.5, 6.0])

    def test_rejects_bad_y_grid(self):
        with pytest.raises(ConfigError, match="start at 0"):
            VAlphaTable(
                grid=DirectionGrid.build(2, 4),
                y_grid=np.array([1.0, 2.0]),
                values=np.zeros((4, 2)),
                certified_error=0.0,
            )

    def test_rejects_bad_shape(self):
        with pytest.raises(ConfigError, match="shape"):
            self._table(values=np.zeros((3, 3)))

    def test_monotonicity_gap(self):
        assert self._table().monotonicity_gap() == 0.0
        values = np.tile([1.0, 0.5, 2.0], (4, 1))
        assert self._table(values).monotonicity_gap() == pytest.approx(0.5)

    def test_roundtrip(self):
        table = self._table()
        again = VAlphaTable.from_dict(table.to_dict())
        np.testing.assert_array_equal(again.values, table.values)
        assert again.certified_error == table.certified_error

    def test_estimate_on_collinear_model(self, collinear_boundary):
        spec, boundary = collinear_boundary
        table = estimate_V(
            spec, boundary, [0.0, 1.0, 2.0], 100, seed=2, n_schedule=(16, 64), grid_size=2
        )
        assert table.model_hash == model_hash(spec)
        assert np.all(table.values[:, 0] > 0)
        assert table.certified_error >= table.harmonicity_residual
        assert table.n_schedule == (16, 64)

    def test_schedule_needs_two_horizons(self, collinear_boundary):
        spec, boundary = collinear_boundary
        with pytest.raises(ConfigError, match="two horizons"):
            estimate_V(spec, boundary, [0.0, 1.0], 10, seed=0, n_schedule=(64,))


class TestRenewal:
    def test_start_counts_as_a_visit(self, mixed_boundary):
        spec, boundary = mixed_boundary
        for variant in ("killed_primal", "ladder_dual_plus", "ladder_primal_T"):
            est = renewal_measure(
                spec, boundary, variant, 0.0, 1.0, 100, 40, seed=3, tail_fraction=None
            )
            assert est.estimate.value >= 1.0
            assert est.to_dict()["variant"] == variant

    def test_short_horizon_raises(self, mixed_boundary):
        spec, boundary = mixed_boundary
        with pytest.raises(HorizonError) as exc:
            renewal_measure(spec, boundary, "killed_primal", 0.0, 1.0, 100, 5, seed=4)
        assert exc.value.suggested > 5

    def test_scan_shares_paths(self, mixed_boundary):
        spec, boundary = mixed_boundary
        windows = [(float(t), 1.0) for t in range(-3, 4)]
        scan = renewal_scan(
            spec, boundary, "killed_primal", windows, 100, 50, seed=5, tail_fraction=None
        )
        assert [e.t for e in scan] == [t for t, _ in windows]
        # The killed walk never visits below -y.
        assert all(e.estimate.value == 0.0 for e in scan if e.t + e.a < 0)

    def test_bad_inputs(self, mixed_boundary):
        spec, boundary = mixed_boundary
        with pytest.raises(ConfigError, match="nonnegative"):
            renewal_measure(spec, boundary, "killed_primal", 0.0, -1.0, 10, 10, seed=0)
        with pytest.raises(ConfigError, match="unknown renewal variant"):
            renewal_measure(spec, boundary, "ladder", 0.0, 1.0, 10, 10, seed=0)

    def test_additivity(self, mixed_boundary):
        spec, boundary = mixed_boundary
        cmp = additivity_check(spec, boundary, "killed_primal", 0.5, 1.0, 300, 100, seed=6)
        assert cmp.status == "pass"

    def test_uniform_bound_stability(self):
        assert UniformBoundReport(y=0, a=1, C_base=2.0, C_doubled=2.2).stable
        assert not UniformBoundReport(y=0, a=1, C_base=2.0, C_doubled=4.0).stable
        assert UniformBoundReport(y=0, a=1, C_base=0.0, C_doubled=0.0).stable

    def test_uniform_bound_on_collinear_walk(self, collinear_boundary):
        spec, boundary = collinear_boundary
        report, scan = uniform_bound_check(
            spec, boundary, replicas=1000, horizon=400, seed=22, t_range=(-2, 4)
        )
        assert [e.t for e in scan] == [float(t) for t in range(-4, 9)]
        assert report.stable
        assert report.to_dict()["pass"]
        assert 0.0 < report.C_base <= report.C_doubled
        assert all(e.estimate.value == 0.0 for e in scan if e.t + e.a < 0)

    def test_ladder_renewal_density(self, spread_boundary):
        spec, boundary = spread_boundary
        paths = walk_matrix(spec, boundary, "dual", X0, 2000, 2000, np.random.default_rng(31))
        first = tau_plus(paths, 0.0)
        reached = np.flatnonzero(first < paths.shape[1])
        mean_height = float(paths[reached, first[reached]].mean())
        est = renewal_measure(
            spec, boundary, "ladder_dual_plus", 2.0, 2.0, 1000, 10_000, seed=32,
            tail_fraction=None,
        )
        assert est.estimate.value / 2.0 == pytest.approx(1.0 / mean_height, rel=0.15)


class TestGreenFunctional:
    def test_weights_validated(self):
        check_green_weight(EXP_DECAY)
        with pytest.raises(ConfigError, match="nonincreasing"):
            check_green_weight(GreenWeight("linear", lambda y: y))

    def test_zero_weight(self, mixed_boundary):
        spec, boundary = mixed_boundary
        profile = green_functional(spec, boundary, ZERO, [1.0, 2.0], 20, 50, seed=7)
        assert [e.value for e in profile.values] == [0.0, 0.0]

    def test_levels_must_be_positive(self, mixed_boundary):
        spec, boundary = mixed_boundary
        with pytest.raises(ConfigError, match="positive"):
            green_functional(spec, boundary, EXP_DECAY, [0.0, 1.0], 20, 50, seed=7)

    def test_profile_shape(self, mixed_boundary):
        spec, boundary = mixed_boundary
        profile = green_functional(spec, boundary, EXP_DECAY, [1.0, 4.0, 16.0], 100, 200, seed=8)
        assert profile.to_dict()["statistic"] == "green_functional[exp]"
        assert len(profile.tail_bound) == 3
        assert all(e.value > 0 for e in profile.values)


class TestSpitzer:
    def test_window_widening(self):
        w = Window(0.0, 1.0).widened(0.5)
        assert (w.lo, w.hi) == (-0.5, 1.5)
        np.testing.assert_array_equal(w(np.array([-1.0, 0.0, 2.0])), [0.0, 1.0, 0.0])

    def test_stable_ratios_pass(self):
        report = SpitzerReport(lhs=(1.0, 2.0), dual_factor=(1.0, 1.0), primal_factor=(1.0, 1.0))
        assert report.ratios == (1.0, 2.0)
        assert report.C_hat == 2.0
        assert report.passed

    def test_unstable_or_infinite_ratios_fail(self):
        assert not SpitzerReport(
            lhs=(1.0, 20.0), dual_factor=(1.0, 1.0), primal_factor=(1.0, 1.0)
        ).passed
        assert not SpitzerReport(lhs=(1.0,), dual_factor=(0.0,), primal_factor=(1.0,)).passed

    def test_empty_lhs_is_not_a_failure(self):
        report = SpitzerReport(lhs=(0.0,), dual_factor=(0.0,), primal_factor=(1.0,))
        assert report.ratios == (0.0,)
        assert report.passed

    def test_product_bound_on_collinear_walk(self, collinear_boundary):
        spec, boundary = collinear_boundary
        batteries = (
            (Window(-1.0, 0.0), Window(0.0, 1.0)),
            (Window(-2.5, -1.5), Window(1.5, 2.5)),
            (Window(-4.0, -3.0), Window(3.0, 4.0)),
        )
        report = spitzer_bound_check(
            spec, boundary, horizon=2000, replicas=400, seed=23, batteries=batteries
        )
        assert all(v > 0 for v in report.lhs)
        assert all(math.isfinite(r) and r > 0 for r in report.ratios)
        assert report.passed
        assert report.to_dict()["C_hat"] == report.C_hat


class TestConditionedLocalLimit:
    def test_too_few_survivors(self, mixed_boundary):
        spec, boundary = mixed_boundary
        with pytest.raises(InsufficientSampleError) as exc:
            cllt_slope_check(spec, boundary, 0.0, 1.0, 20, (10, 20), seed=9)
        assert exc.value.observed < 30


    def test_depths_without_hits_are_dropped(self, collinear_boundary):
        # One step up overshoots 0.8 and one step down is killed, so n = 1 never hits.
        spec, boundary = collinear_boundary
        report = cllt_slope_check(spec, boundary, 0.0, 0.8, 2000, (1, 2, 4), seed=41)
        assert report.probabilities[0].value == 0.0
        assert report.probabilities[2].value > 0.0
        assert math.isfinite(report.slope)

    def test_single_informative_depth_raises(self, collinear_boundary):
        spec, boundary = collinear_boundary
        with pytest.raises(InsufficientSampleError, match="depths") as exc:
            cllt_slope_check(spec, boundary, 0.0, 0.8, 2000, (1, 2), seed=41)
        assert exc.value.observed == 1

    def test_local_probability_decays_like_n_to_minus_three_halves(self, spread_boundary):
        spec, boundary = spread_boundary
        report = cllt_slope_check(
            spec, boundary, 1.0, 2.0, 80_000, (100, 141, 200, 283, 400), seed=42
        )
        assert report.slope == pytest.approx(-1.5, abs=0.25)
        assert all(p.value > 0 for p in report.probabilities)
        assert math.isfinite(report.exit_bound)

    def test_exit_probability_plateau(self, collinear_boundary):
        # V(1) is 1 plus the mean undershoot below -1, which lies in (0, 0.1352].
        spec, boundary = collinear_boundary
        grid = DirectionGrid.build(2, 4)
        y = np.array([0.0, 1.0, 2.0])
        table = VAlphaTable(
            grid=grid,
            y_grid=y,
            values=np.tile(y + 0.07, (grid.n_nodes, 1)),
            certified_error=0.07,
        )
        profile = exit_probability_profile(
            spec, boundary, table, X0, 1.0, (400, 100), replicas=4000, seed=43
        )
        assert profile.n_list == (100, 400)
        norm = 2.0 / (math.sqrt(boundary.sigma2) * math.sqrt(2 * math.pi))
        assert profile.target == pytest.approx(norm * 1.07)
        assert profile.passed
        assert profile.to_dict()["pass"]

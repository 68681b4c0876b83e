from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from mbrw.branching import MartingaleSeries
from mbrw.errors import ArtifactError, ConfigError
from mbrw.experiments import (
    DEFAULT_DEPTHS,
    ExperimentConfig,
    ExperimentReport,
    check,
    derivative_convergence_experiment,
    minimum_drift_check,
    run_experiment,
    seneta_heyde_experiment,
    smoothing_fixed_point_check,
    verdict_of,
)
from mbrw.model import OffspringLaw
from mbrw.renewal import VAlphaTable
from mbrw.runner import ReplicaPool
from mbrw.spectral import DirectionGrid
from tests.conftest import FIXTURES, collinear_model


class TestExperimentConfig:
    def test_defaults_fill_depths(self):
        assert ExperimentConfig("derivative").depths == DEFAULT_DEPTHS["derivative"]

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError, match="unknown experiment"):
            ExperimentConfig("fourier")

    def test_load_fixture(self):
        config = ExperimentConfig.load(FIXTURES / "experiment_biggins.json", "biggins")
        assert config.depths == (4, 6, 8)
        assert config.s_values == (0.5, "alpha")
        assert config.replicas == 200

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="depth_list"):
            ExperimentConfig.from_dict({"name": "biggins", "depth_list": [1]})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactError):
            ExperimentConfig.load(tmp_path / "absent.json", "biggins")

    def test_to_dict_roundtrip(self):
        config = ExperimentConfig("smoothing", replicas=12)
        again = ExperimentConfig.from_dict(config.to_dict())
        assert again == config


class TestValidate:
    def test_depths_must_increase(self, mixed):
        config = ExperimentConfig("biggins", depths=(4, 2), s_values=(0.5,))
        with pytest.raises(ConfigError, match="strictly increasing"):
            config.validate(mixed)

    def test_subcritical_rejected(self):
        spec = collinear_model(offspring=OffspringLaw.deterministic(1))
        with pytest.raises(ConfigError, match="A3"):
            ExperimentConfig("biggins", s_values=(0.5,)).validate(spec)

    def test_population_cap(self, mixed):
        config = ExperimentConfig("biggins", depths=(40,), s_values=(0.5,))
        with pytest.raises(ConfigError, match="particle cap"):
            config.validate(mixed)

    def test_derivative_checks_cauchy_depth(self, mixed):
        config = ExperimentConfig("derivative", depths=(4,), cauchy_pair=(4, 12))
        with pytest.raises(ConfigError, match="particle cap"):
            config.validate(mixed, particle_cap=10_000)

    def test_biggins_needs_s_values(self, mixed):
        with pytest.raises(ConfigError, match="s_values"):
            ExperimentConfig("biggins", depths=(4,)).validate(mixed)

    def test_biggins_needs_alpha(self, collinear_boundary):
        spec, boundary = collinear_boundary
        config = ExperimentConfig("biggins", depths=(4,), s_values=(0.5, 1.0))
        with pytest.raises(ConfigError, match="include alpha"):
            config.validate(spec, boundary=boundary)

    def test_biggins_needs_a_regular_parameter(self, collinear_boundary):
        spec, boundary = collinear_boundary
        above = boundary.alpha + 1.0
        config = ExperimentConfig("biggins", depths=(4,), s_values=("alpha", above))
        with pytest.raises(ConfigError, match="regular"):
            config.validate(spec, boundary=boundary)

    def test_alpha_token_resolves(self, collinear_boundary):
        spec, boundary = collinear_boundary
        config = ExperimentConfig("biggins", depths=(4,), s_values=(0.5, "alpha"))
        config.validate(spec, boundary=boundary)
        assert config.resolved_s(boundary) == (0.5, boundary.alpha)

    def test_unknown_s_token(self):
        with pytest.raises(ConfigError, match="'beta'"):
            ExperimentConfig("biggins", s_values=(0.5, "beta"))

    def test_x0_dimension(self, mixed):
        config = ExperimentConfig("biggins", depths=(4,), s_values=(0.5,), x0=(0.2, 0.3, 0.5))
        with pytest.raises(ConfigError, match="x0"):
            config.validate(mixed)


class TestVerdict:
    def test_fail_dominates(self):
        checks = [check("a", "pass"), check("b", "inconclusive"), check("c", "fail")]
        assert verdict_of(checks) == "fail"

    def test_inconclusive_without_failures(self):
        assert verdict_of([check("a", "pass"), check("b", "inconclusive")]) == "inconclusive"
        assert verdict_of([]) == "inconclusive"

    def test_all_pass(self):
        assert verdict_of([check("a", "pass")]) == "pass"

    def test_report_text(self):
        report = ExperimentReport("biggins", checks=[check("mean", "pass")], notes=["pruned"])
        assert report.text() == "biggins: pass\n  [pass] mean\n  note: pruned\n"
        report.row("mean", 4, "W(0.5)", 1.0, 0.1)
        assert report.to_dict()["tiers"]["mean"][0]["n"] == 4


def test_biggins_run_is_deterministic(mixed_boundary):
    spec, boundary = mixed_boundary
    config = ExperimentConfig.load(FIXTURES / "experiment_biggins.json", "biggins")
    config = dataclasses.replace(config, replicas=40)
    with ReplicaPool() as pool:
        first = run_experiment(config, spec, boundary, pool)
        second = run_experiment(config, spec, boundary, pool)
    assert first.to_dict() == second.to_dict()
    assert [r["n"] for r in first.tiers["mean"]] == [4, 6, 8, 4, 6, 8]
    assert first.provenance["seed"] == 7
    assert first.verdict in {"pass", "fail", "inconclusive"}


class TestMinimumDrift:
    @staticmethod
    def _series(mins: list[float], pops: list[int], replica: int) -> MartingaleSeries:
        return MartingaleSeries(replica=replica, population=pops, min_position=mins)

    def test_rising_minimum_passes(self):
        series = [self._series([0.0, 0.5, 1.0, 1.5, 2.0], [1, 2, 4, 8, 16], i) for i in range(40)]
        result = minimum_drift_check(series, 4)
        assert result["status"] == "pass"
        assert result["fraction"] == 1.0

    def test_falling_minimum_fails(self):
        series = [self._series([0.0, -1.0, -2.0, -3.0, -4.0], [1, 2, 4, 8, 16], i) for i in range(40)]
        assert minimum_drift_check(series, 4)["status"] == "fail"

    def test_few_survivors_inconclusive(self):
        series = [self._series([0.0, 1.0, 2.0], [1, 1, 0], i) for i in range(40)]
        result = minimum_drift_check(series, 2)
        assert result["status"] == "inconclusive"
        assert result["survivors"] == 0


class TestExperimentRuns:
    """Small runs on the collinear model, where r = 1, ell = 0 and E N = 2."""

    def test_derivative_tiers(self, collinear_boundary):
        spec, boundary = collinear_boundary
        config = ExperimentConfig(
            "derivative", depths=(2, 4), cauchy_pair=(1, 2), replicas=200, seed=11
        )
        with ReplicaPool() as pool:
            report = derivative_convergence_experiment(config, spec, boundary, pool)
        assert [r["n"] for r in report.tiers["mean"]] == [2, 4]
        assert [r["n"] for r in report.tiers["cauchy"]] == [1, 2]
        names = [c["statistic"] for c in report.checks]
        assert names == [
            "mean D_n at n=2",
            "mean D_n at n=4",
            "cauchy decay 1->2",
            "D positive at n=4",
            "minimum_drift(n=4)",
        ]
        # E D_n = D_0 = r(x0) ell(x0), which vanishes for collinear atoms.
        last = report.checks[1]
        assert last["rhs"] == pytest.approx(0.0, abs=1e-6)
        assert abs(last["lhs"] - last["rhs"]) <= 4 * last["se"]
        assert report.verdict == verdict_of(report.checks)
        assert report.to_dict()["verdict"] == report.verdict

    def test_seneta_heyde_tiers(self, collinear_boundary):
        spec, boundary = collinear_boundary
        grid = DirectionGrid.build(2, 4)
        y = np.array([0.0, 1.0, 2.0])
        table = VAlphaTable(
            grid=grid, y_grid=y, values=np.tile(y + 0.07, (grid.n_nodes, 1)), certified_error=0.07
        )
        config = ExperimentConfig(
            "seneta-heyde", depths=(2, 4, 6), b_values=(0.0, 1.0), replicas=100, seed=12
        )
        with ReplicaPool() as pool:
            report = seneta_heyde_experiment(config, spec, boundary, pool, table=table)
        assert [r["n"] for r in report.tiers["expectation"]] == [2, 4, 6, 2, 4, 6]
        assert [r["n"] for r in report.tiers["ratio"]] == [2, 4, 6]
        assert [r["n"] for r in report.tiers["trend"]] == [2, 4, 6]
        by_name = {c["statistic"]: c for c in report.checks}
        x0 = np.array([[0.5, 0.5]])
        r_x = float(boundary.r_at(x0)[0])
        norm = 2.0 / (math.sqrt(boundary.sigma2) * math.sqrt(2 * math.pi))
        expected = norm * math.exp(-boundary.alpha) * r_x * 1.07
        assert by_name["expectation tier b=1 n=6"]["rhs"] == pytest.approx(expected)
        assert by_name["expectation tier b=0 n=2"]["rhs"] == pytest.approx(norm * r_x * 0.07)
        assert {"ratio tier", "trend tier"} <= set(by_name)
        assert report.notes
        assert report.verdict == verdict_of(report.checks)

    def test_smoothing_tiers(self, collinear_boundary):
        spec, boundary = collinear_boundary
        config = ExperimentConfig(
            "smoothing", depths=(4,), r_points=(0.5, 1.0), replicas=100, seed=13
        )
        with ReplicaPool() as pool:
            report = smoothing_fixed_point_check(config, spec, boundary, pool)
        rows = report.tiers["laplace"]
        assert [r["statistic"] for r in rows] == [
            "lhs(r=0.5)", "rhs(r=0.5)", "lhs(r=1)", "rhs(r=1)"
        ]
        assert all(r["n"] == 0 and r["value"] > 0.0 for r in rows)
        by_name = {c["statistic"]: c for c in report.checks}
        # Two children every generation: the trees never die out.
        for side in ("lhs", "rhs"):
            mass = by_name[f"extinction mass ({side})"]
            assert mass["rhs"] == 0.0
            assert mass["status"] == "pass"
        assert {"laplace r=0.5", "laplace r=1"} <= set(by_name)
        assert report.verdict == verdict_of(report.checks)

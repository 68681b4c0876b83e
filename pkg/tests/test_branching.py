from __future__ import annotations

import math

import numpy as np
import pytest

from mbrw.branching import (
    MartingaleRequest,
    Pruning,
    additive_martingale,
    derivative_martingale,
    exact_path_sum,
    killed_martingale,
    root_snapshot,
    simulate_martingales,
    simulate_tree,
    step_generation,
    summarize,
    truncated_martingales,
    verify_exchangeability,
)
from mbrw.errors import ConfigError, PopulationCapError
from mbrw.model import OffspringLaw
from mbrw.renewal import estimate_V
from mbrw.seeds import replica_rng
from mbrw.spectral import DirectionGrid, dominant_eigen
from mbrw.spine import HarmonicEvaluator
from mbrw.stats import Comparison, estimate_of, exact
from tests.conftest import collinear_model

X0 = np.array([0.5, 0.5])


class TestSimulateTree:
    def test_deterministic_population(self, collinear):
        gens = list(simulate_tree(collinear, X0, 0.0, 5, np.random.default_rng(0)))
        assert [g.population for g in gens] == [1, 2, 4, 8, 16, 32]

    def test_positions_follow_cocycles(self, collinear):
        gens = list(simulate_tree(collinear, X0, 1.5, 2, np.random.default_rng(1)))
        for prev, cur in zip(gens, gens[1:], strict=False):
            steps = prev.S[cur.parent] - cur.S
            # sigma(c_j * HALF, x) = log c_j in {0, 1}
            assert set(np.round(steps, 12)) <= {0.0, 1.0}
            np.testing.assert_array_equal(np.isclose(steps, 1.0), cur.atom == 1)

    def test_min_prefix_tracks_ancestral_minimum(self, mixed):
        gens = list(simulate_tree(mixed, X0, 0.0, 4, np.random.default_rng(2)))
        for prev, cur in zip(gens, gens[1:], strict=False):
            expected = np.minimum(prev.min_prefix[cur.parent], cur.S)
            np.testing.assert_array_equal(cur.min_prefix, expected)

    def test_suffix_minimum_is_infinite_before_k(self, mixed):
        gens = list(
            simulate_tree(mixed, X0, 0.0, 4, np.random.default_rng(3), suffix_from=(2,))
        )
        assert np.all(np.isinf(gens[1].min_suffix[2]))
        np.testing.assert_array_equal(gens[2].min_suffix[2], gens[2].S)
        assert np.all(gens[4].min_suffix[2] >= gens[4].min_prefix)

    def test_labels_are_ulam_harris(self, collinear):
        gens = list(
            simulate_tree(collinear, X0, 0.0, 2, np.random.default_rng(4), track_labels=True)
        )
        assert gens[2].labels == [(1, 1), (1, 2), (2, 1), (2, 2)]
        assert gens[2].particle(3).label == (2, 2)

    def test_extinct_tree_keeps_yielding(self):
        spec = collinear_model(offspring=OffspringLaw.finite([(0, 0.9), (2, 0.1)]))
        gens = list(simulate_tree(spec, X0, 0.0, 30, np.random.default_rng(5)))
        assert len(gens) == 31
        assert not gens[-1].survived
        assert gens[-1].min_position == math.inf

    def test_population_cap(self, collinear):
        with pytest.raises(PopulationCapError) as exc:
            list(simulate_tree(collinear, X0, 0.0, 10, np.random.default_rng(6), particle_cap=100))
        assert exc.value.generation == 7

    def test_negative_depth(self, collinear):
        with pytest.raises(ConfigError):
            list(simulate_tree(collinear, X0, 0.0, -1, np.random.default_rng(0)))

    def test_pruning_records_dropped_mass(self, collinear):
        snap = root_snapshot(X0, 1.0, 2)
        rng = np.random.default_rng(7)
        for _ in range(6):
            snap = step_generation(collinear, snap, rng, pruning=Pruning(alpha=3.0, eps=0.5))
        assert snap.pruned_bound > 0
        assert np.all(np.exp(-3.0 * snap.S) * (1 + np.maximum(snap.S, 0)) >= 0.5)


class TestFunctionals:
    def test_additive_martingale_has_constant_mean(self, mixed):
        data = dominant_eigen(mixed, 0.5, DirectionGrid.build(2, 128))
        values = []
        for rep in range(400):
            *_, last = simulate_tree(mixed, X0, 0.0, 3, replica_rng(11, rep))
            values.append(additive_martingale(last, data))
        est = estimate_of(np.array(values))
        assert est.agrees_with(float(data.r_at(X0.reshape(1, -1))[0]), k=4)

    def test_derivative_martingale_at_root(self, mixed_boundary):
        spec, boundary = mixed_boundary
        root = root_snapshot(X0, 2.0, 2)
        x = X0.reshape(1, -1)
        weight = math.exp(-2.0 * boundary.alpha) * boundary.r_at(x)[0]
        expected = (2.0 + boundary.ell_at(x)[0]) * weight
        assert derivative_martingale(root, boundary) == pytest.approx(expected)

    def test_killed_drops_paths_below_zero(self, collinear_boundary):
        spec, boundary = collinear_boundary
        gens = list(simulate_tree(spec, X0, 0.0, 3, np.random.default_rng(8), suffix_from=(1,)))
        killed, from_one = truncated_martingales(gens[-1], boundary, 1)
        assert killed == pytest.approx(killed_martingale(gens[-1], boundary))
        assert killed <= from_one + 1e-12

    def test_untracked_suffix(self, collinear_boundary):
        spec, boundary = collinear_boundary
        *_, last = simulate_tree(spec, X0, 0.0, 2, np.random.default_rng(9))
        with pytest.raises(ConfigError, match="not tracked"):
            truncated_martingales(last, boundary, 1)


class TestMartingaleSeries:
    def test_series_is_reproducible(self, mixed_boundary):
        spec, boundary = mixed_boundary
        request = MartingaleRequest(boundary=boundary, suffix_from=(2,))
        a = simulate_martingales(3, spec, X0, 0.0, 4, request, seed=99)
        b = simulate_martingales(3, spec, X0, 0.0, 4, request, seed=99)
        assert a.values == b.values
        assert sorted(a.values) == sorted(request.names())
        assert len(a.population) == 5

    def test_rows_are_generation_major(self, mixed_boundary):
        spec, boundary = mixed_boundary
        series = simulate_martingales(
            0, spec, X0, 0.0, 2, MartingaleRequest(boundary=boundary), seed=1
        )
        rows = list(series.rows())
        assert [r[1] for r in rows] == sorted(r[1] for r in rows)
        assert rows[0][2] == "D"

    def test_summarize(self, mixed_boundary):
        spec, boundary = mixed_boundary
        request = MartingaleRequest(boundary=boundary)
        series = [simulate_martingales(i, spec, X0, 0.0, 3, request, seed=5) for i in range(40)]
        summary = summarize(series, seed=5)
        assert len(summary["W_alpha"]) == 4
        assert summary["W_alpha"][0]["se"] == 0.0


class TestHarmonicMartingale:
    def test_constant_one_is_the_additive_martingale_at_alpha(self, mixed_boundary):
        spec, boundary = mixed_boundary
        request = MartingaleRequest(
            boundary=boundary, evaluator=HarmonicEvaluator.constant_one(boundary)
        )
        series = simulate_martingales(2, spec, X0, 0.5, 3, request, seed=4)
        np.testing.assert_allclose(series.values["M_h"], series.values["W_alpha"], rtol=1e-6)

    def test_v_martingale_keeps_its_mean(self, mixed_boundary):
        spec, boundary = mixed_boundary
        table = estimate_V(
            spec, boundary, np.linspace(0.0, 4.0, 9), 200, seed=12, n_schedule=(16, 64)
        )
        evaluator = HarmonicEvaluator.v_alpha_beta(boundary, table)
        request = MartingaleRequest(evaluator=evaluator)
        b0 = 1.0
        series = [simulate_martingales(i, spec, X0, b0, 4, request, seed=13) for i in range(400)]
        M = np.array([s.values["M_h"] for s in series])
        start = evaluator.H_point(X0, b0)
        np.testing.assert_allclose(M[:, 0], start)
        # Each generation can drift by the table error times E sum r e^{-alpha S}.
        weight = float(boundary.r_at(X0.reshape(1, -1))[0]) * math.exp(-boundary.alpha * b0)
        for n in range(1, 5):
            comp = Comparison(
                f"M_h at n={n}",
                estimate_of(M[:, n]),
                exact(start),
                k=4.0,
                slack=n * table.certified_error * weight,
            )
            assert comp.passed, comp.to_dict()


class TestExchangeability:
    def test_exact_sum_for_collinear_model(self, collinear):
        # sum over words of prod E N q_j with f = 1 is (E N)^n
        assert exact_path_sum(collinear, 3, lambda mats: 1.0) == pytest.approx(8.0)

    def test_forward_and_reversed_agree(self, mixed):
        report = verify_exchangeability(mixed, X0, 2, 300, seed=17)
        assert report.passed
        assert report.to_dict()["statistic"] == "exchangeability(n=2)"

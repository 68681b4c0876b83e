"""End-to-end statistical experiments on calibrated models.

Each experiment simulates replica trees through a ReplicaPool, reduces them
to per-depth statistics and turns those into checks.  A check status is one
of pass/fail/inconclusive and the report verdict is a pure function of the
check statuses.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from mbrw import cone
from mbrw.branching import (
    DEFAULT_PARTICLE_CAP,
    MartingaleRequest,
    MartingaleSeries,
    Pruning,
    derivative_martingale,
    root_snapshot,
    simulate_martingales,
    simulate_tree,
    step_generation,
)
from mbrw.errors import ArtifactError, ConfigError
from mbrw.model import ModelSpec, model_hash
from mbrw.renewal import DEFAULT_SCHEDULE, VAlphaTable, estimate_V
from mbrw.runner import ReplicaPool
from mbrw.seeds import child_seed, replica_rng
from mbrw.spectral import BoundaryData, big_M, dominant_eigen
from mbrw.stats import MIN_REPLICAS, Comparison, estimate_of, exact

logger = logging.getLogger(__name__)

EXPERIMENTS = ("biggins", "derivative", "seneta-heyde", "smoothing")

DEFAULT_DEPTHS = {
    "biggins": (10, 20, 40),
    "derivative": (16, 32, 64, 128),
    "seneta-heyde": (64, 100, 144),
    "smoothing": (16, 32, 64),
}

CRITICAL_TOL = 1e-6
ALPHA_TOKEN = "alpha"


# ------------------------------------------------------------------
# Configuration
# ------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings of one experiment run, loaded from JSON or built from defaults."""

    name: str
    model: str = ""
    boundary: str = ""
    depths: tuple[int, ...] = ()
    replicas: int = 10_000
    seed: int = 20240101
    s_values: tuple[float | str, ...] = ()
    b_values: tuple[float, ...] = (0.0, 2.0, 5.0)
    r_points: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0, 5.0)
    laplace_scale: float = 1.0
    x0: tuple[float, ...] | None = None
    expectation_tol: float = 0.10
    ratio_tol: float = 0.20
    stability_tol: float = 0.10
    median_stability: float = 0.25
    positivity: float = 0.99
    cauchy_factor: float = 2.0
    cauchy_pair: tuple[int, int] = (16, 64)
    v_replicas: int = 4_000
    v_schedule: tuple[int, ...] = DEFAULT_SCHEDULE
    prune_eps: float | None = None

    def __post_init__(self) -> None:
        if self.name not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.name!r}; expected one of {EXPERIMENTS}")
        if not self.depths:
            object.__setattr__(self, "depths", DEFAULT_DEPTHS[self.name])
        for s in self.s_values:
            if s != ALPHA_TOKEN and not isinstance(s, int | float):
                raise ConfigError(
                    f"s_values entries must be numbers or {ALPHA_TOKEN!r}, got: {s!r}"
                )

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown experiment config field(s): {', '.join(unknown)}")
        values = dict(doc)
        for key in (
            "depths", "s_values", "b_values", "r_points", "x0", "cauchy_pair", "v_schedule"
        ):
            if values.get(key) is not None:
                values[key] = tuple(values[key])
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None

    @classmethod
    def load(cls, path: str | Path, name: str) -> ExperimentConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ArtifactError(str(path), exc.strerror or "unreadable") from None
        except json.JSONDecodeError as exc:
            raise ArtifactError(str(path), f"invalid JSON: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError("experiment config must be a JSON object")
        doc.setdefault("name", name)
        return cls.from_dict(doc)

    def validate(
        self,
        spec: ModelSpec,
        particle_cap: int = DEFAULT_PARTICLE_CAP,
        boundary: BoundaryData | None = None,
    ) -> None:
        """Raise ConfigError naming the first infeasible field."""
        if self.replicas < 1:
            raise ConfigError(f"replicas must be positive, got: {self.replicas}")
        if any(n < 1 for n in self.depths) or list(self.depths) != sorted(set(self.depths)):
            raise ConfigError(f"depths must be positive and strictly increasing: {self.depths}")
        mean = spec.offspring_mean
        if mean <= 1.0:
            raise ConfigError(f"offspring mean must exceed 1 (condition A3), got: {mean}")
        deepest = max(self.depths)
        if self.name == "derivative":
            deepest = max(deepest, 2 * self.cauchy_pair[1])
        if deepest * math.log(mean) > math.log(particle_cap):
            raise ConfigError(
                f"depths: expected population {mean:.3g}^{deepest} exceeds the particle cap "
                f"{particle_cap}"
            )
        if self.name == "biggins" and not self.s_values:
            raise ConfigError("s_values must list at least one parameter for biggins")
        if self.name == "biggins" and boundary is not None:
            alpha = boundary.alpha
            resolved = self.resolved_s(boundary)
            if not any(abs(s - alpha) <= CRITICAL_TOL for s in resolved):
                raise ConfigError(
                    f"s_values must include alpha={alpha:.6g} (or {ALPHA_TOKEN!r}) for biggins"
                )
            if not any(0 < s < alpha - CRITICAL_TOL for s in resolved):
                raise ConfigError(
                    f"s_values need at least one regular s in (0, {alpha:.6g}) for biggins"
                )
        if self.x0 is not None and len(self.x0) != spec.d:
            raise ConfigError(f"x0 must have {spec.d} coordinates, got: {len(self.x0)}")

    def resolved_s(self, boundary: BoundaryData) -> tuple[float, ...]:
        """s_values with the alpha token replaced by the boundary parameter."""
        return tuple(boundary.alpha if s == ALPHA_TOKEN else float(s) for s in self.s_values)

    def start(self, spec: ModelSpec) -> np.ndarray:
        if self.x0 is None:
            return cone.uniform_direction(spec.d)
        return cone.as_direction(self.x0)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------
# Reports
# ------------------------------------------------------------------


def check(statistic: str, status: str, **details: object) -> dict:
    return {"statistic": statistic, "status": status, "pass": status == "pass", **details}


def comparison_check(comp: Comparison) -> dict:
    return comp.to_dict()


def verdict_of(checks: Sequence[dict]) -> str:
    statuses = [c["status"] for c in checks]
    if "fail" in statuses:
        return "fail"
    if "inconclusive" in statuses or not statuses:
        return "inconclusive"
    return "pass"


@dataclass
class ExperimentReport:
    name: str
    checks: list[dict] = field(default_factory=list)
    tiers: dict[str, list[dict]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return verdict_of(self.checks)

    def row(self, tier: str, n: int, statistic: str, value: float, se: float = 0.0) -> None:
        self.tiers.setdefault(tier, []).append(
            {"n": n, "statistic": statistic, "value": value, "se": se}
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "verdict": self.verdict,
            "checks": self.checks,
            "tiers": self.tiers,
            "provenance": self.provenance,
            "notes": self.notes,
        }

    def text(self) -> str:
        lines = [f"{self.name}: {self.verdict}"]
        for c in self.checks:
            lines.append(f"  [{c['status']}] {c['statistic']}")
        lines.extend(f"  note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def _provenance(config: ExperimentConfig, spec: ModelSpec, boundary: BoundaryData) -> dict:
    from mbrw import __version__

    return {
        "seed": config.seed,
        "model_hash": model_hash(spec),
        "grid_size": boundary.grid.size,
        "version": __version__,
        "config": config.to_dict(),
    }


# ------------------------------------------------------------------
# Replica helpers
# ------------------------------------------------------------------


def _pruning(config: ExperimentConfig, boundary: BoundaryData) -> Pruning | None:
    if config.prune_eps is None:
        return None
    return Pruning(alpha=boundary.alpha, eps=config.prune_eps)


def _run_trees(
    pool: ReplicaPool,
    spec: ModelSpec,
    config: ExperimentConfig,
    request: MartingaleRequest,
    depth: int,
    seed: int,
    b0: float = 0.0,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
    pruning: Pruning | None = None,
) -> list[MartingaleSeries]:
    return pool.map(
        simulate_martingales,
        config.replicas,
        spec,
        config.start(spec),
        b0,
        depth,
        request,
        seed,
        particle_cap,
        pruning,
    )


def _matrix(series: Sequence[MartingaleSeries], name: str) -> np.ndarray:
    return np.array([s.values[name] for s in series])


def _populations(series: Sequence[MartingaleSeries]) -> np.ndarray:
    return np.array([s.population for s in series])


def _survivor_median(values: np.ndarray, alive: np.ndarray) -> float:
    live = values[alive]
    return float(np.median(live)) if live.size else math.nan


def minimum_drift_check(series: Sequence[MartingaleSeries], n: int) -> dict:
    """Fraction of replicas alive at n whose generation minimum rose between n/2 and n."""
    pops = _populations(series)
    alive = pops[:, n] > 0
    mins = np.array([s.min_position for s in series])
    half = n // 2
    if alive.sum() < MIN_REPLICAS:
        return check(f"minimum_drift(n={n})", "inconclusive", survivors=int(alive.sum()))
    rose = float(np.mean(mins[alive, n] > mins[alive, half]))
    return check(
        f"minimum_drift(n={n})", "pass" if rose >= 0.5 else "fail", fraction=rose
    )


# ------------------------------------------------------------------
# Experiments
# ------------------------------------------------------------------


def biggins_experiment(
    config: ExperimentConfig,
    spec: ModelSpec,
    boundary: BoundaryData,
    pool: ReplicaPool,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
) -> ExperimentReport:
    """Nondegenerate W_n(s) where M(s) > s M'(s); collapse at s = alpha."""
    config.validate(spec, particle_cap, boundary)
    report = ExperimentReport("biggins", provenance=_provenance(config, spec, boundary))
    grid = boundary.grid
    x0 = config.start(spec)
    depth = max(config.depths)
    early = min(10, depth)
    for s in config.resolved_s(boundary):
        data = dominant_eigen(spec, s, grid)
        value, slope = big_M(spec, s, grid)
        critical = abs(s - boundary.alpha) <= CRITICAL_TOL
        regular = not critical and value - s * slope > CRITICAL_TOL
        request = MartingaleRequest(spectral=(data,))
        series = _run_trees(
            pool, spec, config, request, depth, child_seed(config.seed, f"biggins:{s:g}"),
            particle_cap=particle_cap,
        )
        W = _matrix(series, f"W({s:g})")
        alive = _populations(series) > 0
        w0 = float(data.r_at(x0.reshape(1, -1))[0])
        for n in config.depths:
            est = estimate_of(W[:, n], config.seed)
            report.row("mean", n, f"W({s:g})", est.value, est.se)
            report.row("median", n, f"W({s:g})", _survivor_median(W[:, n], alive[:, n]))
        if regular:
            comp = Comparison(f"mean W_n({s:g}) at n={depth}", estimate_of(W[:, depth]), exact(w0))
            report.checks.append(comparison_check(comp))
            last = _survivor_median(W[:, depth], alive[:, depth])
            prev = _survivor_median(W[:, config.depths[-2]], alive[:, config.depths[-2]]) if len(
                config.depths
            ) > 1 else last
            if not (math.isfinite(last) and math.isfinite(prev)):
                status = "inconclusive"
            else:
                stable = last > 0 and abs(last / prev - 1.0) <= config.median_stability
                status = "pass" if stable else "fail"
            report.checks.append(check(f"median W_n({s:g}) stabilizes", status, median=last))
        else:
            start = _survivor_median(W[:, early], alive[:, early])
            end = _survivor_median(W[:, depth], alive[:, depth])
            if not (math.isfinite(start) and math.isfinite(end)) or start <= 0:
                status = "inconclusive"
            else:
                status = "pass" if end < 0.1 * start else "fail"
            report.checks.append(
                check(f"median W_n({s:g}) collapses", status, start=start, end=end)
            )
    logger.info("experiment finished", extra={"experiment": "biggins", "verdict": report.verdict})
    return report


def _derivative_series(
    config: ExperimentConfig,
    spec: ModelSpec,
    boundary: BoundaryData,
    pool: ReplicaPool,
    depth: int,
    particle_cap: int,
    label: str,
    b0: float = 0.0,
) -> list[MartingaleSeries]:
    request = MartingaleRequest(boundary=boundary)
    return _run_trees(
        pool,
        spec,
        config,
        request,
        depth,
        child_seed(config.seed, label),
        b0=b0,
        particle_cap=particle_cap,
        pruning=_pruning(config, boundary),
    )


def derivative_convergence_experiment(
    config: ExperimentConfig,
    spec: ModelSpec,
    boundary: BoundaryData,
    pool: ReplicaPool,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
) -> ExperimentReport:
    """Cauchy decay, positivity and mean conservation of D_n."""
    config.validate(spec, particle_cap, boundary)
    report = ExperimentReport("derivative", provenance=_provenance(config, spec, boundary))
    x0 = config.start(spec).reshape(1, -1)
    lo, hi = config.cauchy_pair
    depth = max(max(config.depths), 2 * hi)
    series = _derivative_series(config, spec, boundary, pool, depth, particle_cap, "derivative")
    D = _matrix(series, "D")
    alive = _populations(series) > 0
    d0 = float(boundary.r_at(x0)[0] * boundary.ell_at(x0)[0])

    for n in config.depths:
        est = estimate_of(D[:, n], config.seed)
        report.row("mean", n, "D", est.value, est.se)
        report.checks.append(comparison_check(Comparison(f"mean D_n at n={n}", est, exact(d0))))

    gaps = {}
    for n in (lo, hi):
        live = alive[:, 2 * n]
        gaps[n] = float(np.median(np.abs(D[live, 2 * n] - D[live, n]))) if live.any() else math.nan
        report.row("cauchy", n, "median |D_2n - D_n|", gaps[n])
    if alive[:, 2 * hi].sum() < MIN_REPLICAS or not gaps[hi] > 0:
        status = "inconclusive"
    else:
        status = "pass" if gaps[lo] / gaps[hi] >= config.cauchy_factor else "fail"
    report.checks.append(check(f"cauchy decay {lo}->{hi}", status, gaps=gaps))

    live = alive[:, depth]
    if live.sum() < MIN_REPLICAS:
        status, frac = "inconclusive", math.nan
    else:
        frac = float(np.mean(D[live, depth] > 0))
        status = "pass" if frac >= config.positivity else "fail"
    report.checks.append(check(f"D positive at n={depth}", status, fraction=frac))
    report.checks.append(minimum_drift_check(series, depth))
    logger.info(
        "experiment finished", extra={"experiment": "derivative", "verdict": report.verdict}
    )
    return report


def seneta_heyde_experiment(
    config: ExperimentConfig,
    spec: ModelSpec,
    boundary: BoundaryData,
    pool: ReplicaPool,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
    table: VAlphaTable | None = None,
) -> ExperimentReport:
    """Three tiers around sqrt(n) W_n -> sqrt(2 / (pi sigma^2)) D_inf."""
    config.validate(spec, particle_cap, boundary)
    report = ExperimentReport("seneta-heyde", provenance=_provenance(config, spec, boundary))
    report.notes.append(
        "convergence in probability is not certified directly; expectation, ratio and trend "
        "tiers are reported instead"
    )
    x0 = config.start(spec)
    sigma = math.sqrt(boundary.sigma2)
    target = math.sqrt(2.0 / (math.pi * boundary.sigma2))
    if table is None:
        top = max(max(config.b_values), 1.0) * 2
        table = estimate_V(
            spec,
            boundary,
            np.linspace(0.0, top, 21),
            config.v_replicas,
            child_seed(config.seed, "seneta-heyde:V"),
            config.v_schedule,
        )
    depth = max(config.depths)
    r_x = float(boundary.r_at(x0.reshape(1, -1))[0])

    # Expectation tier.
    base: list[MartingaleSeries] | None = None
    for b in config.b_values:
        series = _derivative_series(
            config, spec, boundary, pool, depth, particle_cap, f"seneta-heyde:b={b:g}", b0=b
        )
        if b == 0.0:
            base = series
        W_tilde = _matrix(series, "W_tilde")
        v = float(table.value(x0.reshape(1, -1), np.array([b]))[0])
        expected = 2.0 / (sigma * math.sqrt(2 * math.pi)) * math.exp(-boundary.alpha * b) * r_x * v
        slack = expected * config.expectation_tol + 2.0 / (
            sigma * math.sqrt(2 * math.pi)
        ) * math.exp(-boundary.alpha * b) * r_x * table.certified_error
        for n in config.depths:
            est = estimate_of(math.sqrt(n) * W_tilde[:, n], config.seed)
            report.row("expectation", n, f"sqrt(n) E W_tilde (b={b:g})", est.value, est.se)
            comp = Comparison(
                f"expectation tier b={b:g} n={n}", est, exact(expected), slack=slack
            )
            report.checks.append(comparison_check(comp))
    if base is None:
        base = _derivative_series(
            config, spec, boundary, pool, depth, particle_cap, "seneta-heyde:b=0"
        )

    # Ratio and trend tiers.
    W = _matrix(base, "W_alpha")
    D = _matrix(base, "D")
    medians, spreads = [], []
    survivors = []
    for n in config.depths:
        ok = (_populations(base)[:, n] > 0) & (D[:, n] > 0)
        survivors.append(int(ok.sum()))
        ratio = math.sqrt(n) * W[ok, n] / D[ok, n]
        if ratio.size:
            q1, med, q3 = np.percentile(ratio, [25, 50, 75])
        else:
            q1 = med = q3 = math.nan
        medians.append(float(med))
        spreads.append(float(q3 - q1))
        report.row("ratio", n, "median sqrt(n) W_n / D_n", float(med))
        report.row("trend", n, "iqr sqrt(n) W_n / D_n", float(q3 - q1))
    if min(survivors) < MIN_REPLICAS:
        need = config.replicas * MIN_REPLICAS // max(min(survivors), 1)
        report.checks.append(
            check("ratio tier", "inconclusive", survivors=survivors, suggested_replicas=need)
        )
        report.checks.append(check("trend tier", "inconclusive", survivors=survivors))
    else:
        near = all(abs(m / target - 1.0) <= config.ratio_tol for m in medians)
        stable = max(medians) / min(medians) - 1.0 <= config.stability_tol
        report.checks.append(
            check(
                "ratio tier",
                "pass" if near and stable else "fail",
                medians=medians,
                target=target,
            )
        )
        shrinking = spreads[-1] < spreads[0]
        report.checks.append(check("trend tier", "pass" if shrinking else "fail", iqr=spreads))
    logger.info(
        "experiment finished", extra={"experiment": "seneta-heyde", "verdict": report.verdict}
    )
    return report


def smoothing_rhs_replica(
    replica: int,
    spec: ModelSpec,
    boundary: BoundaryData,
    x0: np.ndarray,
    depth: int,
    seed: int,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
) -> float:
    """sum_{|v|=1} e^{-alpha S_v} D^(v), each D^(v) from an independent tree at X_v."""
    rng = replica_rng(seed, replica)
    first = step_generation(spec, root_snapshot(x0, 0.0, spec.d), rng, particle_cap)
    total = 0.0
    for i in range(first.population):
        *_, last = simulate_tree(spec, first.X[i], 0.0, depth, rng, particle_cap)
        total += math.exp(-boundary.alpha * float(first.S[i])) * derivative_martingale(
            last, boundary
        )
    return total


def smoothing_fixed_point_check(
    config: ExperimentConfig,
    spec: ModelSpec,
    boundary: BoundaryData,
    pool: ReplicaPool,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
) -> ExperimentReport:
    """Laplace transforms of D and of sum_v e^{-alpha S_v} D^(v) at several r."""
    config.validate(spec, particle_cap, boundary)
    report = ExperimentReport("smoothing", provenance=_provenance(config, spec, boundary))
    x0 = config.start(spec)
    depth = max(config.depths)
    series = _derivative_series(config, spec, boundary, pool, depth, particle_cap, "smoothing")
    lhs = _matrix(series, "D")[:, depth]
    rhs = np.array(
        pool.map(
            smoothing_rhs_replica,
            config.replicas,
            spec,
            boundary,
            x0,
            depth,
            child_seed(config.seed, "smoothing:rhs"),
            particle_cap,
        )
    )
    K = config.laplace_scale
    for r in config.r_points:
        a = estimate_of(np.exp(-r * K * lhs), config.seed)
        b = estimate_of(np.exp(-r * K * rhs), config.seed)
        report.row("laplace", 0, f"lhs(r={r:g})", a.value, a.se)
        report.row("laplace", 0, f"rhs(r={r:g})", b.value, b.se)
        report.checks.append(comparison_check(Comparison(f"laplace r={r:g}", a, b)))

    q = spec.offspring.extinction_probability()
    for side, values in (("lhs", lhs), ("rhs", rhs)):
        est = estimate_of((values == 0).astype(float), config.seed)
        report.checks.append(
            comparison_check(Comparison(f"extinction mass ({side})", est, exact(q)))
        )
    logger.info(
        "experiment finished", extra={"experiment": "smoothing", "verdict": report.verdict}
    )
    return report


RUNNERS: dict[str, Callable[..., ExperimentReport]] = {
    "biggins": biggins_experiment,
    "derivative": derivative_convergence_experiment,
    "seneta-heyde": seneta_heyde_experiment,
    "smoothing": smoothing_fixed_point_check,
}


def run_experiment(
    config: ExperimentConfig,
    spec: ModelSpec,
    boundary: BoundaryData,
    pool: ReplicaPool,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
) -> ExperimentReport:
    return RUNNERS[config.name](config, spec, boundary, pool, particle_cap)

"""Conditioned walks: passage times, ladders, V_alpha and renewal measures.

All walks here run under the tilted chain at the boundary parameter, either
the primal one built from the atoms or the dual one built from their
transposes.  Paths start at S_0 = 0 unless stated otherwise; the killing
level y enters through tau_y^- = min{k >= 1 : y + S_k < 0}.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy import stats as sps

from mbrw import cone
from mbrw.errors import (
    ConfigError,
    ConvergenceError,
    HorizonError,
    InsufficientSampleError,
    InvariantViolation,
)
from mbrw.model import ModelSpec, model_hash
from mbrw.seeds import replica_rng
from mbrw.spectral import (
    DEFAULT_TOL,
    BoundaryData,
    DirectionGrid,
    SpectralData,
    dominant_eigen_dual,
    tilted_weights,
)
from mbrw.spine import tilted_step_batch
from mbrw.stats import MIN_REPLICAS, Comparison, Estimate, estimate_of

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (64, 256, 1024)
DEFAULT_V_GRID = {2: 8, 3: 4}
TAIL_FRACTION = 0.01
REVERSED_SLACK = 1e-9
INVOLUTION_TOL = 1e-12
MIN_SURVIVORS = 30
SLOPE_BAND = (-1.65, -1.35)
SPITZER_STABILITY = 10.0
DOUBLING_BAND = 0.25

MEASURES = ("primal", "dual")
VARIANTS = ("killed_primal", "ladder_dual_plus", "ladder_primal_T")


# ------------------------------------------------------------------
# Walks
# ------------------------------------------------------------------


def _law(
    spec: ModelSpec, boundary: BoundaryData, measure: str
) -> tuple[ModelSpec, SpectralData]:
    if measure == "primal":
        return spec, boundary.spectral
    if measure == "dual":
        return spec.transposed(), boundary.dual
    raise ConfigError(f"unknown walk measure {measure!r}; expected one of {MEASURES}")


@dataclass(frozen=True, eq=False)
class WalkPath:
    measure: str
    x0: np.ndarray
    b0: float
    X: np.ndarray
    S: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.S.shape[0]) - 1


def walk(
    spec: ModelSpec,
    boundary: BoundaryData,
    measure: str,
    x0: np.ndarray,
    b0: float,
    steps: int,
    rng: np.random.Generator,
) -> WalkPath:
    law, data = _law(spec, boundary, measure)
    x = cone.as_direction(x0)
    X = np.empty((steps + 1, spec.d))
    S = np.empty(steps + 1)
    X[0], S[0] = x, b0
    cur_x, cur_s = x.reshape(1, -1), np.array([float(b0)])
    for k in range(1, steps + 1):
        cur_x, cur_s, _ = tilted_step_batch(law, data, cur_x, cur_s, rng)
        X[k], S[k] = cur_x[0], cur_s[0]
    return WalkPath(measure=measure, x0=x, b0=float(b0), X=X, S=S)


class _Walker:
    """Steps a batch of independent walks one generation at a time."""

    def __init__(
        self,
        spec: ModelSpec,
        boundary: BoundaryData,
        measure: str,
        X0: np.ndarray,
        rng: np.random.Generator,
    ) -> None:
        self.law, self.data = _law(spec, boundary, measure)
        self.X = np.atleast_2d(np.asarray(X0, dtype=float)).copy()
        self.S = np.zeros(self.X.shape[0])
        self.rng = rng

    def step(self) -> np.ndarray:
        self.X, self.S, _ = tilted_step_batch(self.law, self.data, self.X, self.S, self.rng)
        return self.S


def walk_matrix(
    spec: ModelSpec,
    boundary: BoundaryData,
    measure: str,
    x0: np.ndarray,
    steps: int,
    paths: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """S paths from S_0 = 0 as a (paths, steps + 1) array."""
    walker = _Walker(spec, boundary, measure, np.tile(cone.as_direction(x0), (paths, 1)), rng)
    out = np.zeros((paths, steps + 1))
    for k in range(1, steps + 1):
        out[:, k] = walker.step()
    return out


# ------------------------------------------------------------------
# Stopping times and ladders
# ------------------------------------------------------------------


def tau_minus(S: np.ndarray, y: float) -> np.ndarray:
    """First k >= 1 with y + S_k < 0, per row; S.shape[-1] when not reached."""
    S = np.atleast_2d(S)
    hit = y + S[:, 1:] < 0
    first = np.argmax(hit, axis=1) + 1
    return np.where(hit.any(axis=1), first, S.shape[1])


def tau_plus(S: np.ndarray, y: float) -> np.ndarray:
    """First k >= 1 with S_k - y > 0, per row; S.shape[-1] when not reached."""
    S = np.atleast_2d(S)
    hit = S[:, 1:] - y > 0
    first = np.argmax(hit, axis=1) + 1
    return np.where(hit.any(axis=1), first, S.shape[1])


def ascending_ladder_epochs(S: np.ndarray) -> np.ndarray:
    """Weak ascending ladder epochs 0 = T_0 < T_1 < ... of one path."""
    S = np.asarray(S, dtype=float)
    record = np.maximum.accumulate(S)[:-1]
    return np.concatenate([[0], np.flatnonzero(S[1:] >= record) + 1])


def descending_ladder_epochs(S: np.ndarray) -> np.ndarray:
    """Weak descending ladder epochs 0 = T_0^- < T_1^- < ... of one path."""
    return ascending_ladder_epochs(-np.asarray(S, dtype=float))


def running_minimum(S: np.ndarray) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(S, dtype=float), axis=-1)


@dataclass(frozen=True, eq=False)
class StoppingTimes:
    tau_minus: int
    tau_plus: int
    ascending: np.ndarray
    descending: np.ndarray
    L: np.ndarray

    @classmethod
    def of(cls, S: np.ndarray, y: float = 0.0) -> StoppingTimes:
        return cls(
            tau_minus=int(tau_minus(S, y)[0]),
            tau_plus=int(tau_plus(S, y)[0]),
            ascending=ascending_ladder_epochs(S),
            descending=descending_ladder_epochs(S),
            L=running_minimum(S),
        )


def ladder_consistency(primal_S: np.ndarray, dual_S: np.ndarray) -> None:
    """S along ascending epochs must not decrease and S* along descending
    epochs must not increase."""
    up = np.diff(primal_S[ascending_ladder_epochs(primal_S)])
    down = np.diff(dual_S[descending_ladder_epochs(dual_S)])
    if up.size and up.min() < 0:
        raise InvariantViolation("ascending ladder heights nondecreasing", float(up.min()), 0.0)
    if down.size and down.max() > 0:
        raise InvariantViolation("descending ladder heights nonincreasing", float(down.max()), 0.0)


# ------------------------------------------------------------------
# Reversed walk and duality
# ------------------------------------------------------------------


@dataclass(frozen=True)
class ReversedBoundReport:
    n: int
    paths: int
    max_gap: float
    bound: float
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {
            "statistic": "reversed_path_bound",
            "n": self.n,
            "paths": self.paths,
            "max_gap": self.max_gap,
            "bound": self.bound,
            "violations": self.violations,
            "pass": self.passed,
        }


def reversed_bound_check(
    spec: ModelSpec, n: int, replicas: int, rng: np.random.Generator
) -> ReversedBoundReport:
    """Compare S_n - S_k with the reversed S*_{n,n-k} built from the same factors.

    Both are logs of norms of one product P_k = g_n ... g_{k+1}, applied to
    X_k and (transposed) to an independent uniform direction, so the gap is
    bounded by kappa_bar + log d for every path and every k.
    """
    fk = spec.fk()
    bound = fk.window
    atoms = spec.scaled_atoms
    idx = rng.choice(spec.n_atoms, size=(replicas, n), p=spec.weight_array)
    X = np.empty((n + 1, replicas, spec.d))
    X[0] = rng.dirichlet(np.ones(spec.d), size=replicas)
    for k in range(1, n + 1):
        X[k], _ = cone.act_stacked(atoms[idx[:, k - 1]], X[k - 1])
    x_star = rng.dirichlet(np.ones(spec.d), size=replicas)

    # P_k kept normalised with its log scale alongside.
    P = np.broadcast_to(np.eye(spec.d), (replicas, spec.d, spec.d)).copy()
    log_scale = np.zeros(replicas)
    max_gap = 0.0
    violations = 0
    for k in range(n, -1, -1):
        if k < n:
            P = np.einsum("rij,rjk->rik", P, atoms[idx[:, k]])
            norm = P.sum(axis=(1, 2))
            P /= norm[:, None, None]
            log_scale += np.log(norm)
        forward = -(log_scale + np.log(np.einsum("rij,rj->ri", P, X[k]).sum(axis=1)))
        reverse = -(log_scale + np.log(np.einsum("rji,rj->ri", P, x_star).sum(axis=1)))
        gap = np.abs(forward - reverse)
        max_gap = max(max_gap, float(gap.max()))
        violations += int(np.sum(gap > bound + REVERSED_SLACK))
    report = ReversedBoundReport(
        n=n, paths=replicas, max_gap=max_gap, bound=bound, violations=violations
    )
    if violations:
        raise InvariantViolation("reversed path bound", max_gap, bound)
    logger.info("reversed bound checked", extra=report.to_dict())
    return report


def duality_involution(
    spec: ModelSpec, boundary: BoundaryData, tol: float = DEFAULT_TOL
) -> float:
    """Re-solve the eigenproblem of the dual of the dual and compare its tilted
    kernel and eigenvalue with the stored primal ones.

    Returns the largest node-level difference; a stored primal eigenvector
    that is not the one the atoms produce shows up here.
    """
    twice = spec.transposed().transposed()
    if not np.array_equal(twice.scaled_atoms, spec.scaled_atoms):
        raise InvariantViolation("dual of dual atoms", math.inf, INVOLUTION_TOL)
    again = dominant_eigen_dual(
        spec.transposed(), boundary.alpha, boundary.grid, tol, primal=boundary.dual
    )
    nodes = boundary.grid.nodes
    ours = tilted_weights(spec, boundary.spectral, nodes)
    theirs = tilted_weights(twice, again, nodes)
    gap = float(
        max(
            np.max(np.abs(ours.weights - theirs.weights)),
            np.max(np.abs(ours.normalisation - theirs.normalisation)),
            abs(again.m_s - boundary.spectral.m_s) / boundary.spectral.m_s,
        )
    )
    if gap > INVOLUTION_TOL:
        raise InvariantViolation("dual of dual kernel", gap, INVOLUTION_TOL)
    return gap


# ------------------------------------------------------------------
# Harmonic function V_alpha
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VAlphaTable:
    """V_alpha(x, y) on a coarse direction grid times a y-grid starting at 0.

    Lookups interpolate linearly in both arguments, return 0 for y < 0 and
    extend above the grid with slope 1.
    """

    grid: DirectionGrid
    y_grid: np.ndarray
    values: np.ndarray
    certified_error: float
    harmonicity_residual: float = 0.0
    n_schedule: tuple[int, ...] = DEFAULT_SCHEDULE
    replicas: int = 0
    model_hash: str = ""

    def __post_init__(self) -> None:
        y = np.asarray(self.y_grid)
        if y.size < 2 or y[0] != 0.0 or np.any(np.diff(y) <= 0):
            raise ConfigError("y grid must start at 0 and increase strictly")
        if self.values.shape != (self.grid.n_nodes, y.size):
            raise ConfigError(
                f"V table has shape {self.values.shape}, expected "
                f"{(self.grid.n_nodes, y.size)}"
            )

    def value(self, points: np.ndarray, y: np.ndarray | float) -> np.ndarray:
        points = np.atleast_2d(points)
        y = np.broadcast_to(np.asarray(y, dtype=float), (points.shape[0],))
        idx, wts = self.grid.interp(points)
        top = float(self.y_grid[-1])
        yc = np.clip(y, 0.0, top)
        pos = np.clip(np.searchsorted(self.y_grid, yc, side="right") - 1, 0, self.y_grid.size - 2)
        lo, hi = self.y_grid[pos], self.y_grid[pos + 1]
        frac = ((yc - lo) / (hi - lo))[:, None]
        per_node = self.values[idx, pos[:, None]] * (1 - frac) + self.values[
            idx, pos[:, None] + 1
        ] * frac
        v = np.sum(per_node * wts, axis=1) + np.maximum(y - top, 0.0)
        return np.where(y < 0, 0.0, v)

    def monotonicity_gap(self) -> float:
        """Largest decrease of V along y at any node (0 when monotone)."""
        return float(max(0.0, -np.min(np.diff(self.values, axis=1))))

    def to_dict(self) -> dict:
        return {
            "grid": {"d": self.grid.d, "size": self.grid.size},
            "y_grid": self.y_grid.tolist(),
            "values": self.values.tolist(),
            "certified_error": self.certified_error,
            "harmonicity_residual": self.harmonicity_residual,
            "n_schedule": list(self.n_schedule),
            "replicas": self.replicas,
            "model_hash": self.model_hash,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> VAlphaTable:
        return cls(
            grid=DirectionGrid.build(doc["grid"]["d"], doc["grid"]["size"]),
            y_grid=np.asarray(doc["y_grid"], dtype=float),
            values=np.asarray(doc["values"], dtype=float),
            certified_error=float(doc["certified_error"]),
            harmonicity_residual=float(doc.get("harmonicity_residual", 0.0)),
            n_schedule=tuple(doc.get("n_schedule", DEFAULT_SCHEDULE)),
            replicas=int(doc.get("replicas", 0)),
            model_hash=str(doc.get("model_hash", "")),
        )


def harmonicity_residual(
    spec: ModelSpec, boundary: BoundaryData, table: VAlphaTable
) -> np.ndarray:
    """|E[V(X_1, y + S_1); y + S_1 >= 0] - V(x, y)| at every table point, by exact atomic sums."""
    nodes = table.grid.nodes
    kernel = tilted_weights(spec, boundary.spectral, nodes)
    out = np.empty_like(table.values)
    for col, y in enumerate(table.y_grid):
        expected = np.zeros(nodes.shape[0])
        for j in range(spec.n_atoms):
            after = y - kernel.cocycles[j]
            expected += kernel.weights[:, j] * table.value(kernel.images[j], after)
        out[:, col] = np.abs(expected - table.values[:, col])
    return out


def estimate_V(
    spec: ModelSpec,
    boundary: BoundaryData,
    y_grid: Sequence[float],
    replicas: int,
    seed: int,
    n_schedule: Sequence[int] = DEFAULT_SCHEDULE,
    grid_size: int | None = None,
) -> VAlphaTable:
    """Plateau estimate of E[(y + S_n); tau_y^- > n] on a coarse direction grid.

    The estimate at the largest n is accepted when it sits within two
    combined standard errors of the previous one; the certified error is
    that difference plus two standard errors, raised to the one-step
    harmonicity residual where that is larger.
    """
    if boundary.sigma2 <= 0:
        raise ConfigError("V_alpha needs a nondegenerate walk (sigma^2 > 0)")
    schedule = tuple(sorted(int(n) for n in n_schedule))
    if len(schedule) < 2:
        raise ConfigError("n_schedule needs at least two horizons")
    ys = np.asarray(y_grid, dtype=float)
    grid = DirectionGrid.build(spec.d, grid_size or DEFAULT_V_GRID.get(spec.d, 4))
    n_nodes = grid.n_nodes

    starts = np.repeat(grid.nodes, replicas, axis=0)
    walker = _Walker(spec, boundary, "primal", starts, replica_rng(seed, 0))
    low = np.full(starts.shape[0], math.inf)
    means = np.empty((len(schedule), n_nodes, ys.size))
    ses = np.empty_like(means)
    slot = 0
    for n in range(1, schedule[-1] + 1):
        S = walker.step()
        low = np.minimum(low, S)
        if n != schedule[slot]:
            continue
        alive = ys[None, :] + low[:, None] >= 0
        sample = np.where(alive, ys[None, :] + S[:, None], 0.0).reshape(n_nodes, replicas, -1)
        means[slot] = sample.mean(axis=1)
        ses[slot] = sample.std(axis=1, ddof=1) / math.sqrt(replicas)
        slot += 1

    delta = np.abs(means[-1] - means[-2])
    band = 2 * np.sqrt(ses[-1] ** 2 + ses[-2] ** 2)
    if np.any(delta > band):
        worst = float(np.max(delta - band))
        raise ConvergenceError("V estimate not converged", schedule[-1], worst)
    mc_error = float(np.max(delta + 2 * ses[-1]))

    table = VAlphaTable(
        grid=grid,
        y_grid=ys,
        values=means[-1],
        certified_error=mc_error,
        n_schedule=schedule,
        replicas=replicas,
        model_hash=model_hash(spec),
    )
    if table.monotonicity_gap() > 2 * mc_error:
        raise InvariantViolation("V monotone in y", table.monotonicity_gap(), 2 * mc_error)
    residual = float(np.max(harmonicity_residual(spec, boundary, table)))
    if residual > mc_error:
        logger.warning(
            "harmonicity residual exceeds monte carlo error",
            extra={"residual": residual, "mc_error": mc_error},
        )
    table = VAlphaTable(
        grid=grid,
        y_grid=ys,
        values=means[-1],
        certified_error=max(mc_error, residual),
        harmonicity_residual=residual,
        n_schedule=schedule,
        replicas=replicas,
        model_hash=table.model_hash,
    )
    logger.info(
        "V table estimated",
        extra={
            "nodes": n_nodes,
            "y_points": int(ys.size),
            "certified_error": table.certified_error,
            "residual": residual,
        },
    )
    return table


# ------------------------------------------------------------------
# Renewal measures
# ------------------------------------------------------------------


def _tail_bound(step_means: np.ndarray, horizon: int) -> np.ndarray:
    """Bound on the contribution of steps beyond ``horizon`` from the n^{-3/2} decay.

    ``step_means`` has one row per step; the decay constant is the largest
    n^{3/2} mean over the second half of the horizon.
    """
    n = np.arange(step_means.shape[0], dtype=float)
    half = max(1, horizon // 2)
    scaled = step_means[half:] * n[half:, None] ** 1.5
    c = scaled.max(axis=0) if scaled.size else np.zeros(step_means.shape[1])
    return c * 2.0 / math.sqrt(max(horizon, 1))


def _suggest_horizon(horizon: int, tail: float, estimate: float, fraction: float) -> int:
    if estimate <= 0:
        return 4 * horizon
    return int(math.ceil(horizon * (tail / (fraction * estimate)) ** 2)) + 1


@dataclass(frozen=True)
class RenewalEstimate:
    variant: str
    t: float
    a: float
    estimate: Estimate
    tail_bound: float
    horizon: int
    y: float = 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "t": self.t,
            "a": self.a,
            "y": self.y,
            "estimate": self.estimate.value,
            "se": self.estimate.se,
            "tail_bound": self.tail_bound,
            "horizon": self.horizon,
        }


def _window_counts(
    spec: ModelSpec,
    boundary: BoundaryData,
    variant: str,
    windows: Sequence[tuple[float, float]],
    replicas: int,
    horizon: int,
    seed: int,
    y: float,
    x0: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-replica window visit counts (replicas, W) and per-step means (horizon + 1, W)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown renewal variant {variant!r}; expected one of {VARIANTS}")
    lo = np.array([t for t, _ in windows])
    hi = np.array([t + a for t, a in windows])
    measure = "dual" if variant == "ladder_dual_plus" else "primal"
    x = cone.uniform_direction(spec.d) if x0 is None else cone.as_direction(x0)
    walker = _Walker(spec, boundary, measure, np.tile(x, (replicas, 1)), replica_rng(seed, 0))
    S = np.zeros(replicas)
    active = np.ones(replicas, dtype=bool)
    record = np.zeros(replicas)
    totals = np.zeros((replicas, len(windows)))
    step_means = np.zeros((horizon + 1, len(windows)))

    def visit(n: int, counted: np.ndarray) -> None:
        inside = (S[:, None] >= lo) & (S[:, None] <= hi) & counted[:, None]
        totals[:] += inside
        step_means[n] = inside.mean(axis=0)

    visit(0, active)
    for n in range(1, horizon + 1):
        S = walker.step()
        if variant == "killed_primal":
            active &= y + S >= 0
            counted = active
        else:
            counted = S >= record
            record = np.where(counted, S, record)
        visit(n, counted)
        if variant == "killed_primal" and not active.any():
            step_means[n + 1 :] = 0.0
            break
    return totals, step_means


def renewal_scan(
    spec: ModelSpec,
    boundary: BoundaryData,
    variant: str,
    windows: Sequence[tuple[float, float]],
    replicas: int,
    horizon: int,
    seed: int,
    y: float = 0.0,
    x0: np.ndarray | None = None,
    tail_fraction: float | None = TAIL_FRACTION,
) -> list[RenewalEstimate]:
    """Renewal estimates for many windows from one set of paths.

    With ``tail_fraction`` set, a window whose tail bound exceeds that
    fraction of its estimate raises HorizonError with a suggested horizon.
    """
    totals, step_means = _window_counts(
        spec, boundary, variant, windows, replicas, horizon, seed, y, x0
    )
    tails = _tail_bound(step_means, horizon)
    out = []
    for i, (t, a) in enumerate(windows):
        est = estimate_of(totals[:, i], seed)
        tail = float(tails[i])
        if tail_fraction is not None and tail > tail_fraction * max(est.value, 0.0) and tail > 0:
            raise HorizonError(
                horizon, tail, _suggest_horizon(horizon, tail, est.value, tail_fraction)
            )
        out.append(
            RenewalEstimate(
                variant=variant, t=t, a=a, estimate=est, tail_bound=tail, horizon=horizon, y=y
            )
        )
    return out


def renewal_measure(
    spec: ModelSpec,
    boundary: BoundaryData,
    variant: str,
    t: float,
    a: float,
    replicas: int,
    horizon: int,
    seed: int,
    y: float = 0.0,
    x0: np.ndarray | None = None,
    tail_fraction: float | None = TAIL_FRACTION,
) -> RenewalEstimate:
    """Expected number of visits of the (killed or ladder) walk to [t, t + a]."""
    if a < 0:
        raise ConfigError(f"window length must be nonnegative, got: {a}")
    return renewal_scan(
        spec, boundary, variant, [(t, a)], replicas, horizon, seed, y, x0, tail_fraction
    )[0]


def _doubling_stable(base: float, doubled: float) -> bool:
    if base <= 0:
        return doubled <= 0
    return abs(doubled / base - 1.0) <= DOUBLING_BAND


@dataclass(frozen=True)
class UniformBoundReport:
    y: float
    a: float
    C_base: float
    C_doubled: float

    @property
    def stable(self) -> bool:
        return _doubling_stable(self.C_base, self.C_doubled)

    def to_dict(self) -> dict:
        return {
            "statistic": "renewal_uniform_bound",
            "y": self.y,
            "a": self.a,
            "C_base": self.C_base,
            "C_doubled": self.C_doubled,
            "pass": self.stable,
        }


def uniform_bound_check(
    spec: ModelSpec,
    boundary: BoundaryData,
    replicas: int,
    horizon: int,
    seed: int,
    y: float = 0.0,
    a: float = 1.0,
    t_range: tuple[int, int] = (-20, 40),
) -> tuple[UniformBoundReport, list[RenewalEstimate]]:
    """Fit C = sup_t U([t, t + a]) / max(a, 1) on a t-range and on its double."""
    lo, hi = t_range
    ts = list(range(2 * lo, 2 * hi + 1))
    scan = renewal_scan(
        spec,
        boundary,
        "killed_primal",
        [(float(t), a) for t in ts],
        replicas,
        horizon,
        seed,
        y=y,
        tail_fraction=None,
    )
    scale = max(a, 1.0)
    base = max(e.estimate.value for e in scan if lo <= e.t <= hi) / scale
    doubled = max(e.estimate.value for e in scan) / scale
    return UniformBoundReport(y=y, a=a, C_base=base, C_doubled=doubled), scan


@dataclass(frozen=True)
class SandwichReport:
    """Killed-walk renewal against the widened dual ladder renewal on a
    t-scan and on the scan with every t doubled."""

    ts: tuple[float, ...]
    killed: tuple[float, ...]
    dual: tuple[float, ...]
    C_base: float
    C_doubled: float
    replicas: int = MIN_REPLICAS

    @property
    def C_hat(self) -> float:
        return max(self.C_base, self.C_doubled)

    @property
    def status(self) -> str:
        if self.replicas < MIN_REPLICAS:
            return "inconclusive"
        finite = math.isfinite(self.C_base) and math.isfinite(self.C_doubled)
        return "pass" if finite and _doubling_stable(self.C_base, self.C_doubled) else "fail"

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {
            "statistic": "duality_sandwich",
            "t": list(self.ts),
            "killed_primal": list(self.killed),
            "ladder_dual_plus": list(self.dual),
            "C_base": self.C_base,
            "C_doubled": self.C_doubled,
            "C_hat": self.C_hat,
            "status": self.status,
            "pass": self.passed,
        }


def _sandwich_ratio(killed: RenewalEstimate, dual: RenewalEstimate) -> float:
    if killed.estimate.value <= 0:
        return 0.0
    if dual.estimate.value <= 0:
        return math.inf
    return killed.estimate.value / dual.estimate.value


def duality_sandwich(
    spec: ModelSpec,
    boundary: BoundaryData,
    ts: Sequence[float],
    a: float,
    replicas: int,
    horizon: int,
    seed: int,
    y: float = 0.0,
) -> SandwichReport:
    """One constant C with
    U_killed([t, t + a]) <= C U*_ladder([t - c1, t + a + c1]) over the scan.

    ``ts`` and ``2 * ts`` are scanned on the same paths; the constant fitted
    on the base scan must survive the doubled one.
    """
    c1 = spec.fk().c1
    base = [float(t) for t in ts]
    scan = base + [2 * t for t in base if 2 * t not in base]
    killed = renewal_scan(
        spec, boundary, "killed_primal", [(t, a) for t in scan], replicas, horizon,
        seed, y=y, tail_fraction=None,
    )
    dual = renewal_scan(
        spec, boundary, "ladder_dual_plus", [(t - c1, a + 2 * c1) for t in scan], replicas,
        horizon, seed + 1, tail_fraction=None,
    )
    ratios = [_sandwich_ratio(k, d) for k, d in zip(killed, dual, strict=True)]
    return SandwichReport(
        ts=tuple(base),
        killed=tuple(e.estimate.value for e in killed[: len(base)]),
        dual=tuple(e.estimate.value for e in dual[: len(base)]),
        C_base=max(ratios[: len(base)], default=0.0),
        C_doubled=max(ratios, default=0.0),
        replicas=replicas,
    )


def additivity_check(
    spec: ModelSpec,
    boundary: BoundaryData,
    variant: str,
    t: float,
    a: float,
    replicas: int,
    horizon: int,
    seed: int,
    y: float = 0.0,
) -> Comparison:
    """U([t, t + a]) + U((t + a, t + 2a]) against U([t, t + 2a]) on independent paths."""
    totals, _ = _window_counts(
        spec, boundary, variant, [(t, a), (t + a, a)], replicas, horizon, seed, y, None
    )
    # The shared endpoint is hit with probability zero for continuous increments.
    parts = estimate_of(totals.sum(axis=1), seed)
    joint, _ = _window_counts(
        spec, boundary, variant, [(t, 2 * a)], replicas, horizon, seed + 1, y, None
    )
    return Comparison(f"additivity[{variant}]", parts, estimate_of(joint[:, 0], seed + 1))


# ------------------------------------------------------------------
# Green functional and Spitzer-type bound
# ------------------------------------------------------------------


@dataclass(frozen=True)
class GreenWeight:
    """A named nonincreasing weight f for the Green functional."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.fn(np.asarray(y, dtype=float))


def _exp_decay(y: np.ndarray) -> np.ndarray:
    return np.exp(-np.maximum(y, 0.0))


def _cubic_decay(y: np.ndarray) -> np.ndarray:
    return (1.0 + np.maximum(y, 0.0)) ** -3


def _zero(y: np.ndarray) -> np.ndarray:
    return np.zeros_like(y)


EXP_DECAY = GreenWeight("exp", _exp_decay)
CUBIC_DECAY = GreenWeight("cubic", _cubic_decay)
ZERO = GreenWeight("zero", _zero)
GREEN_WEIGHTS = {w.name: w for w in (EXP_DECAY, CUBIC_DECAY, ZERO)}


def check_green_weight(f: GreenWeight) -> None:
    points = np.concatenate([[0.0], np.geomspace(1e-3, 1e4, 400)])
    values = f(points)
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ConfigError(f"green weight {f.name!r} must be finite and nonnegative")
    if np.any(np.diff(values) > 1e-12):
        raise ConfigError(f"green weight {f.name!r} must be nonincreasing")
    moment, err = integrate.quad(lambda y: y * float(f(np.array([y]))[0]), 0, np.inf, limit=200)
    if not math.isfinite(moment) or err > 1e-6 * max(1.0, abs(moment)):
        raise ConfigError(f"green weight {f.name!r} needs a finite first moment")


@dataclass(frozen=True)
class GreenProfile:
    weight: str
    b: tuple[float, ...]
    values: tuple[Estimate, ...]
    tail_bound: tuple[float, ...]

    @property
    def decreasing(self) -> bool:
        v = [e.value for e in self.values]
        return all(later < earlier for earlier, later in zip(v, v[1:], strict=False))

    def to_dict(self) -> dict:
        return {
            "statistic": f"green_functional[{self.weight}]",
            "b": list(self.b),
            "values": [e.to_dict() for e in self.values],
            "tail_bound": list(self.tail_bound),
            "decreasing": self.decreasing,
        }


def green_functional(
    spec: ModelSpec,
    boundary: BoundaryData,
    f: GreenWeight,
    b_list: Sequence[float],
    horizon: int,
    replicas: int,
    seed: int,
    x0: np.ndarray | None = None,
) -> GreenProfile:
    """F(b) = (1/b) sum_{n <= horizon} E[(b + S_n) f(b + S_n); tau_b^- > n]."""
    check_green_weight(f)
    bs = np.asarray(b_list, dtype=float)
    if np.any(bs <= 0):
        raise ConfigError("green functional levels must be positive")
    x = cone.uniform_direction(spec.d) if x0 is None else cone.as_direction(x0)
    walker = _Walker(spec, boundary, "primal", np.tile(x, (replicas, 1)), replica_rng(seed, 0))
    alive = np.ones((replicas, bs.size), dtype=bool)
    level = np.broadcast_to(bs, (replicas, bs.size))
    totals = level * f(level)
    step_means = np.zeros((horizon + 1, bs.size))
    step_means[0] = totals.mean(axis=0)
    for n in range(1, horizon + 1):
        S = walker.step()
        pos = bs[None, :] + S[:, None]
        alive &= pos >= 0
        term = np.where(alive, pos * f(np.maximum(pos, 0.0)), 0.0)
        totals = totals + term
        step_means[n] = term.mean(axis=0)
    tails = _tail_bound(step_means, horizon) / bs
    return GreenProfile(
        weight=f.name,
        b=tuple(float(b) for b in bs),
        values=tuple(estimate_of(totals[:, i] / bs[i], seed) for i in range(bs.size)),
        tail_bound=tuple(float(t) for t in tails),
    )


@dataclass(frozen=True, slots=True)
class Window:
    """Indicator of [lo, hi]; widening by c gives the sup over a c-neighbourhood."""

    lo: float
    hi: float

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return ((y >= self.lo) & (y <= self.hi)).astype(float)

    def widened(self, c: float) -> Window:
        return Window(self.lo - c, self.hi + c)


DEFAULT_BATTERIES = (
    (Window(-5.0, 0.0), Window(0.0, 5.0)),
    (Window(-12.0, -6.0), Window(6.0, 12.0)),
    (Window(-25.0, -13.0), Window(13.0, 25.0)),
)


@dataclass(frozen=True)
class SpitzerReport:
    lhs: tuple[float, ...]
    dual_factor: tuple[float, ...]
    primal_factor: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(
            lhs / (d * p) if d * p > 0 else (0.0 if lhs == 0 else math.inf)
            for lhs, d, p in zip(self.lhs, self.dual_factor, self.primal_factor, strict=True)
        )

    @property
    def C_hat(self) -> float:
        return max(self.ratios, default=0.0)

    @property
    def passed(self) -> bool:
        live = [r for r in self.ratios if r > 0]
        if not all(math.isfinite(r) for r in self.ratios):
            return False
        return not live or max(live) <= SPITZER_STABILITY * min(live)

    def to_dict(self) -> dict:
        return {
            "statistic": "spitzer_product_bound",
            "lhs": list(self.lhs),
            "dual_factor": list(self.dual_factor),
            "primal_factor": list(self.primal_factor),
            "ratios": list(self.ratios),
            "C_hat": self.C_hat,
            "pass": self.passed,
        }


def spitzer_bound_check(
    spec: ModelSpec,
    boundary: BoundaryData,
    horizon: int,
    replicas: int,
    seed: int,
    batteries: Sequence[tuple[Window, Window]] = DEFAULT_BATTERIES,
    x0: np.ndarray | None = None,
    widen: bool = True,
) -> SpitzerReport:
    """sum E[phi(L_n) h(S_n - L_n)] against the product of the dual series of
    phi~ killed above c1 and the primal series of h~ killed below -c1."""
    c1 = spec.fk().c1 if widen else 0.0
    x = cone.uniform_direction(spec.d) if x0 is None else cone.as_direction(x0)
    primal = walk_matrix(spec, boundary, "primal", x, horizon, replicas, replica_rng(seed, 0))
    dual = walk_matrix(spec, boundary, "dual", x, horizon, replicas, replica_rng(seed, 1))
    L = running_minimum(primal)
    dual_alive = np.ones_like(dual, dtype=bool)
    dual_alive[:, 1:] = np.logical_and.accumulate(dual[:, 1:] - c1 <= 0, axis=1)
    primal_alive = np.ones_like(primal, dtype=bool)
    primal_alive[:, 1:] = np.logical_and.accumulate(c1 + primal[:, 1:] >= 0, axis=1)
    lhs, dual_f, primal_f = [], [], []
    for phi, h in batteries:
        lhs.append(float(np.mean(np.sum(phi(L) * h(primal - L), axis=1))))
        wphi, wh = phi.widened(c1), h.widened(c1)
        dual_f.append(float(np.mean(np.sum(wphi(dual) * dual_alive, axis=1))))
        primal_f.append(float(np.mean(np.sum(wh(primal) * primal_alive, axis=1))))
    return SpitzerReport(lhs=tuple(lhs), dual_factor=tuple(dual_f), primal_factor=tuple(primal_f))


# ------------------------------------------------------------------
# Conditioned local limit and exit probabilities
# ------------------------------------------------------------------


@dataclass(frozen=True)
class ExitProfile:
    b: float
    n_list: tuple[int, ...]
    scaled: tuple[Estimate, ...]
    target: float
    target_error: float

    @property
    def plateau(self) -> Estimate:
        return self.scaled[-1]

    @property
    def passed(self) -> bool:
        gap = abs(self.plateau.value - self.target)
        return gap <= 0.1 * self.target + 3 * self.plateau.se + self.target_error

    def to_dict(self) -> dict:
        return {
            "statistic": "exit_probability_plateau",
            "b": self.b,
            "n": list(self.n_list),
            "scaled": [e.to_dict() for e in self.scaled],
            "target": self.target,
            "pass": self.passed,
        }


def exit_probability_profile(
    spec: ModelSpec,
    boundary: BoundaryData,
    table: VAlphaTable,
    x: np.ndarray,
    b: float,
    n_list: Sequence[int],
    replicas: int,
    seed: int,
) -> ExitProfile:
    """sqrt(n) Q(min_{1<=i<=n} S_i >= -b) against 2 V(x, b) / (sigma sqrt(2 pi))."""
    ns = tuple(sorted(int(n) for n in n_list))
    walker = _Walker(spec, boundary, "primal", np.tile(cone.as_direction(x), (replicas, 1)),
                     replica_rng(seed, 0))
    low = np.full(replicas, math.inf)
    scaled = []
    slot = 0
    for n in range(1, ns[-1] + 1):
        low = np.minimum(low, walker.step())
        if n == ns[slot]:
            scaled.append(estimate_of(math.sqrt(n) * (low >= -b), seed))
            slot += 1
    v = float(table.value(np.asarray(x).reshape(1, -1), np.array([b]))[0])
    norm = 2.0 / (math.sqrt(boundary.sigma2) * math.sqrt(2 * math.pi))
    return ExitProfile(
        b=float(b),
        n_list=ns,
        scaled=tuple(scaled),
        target=norm * v,
        target_error=norm * table.certified_error,
    )


@dataclass(frozen=True)
class CLLTReport:
    n_list: tuple[int, ...]
    probabilities: tuple[Estimate, ...]
    slope: float
    exit_bound: float
    exit_profile: ExitProfile | None = field(default=None)

    @property
    def slope_ok(self) -> bool:
        return SLOPE_BAND[0] <= self.slope <= SLOPE_BAND[1]

    @property
    def passed(self) -> bool:
        exit_ok = self.exit_profile is None or self.exit_profile.passed
        return self.slope_ok and exit_ok

    def to_dict(self) -> dict:
        return {
            "statistic": "conditioned_local_limit",
            "n": list(self.n_list),
            "probabilities": [e.to_dict() for e in self.probabilities],
            "slope": self.slope,
            "slope_band": list(SLOPE_BAND),
            "exit_bound": self.exit_bound,
            "exit_profile": self.exit_profile.to_dict() if self.exit_profile else None,
            "pass": self.passed,
        }


def cllt_slope_check(
    spec: ModelSpec,
    boundary: BoundaryData,
    y: float,
    z: float,
    replicas: int,
    n_list: Sequence[int],
    seed: int,
    x0: np.ndarray | None = None,
    table: VAlphaTable | None = None,
    b: float = 0.0,
) -> CLLTReport:
    """log-log slope of Q(y + S_n in [0, z], tau_y^- > n) over n, expected near -3/2.

    ``exit_bound`` is max_n sqrt(n) Q(tau_y^- > n) / (1 + y).
    """
    ns = tuple(sorted(int(n) for n in n_list))
    x = cone.uniform_direction(spec.d) if x0 is None else cone.as_direction(x0)
    walker = _Walker(spec, boundary, "primal", np.tile(x, (replicas, 1)), replica_rng(seed, 0))
    low = np.full(replicas, math.inf)
    probs, survive = [], []
    hits_last = 0
    slot = 0
    for n in range(1, ns[-1] + 1):
        S = walker.step()
        low = np.minimum(low, S)
        if n != ns[slot]:
            continue
        alive = y + low >= 0
        hit = alive & (y + S <= z)
        probs.append(estimate_of(hit.astype(float), seed))
        survive.append(math.sqrt(n) * float(alive.mean()))
        hits_last = int(hit.sum())
        slot += 1
    if hits_last < MIN_SURVIVORS:
        raise InsufficientSampleError(
            "conditioned local probability",
            hits_last,
            f"rerun with at least {replicas * MIN_SURVIVORS // max(hits_last, 1)} replicas",
        )
    # Depths with no hits carry no slope information.
    seen = [(n, p.value) for n, p in zip(ns, probs, strict=True) if p.value > 0]
    if len(seen) < 2:
        raise InsufficientSampleError(
            "conditioned local probability depths", len(seen), "use more replicas or depths"
        )
    fit = sps.linregress(np.log([n for n, _ in seen]), np.log([v for _, v in seen]))
    profile = None
    if table is not None:
        profile = exit_probability_profile(
            spec, boundary, table, x, b, ns, replicas, seed + 1
        )
    report = CLLTReport(
        n_list=ns,
        probabilities=tuple(probs),
        slope=float(fit.slope),
        exit_bound=max(survive) / (1.0 + max(y, 0.0)),
        exit_profile=profile,
    )
    logger.info("conditioned local limit checked", extra={"slope": report.slope, "y": y, "z": z})
    return report

"""Change of measure: the tilted chain, size-biased families and the spine.

Under the tilted law the atom used from direction x is drawn with
probability proportional to E N q_j e^{alpha sigma_j(x)} r_alpha(A_j . x),
so one tilted step is exact in the atoms.  Harmonic evaluators turn a
function h into H_alpha(y, s) = r_alpha(y) h(y, s) e^{-alpha s}, which
drives both the size-biased reproduction law and the choice of the spine
child.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import stats

from mbrw import cone
from mbrw.branching import (
    DEFAULT_PARTICLE_CAP,
    GenerationSnapshot,
    h_martingale,
    root_snapshot,
    simulate_tree,
    step_generation,
)
from mbrw.errors import (
    ConditionError,
    ConfigError,
    InsufficientSampleError,
    InvariantViolation,
    PopulationCapError,
)
from mbrw.model import ModelSpec
from mbrw.seeds import replica_rng
from mbrw.spectral import BoundaryData, SpectralData, kernel_tolerance, tilted_weights
from mbrw.stats import Comparison, Estimate, estimate_of, exact

if TYPE_CHECKING:
    from mbrw.renewal import VAlphaTable

logger = logging.getLogger(__name__)

MAX_REJECTION_ATTEMPTS = 1_000_000
MAX_MANY_TO_ONE_DEPTH = 8
MAX_SPINAL_DEPTH = 6


# ------------------------------------------------------------------
# Harmonic evaluators
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HarmonicEvaluator:
    """h together with its domain B = [lower, inf) and H_alpha = r h e^{-alpha s}."""

    boundary: BoundaryData
    kind: str = "constant_one"
    beta: float = 0.0
    v_table: VAlphaTable | None = None

    @classmethod
    def constant_one(cls, boundary: BoundaryData) -> HarmonicEvaluator:
        return cls(boundary=boundary)

    @classmethod
    def v_alpha_beta(
        cls, boundary: BoundaryData, table: VAlphaTable, beta: float = 0.0
    ) -> HarmonicEvaluator:
        if beta < 0:
            raise ConfigError(f"beta must be nonnegative, got: {beta}")
        return cls(boundary=boundary, kind="V_alpha_beta", beta=beta, v_table=table)

    @property
    def lower(self) -> float:
        return -math.inf if self.kind == "constant_one" else -self.beta

    @property
    def certified_error(self) -> float:
        return self.v_table.certified_error if self.v_table is not None else 0.0

    def h(self, X: np.ndarray, S: np.ndarray) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        if self.kind == "constant_one":
            return np.ones_like(S)
        assert self.v_table is not None
        values = self.v_table.value(np.atleast_2d(X), S + self.beta)
        return np.where(S >= self.lower, values, 0.0)

    def H(self, X: np.ndarray, S: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        S = np.atleast_1d(np.asarray(S, dtype=float))
        alpha = self.boundary.alpha
        return self.boundary.r_at(X) * self.h(X, S) * np.exp(-alpha * S)

    def H_point(self, x: np.ndarray, b: float) -> float:
        return float(self.H(np.asarray(x).reshape(1, -1), np.array([b]))[0])


# ------------------------------------------------------------------
# Tilted chain
# ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TiltedChainState:
    X: np.ndarray
    S: float
    step: int


def _pick(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise categorical draws from a (n, m) weight matrix."""
    u = rng.random(weights.shape[0])
    cum = np.cumsum(weights, axis=1)
    idx = np.sum(cum < u[:, None] * cum[:, -1:], axis=1)
    return np.minimum(idx, weights.shape[1] - 1)


def tilted_step_batch(
    spec: ModelSpec,
    data: SpectralData,
    X: np.ndarray,
    S: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One tilted step for every row; returns (X', S', atom indices)."""
    kernel = tilted_weights(spec, data, X)
    dev = float(np.max(np.abs(kernel.normalisation - 1.0))) if X.shape[0] else 0.0
    bound = kernel_tolerance(data.grid)
    if dev > bound:
        raise InvariantViolation("tilted kernel normalisation", dev, bound)
    j = _pick(kernel.weights, rng)
    rows = np.arange(X.shape[0])
    return kernel.images[j, rows], S - kernel.cocycles[j, rows], j


def tilted_step(
    state: TiltedChainState,
    spec: ModelSpec,
    data: SpectralData,
    rng: np.random.Generator,
) -> TiltedChainState:
    X, S, _ = tilted_step_batch(
        spec, data, state.X.reshape(1, -1), np.array([state.S]), rng
    )
    return TiltedChainState(X=X[0], S=float(S[0]), step=state.step + 1)


@dataclass(frozen=True, eq=False)
class TiltedPaths:
    """``S[i, k]`` is S_k of path i; ``X`` holds the final directions."""

    S: np.ndarray
    X: np.ndarray


def tilted_paths(
    spec: ModelSpec,
    data: SpectralData,
    x0: np.ndarray,
    b0: float,
    steps: int,
    paths: int,
    rng: np.random.Generator,
) -> TiltedPaths:
    X = np.tile(cone.as_direction(x0), (paths, 1))
    S = np.full(paths, float(b0))
    out = np.empty((paths, steps + 1))
    out[:, 0] = S
    for k in range(1, steps + 1):
        X, S, _ = tilted_step_batch(spec, data, X, S, rng)
        out[:, k] = S
    return TiltedPaths(S=out, X=X)


def drift_check(
    spec: ModelSpec,
    data: SpectralData,
    x0: np.ndarray,
    steps: int,
    paths: int,
    seed: int,
) -> Estimate:
    """Mean of S_n / n over independent tilted chains started at S_0 = 0."""
    walk = tilted_paths(spec, data, x0, 0.0, steps, paths, replica_rng(seed, 0))
    return estimate_of(walk.S[:, -1] / steps, seed)


def sigma2_monte_carlo(
    spec: ModelSpec,
    boundary: BoundaryData,
    x0: np.ndarray,
    steps: int,
    paths: int,
    seed: int,
) -> Comparison:
    """Var(S_n) / n from simulation against the spectral sigma_alpha^2."""
    walk = tilted_paths(spec, boundary.spectral, x0, 0.0, steps, paths, replica_rng(seed, 0))
    end = walk.S[:, -1]
    sample = (end - end.mean()) ** 2 / steps
    return Comparison("sigma2", estimate_of(sample, seed), exact(boundary.sigma2))


# ------------------------------------------------------------------
# Size-biased families
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BiasedFamily:
    X: np.ndarray
    S: np.ndarray
    atoms: np.ndarray
    spine: int

    @property
    def size(self) -> int:
        return int(self.S.shape[0])


def _child_weights(
    spec: ModelSpec, evaluator: HarmonicEvaluator, x: np.ndarray, b: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-atom child direction, position and H mass restricted to B."""
    images = np.empty((spec.n_atoms, spec.d))
    positions = np.empty(spec.n_atoms)
    for j, g in enumerate(spec.scaled_atoms):
        images[j] = cone.act(g, x)
        positions[j] = b - cone.cocycle(g, x)
    h = evaluator.H(images, positions)
    h = np.where(positions >= evaluator.lower, h, 0.0)
    return images, positions, h


def sample_biased_generation(
    x: np.ndarray,
    b: float,
    spec: ModelSpec,
    evaluator: HarmonicEvaluator,
    rng: np.random.Generator,
    method: str = "exact",
) -> BiasedFamily:
    """Draw a family under the size-biased law and mark its spine child.

    ``exact`` draws N from n P(N = n) / E N, one child from the H-biased atom
    law and the rest from the plain atom law, then places the biased child at
    a uniform position.  ``rejection`` proposes plain families and accepts
    with probability sum H / (max N * max_j H_j); it needs bounded N.
    """
    if b < evaluator.lower:
        raise ConditionError("B", f"root position {b} lies outside [{evaluator.lower}, inf)")
    images, positions, h = _child_weights(spec, evaluator, x, b)
    q = spec.weight_array
    biased = q * h
    total = float(biased.sum())
    if not total > 0:
        raise ConditionError("B", "no child can be born inside B")
    if method == "exact":
        n = int(spec.offspring.size_biased_sample(rng, 1)[0])
        atoms = rng.choice(spec.n_atoms, size=n, p=q)
        spine_atom = rng.choice(spec.n_atoms, p=biased / total)
        pos = int(rng.integers(n))
        atoms[pos] = spine_atom
        return BiasedFamily(X=images[atoms], S=positions[atoms], atoms=atoms, spine=pos)
    if method == "rejection":
        n_max = spec.offspring.max_count
        if n_max is None:
            raise ConditionError("rejection bound", "offspring law is unbounded")
        bound = n_max * float(h.max())
        for _ in range(MAX_REJECTION_ATTEMPTS):
            n = int(spec.offspring.sample(rng, 1)[0])
            atoms = rng.choice(spec.n_atoms, size=n, p=q)
            mass = float(h[atoms].sum())
            if rng.random() * bound < mass:
                spine = int(rng.choice(n, p=h[atoms] / mass))
                return BiasedFamily(X=images[atoms], S=positions[atoms], atoms=atoms, spine=spine)
        raise InsufficientSampleError(
            "rejection sampler", MAX_REJECTION_ATTEMPTS, "no proposal accepted"
        )
    raise ConfigError(f"unknown biased sampler {method!r}")


def biased_count_law(spec: ModelSpec) -> dict[int, float]:
    """Exact law of the size-biased child count for bounded offspring laws."""
    if spec.offspring.max_count is None:
        raise ConditionError("enumeration", "offspring law is unbounded")
    law = spec.offspring
    mean = law.mean
    return {c: c * p / mean for c, p in zip(law.counts, law.probs, strict=True) if c > 0}


def compare_biased_samplers(
    spec: ModelSpec,
    evaluator: HarmonicEvaluator,
    x: np.ndarray,
    b: float,
    draws: int,
    seed: int,
) -> float:
    """Chi-square p-value comparing the exact and rejection samplers on (N, atom multiset)."""
    counts: list[dict[tuple, int]] = []
    for idx, method in enumerate(("exact", "rejection")):
        rng = replica_rng(seed, idx)
        tally: dict[tuple, int] = {}
        for _ in range(draws):
            fam = sample_biased_generation(x, b, spec, evaluator, rng, method)
            key = (fam.size, *sorted(int(a) for a in fam.atoms))
            tally[key] = tally.get(key, 0) + 1
        counts.append(tally)
    keys = sorted(set(counts[0]) | set(counts[1]))
    table = np.array([[c.get(k, 0) for k in keys] for c in counts], dtype=float)
    # Pool sparse categories so expected counts stay above 5.
    big = table.sum(axis=0) >= 10
    pooled = np.column_stack([table[:, big], table[:, ~big].sum(axis=1)])
    pooled = pooled[:, pooled.sum(axis=0) > 0]
    if pooled.shape[1] < 2:
        return 1.0
    return float(stats.chi2_contingency(pooled)[1])


# ------------------------------------------------------------------
# Spinal simulation
# ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class SpineStep:
    k: int
    w: int
    X: np.ndarray
    S: float
    count: int
    siblings_X: np.ndarray
    siblings_S: np.ndarray

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "w": self.w,
            "X": self.X.tolist(),
            "S": self.S,
            "count": self.count,
            "siblings": [
                {"X": x.tolist(), "S": float(s)}
                for x, s in zip(self.siblings_X, self.siblings_S, strict=True)
            ],
        }


@dataclass
class SpinePath:
    x0: np.ndarray
    b0: float
    steps: list[SpineStep] = field(default_factory=list)

    @property
    def S(self) -> np.ndarray:
        return np.array([self.b0] + [st.S for st in self.steps])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(st.to_dict(), sort_keys=True) + "\n" for st in self.steps)


def spinal_generations(
    x: np.ndarray,
    b: float,
    spec: ModelSpec,
    evaluator: HarmonicEvaluator,
    depth: int,
    rng: np.random.Generator,
    path: SpinePath,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
    grow_subtrees: bool = True,
    method: str = "exact",
) -> Iterator[tuple[GenerationSnapshot, int]]:
    """Yield (generation, spine index) pairs while appending to ``path``."""
    if depth < 1:
        raise ConfigError(f"spinal depth must be at least 1, got: {depth}")
    snap = root_snapshot(x, b, spec.d)
    spine = 0
    yield snap, spine
    for n in range(1, depth + 1):
        fam = sample_biased_generation(
            snap.X[spine], float(snap.S[spine]), spec, evaluator, rng, method
        )
        others = np.flatnonzero(np.arange(snap.population) != spine)
        if grow_subtrees and others.size:
            sub = GenerationSnapshot(
                n=snap.n,
                X=snap.X[others],
                S=snap.S[others],
                min_prefix=snap.min_prefix[others],
            )
            plain = step_generation(spec, sub, rng, particle_cap)
            assert plain.parent is not None and plain.atom is not None
            plain_parent = others[plain.parent]
            plain_atom = plain.atom
            plain_X, plain_S, plain_min = plain.X, plain.S, plain.min_prefix
        else:
            plain_parent = np.empty(0, dtype=np.int64)
            plain_atom = np.empty(0, dtype=np.int64)
            plain_X, plain_S, plain_min = np.empty((0, spec.d)), np.empty(0), np.empty(0)
        total = plain_S.shape[0] + fam.size
        if total > particle_cap:
            raise PopulationCapError(generation=n, count=total, cap=particle_cap)
        fam_min = np.minimum(snap.min_prefix[spine], fam.S)
        snap = GenerationSnapshot(
            n=n,
            X=np.concatenate([plain_X, fam.X]),
            S=np.concatenate([plain_S, fam.S]),
            min_prefix=np.concatenate([plain_min, fam_min]),
            parent=np.concatenate([plain_parent, np.full(fam.size, spine)]),
            atom=np.concatenate([plain_atom, fam.atoms]),
        )
        sib = np.arange(fam.size) != fam.spine
        path.steps.append(
            SpineStep(
                k=n,
                w=fam.spine + 1,
                X=fam.X[fam.spine],
                S=float(fam.S[fam.spine]),
                count=fam.size,
                siblings_X=fam.X[sib],
                siblings_S=fam.S[sib],
            )
        )
        spine = plain_S.shape[0] + fam.spine
        yield snap, spine


def simulate_with_spine(
    x: np.ndarray,
    b: float,
    spec: ModelSpec,
    evaluator: HarmonicEvaluator,
    depth: int,
    rng: np.random.Generator,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
    keep_tree: bool = True,
    grow_subtrees: bool = True,
    method: str = "exact",
) -> tuple[SpinePath, list[GenerationSnapshot]]:
    """Run the spinal construction; returns the spine and the generations
    (all of them, or only the last when ``keep_tree`` is false)."""
    path = SpinePath(x0=np.asarray(x, dtype=float), b0=float(b))
    kept: list[GenerationSnapshot] = []
    for snap, _ in spinal_generations(
        x, b, spec, evaluator, depth, rng, path, particle_cap, grow_subtrees, method
    ):
        if keep_tree:
            kept.append(snap)
        else:
            kept = [snap]
    return path, kept


# ------------------------------------------------------------------
# Verifiers
# ------------------------------------------------------------------


ParticleFunctional = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def f_one(X: np.ndarray, S: np.ndarray, min_prefix: np.ndarray) -> np.ndarray:
    return np.ones_like(S)


@dataclass(frozen=True, slots=True)
class AboveLevel:
    """Indicator that the particle's position is at least ``level``."""

    level: float

    def __call__(self, X: np.ndarray, S: np.ndarray, min_prefix: np.ndarray) -> np.ndarray:
        return (S >= self.level).astype(float)


def many_to_one_one_step(
    spec: ModelSpec,
    data: SpectralData,
    x: np.ndarray,
    b: float,
    f: ParticleFunctional = f_one,
) -> tuple[float, float]:
    """Both sides of the many-to-one identity at n = 1 as exact atomic sums."""
    kernel = tilted_weights(spec, data, np.asarray(x).reshape(1, -1))
    images = kernel.images[:, 0, :]
    positions = b - kernel.cocycles[:, 0]
    values = f(images, positions, np.minimum(positions, b))
    masses = spec.offspring_mean * spec.weight_array
    lhs = float(np.sum(masses * values))
    r_x = float(data.r_at(np.asarray(x).reshape(1, -1))[0])
    weight = data.m_s * r_x * np.exp(data.s * (positions - b)) / data.r_at(images)
    rhs = float(np.sum(kernel.weights[0] * values * weight))
    return lhs, rhs


def verify_many_to_one(
    spec: ModelSpec,
    data: SpectralData,
    x: np.ndarray,
    b: float,
    n: int,
    replicas: int,
    seed: int,
    f: ParticleFunctional = f_one,
    statistic: str = "one",
) -> Comparison:
    """E_{x,b} sum_{|u|=n} f against r(x) m^n E_Q[f e^{s(S_n - b)} / r(X_n)]."""
    if not 1 <= n <= MAX_MANY_TO_ONE_DEPTH:
        raise ConfigError(f"many-to-one depth must be in [1, {MAX_MANY_TO_ONE_DEPTH}]")
    lhs = np.zeros(replicas)
    for rep in range(replicas):
        rng = replica_rng(seed, rep)
        *_, last = simulate_tree(spec, x, b, n, rng)
        if last.survived:
            lhs[rep] = float(np.sum(f(last.X, last.S, last.min_prefix)))
    rng = replica_rng(seed, replicas)
    X = np.tile(cone.as_direction(x), (replicas, 1))
    S = np.full(replicas, float(b))
    low = S.copy()
    for _ in range(n):
        X, S, _ = tilted_step_batch(spec, data, X, S, rng)
        low = np.minimum(low, S)
    r_x = float(data.r_at(np.asarray(x).reshape(1, -1))[0])
    weight = r_x * data.m_s**n * np.exp(data.s * (S - b)) / data.r_at(X)
    rhs = f(X, S, low) * weight
    return Comparison(
        f"many_to_one[{statistic}](n={n})",
        estimate_of(lhs, seed),
        estimate_of(rhs, seed),
    )


SPINAL_STATISTICS = (
    "one",
    "population",
    "exp_sum",
    "tanh_min",
    "min_nonnegative",
    "at_least_two",
    "fraction_nonnegative",
    "laplace_W",
)


def _tree_statistics(snap: GenerationSnapshot, boundary: BoundaryData) -> np.ndarray:
    """The fixed battery of bounded tree statistics, in SPINAL_STATISTICS order."""
    if not snap.survived:
        return np.array([1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
    weight = np.exp(-boundary.alpha * snap.S)
    w_alpha = float(np.sum(weight * boundary.r_at(snap.X)))
    return np.array(
        [
            1.0,
            float(min(snap.population, 100)),
            float(min(weight.sum(), 1e3)),
            math.tanh(snap.min_position),
            float(snap.min_position >= 0),
            float(snap.population >= 2),
            float(np.mean(snap.S >= 0)),
            math.exp(-w_alpha),
        ]
    )


def verify_spinal_measure(
    spec: ModelSpec,
    boundary: BoundaryData,
    x: np.ndarray,
    b: float,
    evaluator: HarmonicEvaluator,
    n: int,
    replicas: int,
    seed: int,
) -> list[Comparison]:
    """Spinal sampler expectations against E[M_n^h T] / H(x, b) from plain trees."""
    if not 1 <= n <= MAX_SPINAL_DEPTH:
        raise ConfigError(f"spinal verification depth must be in [1, {MAX_SPINAL_DEPTH}]")
    h0 = evaluator.H_point(x, b)
    spinal = np.empty((replicas, len(SPINAL_STATISTICS)))
    plain = np.empty((replicas, len(SPINAL_STATISTICS)))
    for rep in range(replicas):
        _, last = simulate_with_spine(
            x, b, spec, evaluator, n, replica_rng(seed, 2 * rep), keep_tree=False
        )
        spinal[rep] = _tree_statistics(last[-1], boundary)
        *_, snap = simulate_tree(spec, x, b, n, replica_rng(seed, 2 * rep + 1))
        plain[rep] = h_martingale(snap, evaluator) * _tree_statistics(snap, boundary) / h0
    relative = evaluator.certified_error / max(float(evaluator.h(
        np.asarray(x).reshape(1, -1), np.array([b])
    )[0]), 1e-300)
    out = []
    for i, name in enumerate(SPINAL_STATISTICS):
        rhs = estimate_of(plain[:, i], seed)
        out.append(
            Comparison(
                f"spinal[{name}](n={n})",
                estimate_of(spinal[:, i], seed),
                rhs,
                slack=relative * abs(rhs.value),
            )
        )
    return out


@dataclass(frozen=True)
class SupermartingaleReport:
    increments: tuple[Estimate, ...]

    @property
    def passed(self) -> bool:
        return all(e.value <= 3 * e.se for e in self.increments)

    def to_dict(self) -> dict:
        return {
            "statistic": "inverse_M_h_increments",
            "increments": [e.to_dict() for e in self.increments],
            "pass": self.passed,
        }


def supermartingale_check(
    spec: ModelSpec,
    x: np.ndarray,
    b: float,
    evaluator: HarmonicEvaluator,
    depth: int,
    replicas: int,
    seed: int,
) -> SupermartingaleReport:
    """Replica means of 1/M_{n+1}^h - 1/M_n^h under the spinal measure."""
    inv = np.empty((replicas, depth + 1))
    for rep in range(replicas):
        path = SpinePath(x0=np.asarray(x, dtype=float), b0=b)
        gens = spinal_generations(
            x, b, spec, evaluator, depth, replica_rng(seed, rep), path
        )
        for n, (snap, _) in enumerate(gens):
            inv[rep, n] = 1.0 / h_martingale(snap, evaluator)
    return SupermartingaleReport(
        increments=tuple(estimate_of(inv[:, n + 1] - inv[:, n], seed) for n in range(depth))
    )


def spine_marginal_ks(
    spec: ModelSpec,
    boundary: BoundaryData,
    x: np.ndarray,
    b: float,
    depths: tuple[int, ...],
    paths: int,
    seed: int,
    grow_subtrees: bool = True,
) -> dict[int, tuple[float, float]]:
    """Two-sample KS (statistic, p-value) of the spine position against the
    tilted chain at each depth, for h = 1."""
    evaluator = HarmonicEvaluator.constant_one(boundary)
    horizon = max(depths)
    spine_S = np.empty((paths, horizon + 1))
    for rep in range(paths):
        path, _ = simulate_with_spine(
            x,
            b,
            spec,
            evaluator,
            horizon,
            replica_rng(seed, rep),
            keep_tree=False,
            grow_subtrees=grow_subtrees,
        )
        spine_S[rep] = path.S
    chain = tilted_paths(
        spec, boundary.spectral, x, b, horizon, paths, replica_rng(seed, paths)
    )
    out = {}
    for n in depths:
        res = stats.ks_2samp(spine_S[:, n], chain.S[:, n])
        out[n] = (float(res.statistic), float(res.pvalue))
    logger.info("spine marginals compared", extra={"depths": list(depths), "paths": paths})
    return out

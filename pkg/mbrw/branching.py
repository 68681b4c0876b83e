"""Forward simulation of the branching walk and its martingale functionals."""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from mbrw import cone
from mbrw.errors import ConfigError, PopulationCapError
from mbrw.model import ModelSpec, intensity, sample_families
from mbrw.seeds import replica_rng
from mbrw.spectral import BoundaryData, SpectralData
from mbrw.stats import Estimate, estimate_of

if TYPE_CHECKING:
    from mbrw.spine import HarmonicEvaluator

logger = logging.getLogger(__name__)

DEFAULT_PARTICLE_CAP = 2_000_000


# ------------------------------------------------------------------
# Tree state
# ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ParticleRecord:
    label: tuple[int, ...] | None
    X: np.ndarray
    S: float
    min_S_prefix: float
    min_S_suffix_from_k: dict[int, float]


@dataclass(frozen=True, eq=False)
class GenerationSnapshot:
    """All particles of generation ``n``, stored column-wise.

    ``parent`` indexes the previous snapshot and ``atom`` the atom each
    particle was born with (both None at the root).  ``min_prefix`` is the
    minimum of S along the ancestral line including the root;
    ``min_suffix[k]`` restricts that minimum to generations >= k and is
    +inf before generation k.
    """

    n: int
    X: np.ndarray
    S: np.ndarray
    min_prefix: np.ndarray
    min_suffix: dict[int, np.ndarray] = field(default_factory=dict)
    parent: np.ndarray | None = None
    atom: np.ndarray | None = None
    labels: list[tuple[int, ...]] | None = None
    pruned_bound: float = 0.0

    @property
    def population(self) -> int:
        return int(self.S.shape[0])

    @property
    def survived(self) -> bool:
        return self.population > 0

    @property
    def min_position(self) -> float:
        return float(self.S.min()) if self.survived else math.inf

    def particle(self, i: int) -> ParticleRecord:
        return ParticleRecord(
            label=self.labels[i] if self.labels is not None else None,
            X=self.X[i],
            S=float(self.S[i]),
            min_S_prefix=float(self.min_prefix[i]),
            min_S_suffix_from_k={k: float(v[i]) for k, v in self.min_suffix.items()},
        )


@dataclass(frozen=True, slots=True)
class Pruning:
    """Drop particles whose weight e^{-alpha S} (1 + S^+) falls below ``eps``."""

    alpha: float
    eps: float


def root_snapshot(
    x0: np.ndarray,
    b0: float,
    d: int,
    suffix_from: Sequence[int] = (),
    track_labels: bool = False,
) -> GenerationSnapshot:
    x = cone.as_direction(x0).reshape(1, d)
    S = np.array([float(b0)])
    return GenerationSnapshot(
        n=0,
        X=x,
        S=S,
        min_prefix=S.copy(),
        min_suffix={k: (S.copy() if k == 0 else np.full(1, math.inf)) for k in suffix_from},
        labels=[()] if track_labels else None,
    )


def step_generation(
    spec: ModelSpec,
    current: GenerationSnapshot,
    rng: np.random.Generator,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
    track_labels: bool = False,
    pruning: Pruning | None = None,
) -> GenerationSnapshot:
    """Let every particle of ``current`` reproduce once."""
    n = current.n + 1
    counts, atom_idx = sample_families(spec, rng, current.population)
    total = int(atom_idx.shape[0])
    if total > particle_cap:
        raise PopulationCapError(generation=n, count=total, cap=particle_cap)
    parent = np.repeat(np.arange(current.population), counts)
    if total:
        X, coc = cone.act_stacked(spec.scaled_atoms[atom_idx], current.X[parent])
    else:
        X, coc = np.empty((0, spec.d)), np.empty(0)
    S = current.S[parent] - coc
    min_prefix = np.minimum(current.min_prefix[parent], S)
    min_suffix = {}
    for k, prev in current.min_suffix.items():
        if n < k:
            min_suffix[k] = np.full(total, math.inf)
        else:
            min_suffix[k] = np.minimum(prev[parent], S)
    labels = None
    if track_labels and current.labels is not None:
        offsets = np.repeat(np.cumsum(counts) - counts, counts)
        ranks = np.arange(total) - offsets + 1
        labels = [current.labels[p] + (int(r),) for p, r in zip(parent, ranks, strict=True)]
    pruned = current.pruned_bound
    if pruning is not None and total:
        weight = np.exp(-pruning.alpha * S) * (1.0 + np.maximum(S, 0.0))
        keep = weight >= pruning.eps
        dropped = int(total - keep.sum())
        if dropped:
            pruned += pruning.eps * dropped
            parent, atom_idx, X, S, min_prefix = (
                parent[keep], atom_idx[keep], X[keep], S[keep], min_prefix[keep]
            )
            min_suffix = {k: v[keep] for k, v in min_suffix.items()}
            if labels is not None:
                labels = [lab for lab, kept in zip(labels, keep, strict=True) if kept]
    return GenerationSnapshot(
        n=n,
        X=X,
        S=S,
        min_prefix=min_prefix,
        min_suffix=min_suffix,
        parent=parent,
        atom=atom_idx,
        labels=labels,
        pruned_bound=pruned,
    )


def simulate_tree(
    spec: ModelSpec,
    x0: np.ndarray,
    b0: float,
    depth: int,
    rng: np.random.Generator,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
    suffix_from: Sequence[int] = (),
    track_labels: bool = False,
    pruning: Pruning | None = None,
) -> Iterator[GenerationSnapshot]:
    """Yield generations 0..depth breadth first under P_{x0, b0}.

    Only the current generation is held; extinct trees keep yielding empty
    generations so folds see every depth.
    """
    if depth < 0:
        raise ConfigError(f"depth must be nonnegative, got: {depth}")
    current = root_snapshot(x0, b0, spec.d, suffix_from, track_labels)
    yield current
    for _ in range(depth):
        current = step_generation(spec, current, rng, particle_cap, track_labels, pruning)
        yield current


# ------------------------------------------------------------------
# Functionals
# ------------------------------------------------------------------


def additive_martingale(snapshot: GenerationSnapshot, data: SpectralData) -> float:
    """W_n(s) = m(s)^{-n} sum_u e^{-s S_u} r_s(X_u)."""
    if not snapshot.survived:
        return 0.0
    total = float(np.sum(np.exp(-data.s * snapshot.S) * data.r_at(snapshot.X)))
    return total * data.m_s ** (-snapshot.n)


def derivative_martingale(snapshot: GenerationSnapshot, boundary: BoundaryData) -> float:
    """D_n = sum_u (S_u + ell(X_u)) e^{-alpha S_u} r_alpha(X_u)."""
    if not snapshot.survived:
        return 0.0
    weight = np.exp(-boundary.alpha * snapshot.S) * boundary.r_at(snapshot.X)
    return float(np.sum((snapshot.S + boundary.ell_at(snapshot.X)) * weight))


def killed_martingale(snapshot: GenerationSnapshot, boundary: BoundaryData) -> float:
    """W~_n alone, without suffix tracking."""
    if not snapshot.survived:
        return 0.0
    alive = snapshot.min_prefix >= 0
    if not np.any(alive):
        return 0.0
    return float(
        np.sum(
            np.exp(-boundary.alpha * snapshot.S[alive]) * boundary.r_at(snapshot.X[alive])
        )
    )


def truncated_martingales(
    snapshot: GenerationSnapshot, boundary: BoundaryData, k: int
) -> tuple[float, float]:
    """(W~_n, W~~_{n,k}): the additive martingale at alpha restricted to
    particles whose ancestral path (from the root, respectively from
    generation k) stayed nonnegative."""
    if not snapshot.survived:
        return 0.0, 0.0
    if k not in snapshot.min_suffix:
        raise ConfigError(f"suffix minima from generation {k} were not tracked")
    weight = np.exp(-boundary.alpha * snapshot.S) * boundary.r_at(snapshot.X)
    killed = float(np.sum(weight[snapshot.min_prefix >= 0]))
    from_k = float(np.sum(weight[snapshot.min_suffix[k] >= 0]))
    return killed, from_k


def h_martingale(
    snapshot: GenerationSnapshot, evaluator: HarmonicEvaluator
) -> float:
    """M_n^h = sum of H_alpha(X_u, S_u) over particles whose path stayed in B."""
    if not snapshot.survived:
        return 0.0
    inside = snapshot.min_prefix >= evaluator.lower
    if not np.any(inside):
        return 0.0
    return float(np.sum(evaluator.H(snapshot.X[inside], snapshot.S[inside])))


# ------------------------------------------------------------------
# Folding replicas
# ------------------------------------------------------------------


@dataclass(frozen=True)
class MartingaleRequest:
    """Which functionals to record along a simulated tree."""

    spectral: tuple[SpectralData, ...] = ()
    boundary: BoundaryData | None = None
    evaluator: HarmonicEvaluator | None = None
    suffix_from: tuple[int, ...] = ()

    def names(self) -> list[str]:
        names = [f"W({d.s:g})" for d in self.spectral]
        if self.boundary is not None:
            names += ["D", "W_alpha", "W_tilde"]
            names += [f"W_tilde_tilde({k})" for k in self.suffix_from]
        if self.evaluator is not None:
            names.append("M_h")
        return names


@dataclass
class MartingaleSeries:
    """Per-generation values of the requested functionals for one tree."""

    replica: int
    values: dict[str, list[float]] = field(default_factory=dict)
    population: list[int] = field(default_factory=list)
    min_position: list[float] = field(default_factory=list)

    def record(self, name: str, value: float) -> None:
        self.values.setdefault(name, []).append(value)

    def rows(self) -> Iterator[tuple[int, int, str, float, int]]:
        """(replica, n, name, value, population) in generation-major order."""
        for n, pop in enumerate(self.population):
            for name in sorted(self.values):
                yield self.replica, n, name, self.values[name][n], pop


def fold_martingales(
    snapshots: Iterator[GenerationSnapshot],
    request: MartingaleRequest,
    replica: int = 0,
) -> MartingaleSeries:
    series = MartingaleSeries(replica=replica)
    for snap in snapshots:
        series.population.append(snap.population)
        series.min_position.append(snap.min_position)
        for data in request.spectral:
            series.record(f"W({data.s:g})", additive_martingale(snap, data))
        if request.boundary is not None:
            b = request.boundary
            series.record("D", derivative_martingale(snap, b))
            series.record("W_alpha", additive_martingale(snap, b.spectral))
            series.record("W_tilde", killed_martingale(snap, b))
            for k in request.suffix_from:
                series.record(f"W_tilde_tilde({k})", truncated_martingales(snap, b, k)[1])
        if request.evaluator is not None:
            series.record("M_h", h_martingale(snap, request.evaluator))
    return series


def simulate_martingales(
    replica: int,
    spec: ModelSpec,
    x0: np.ndarray,
    b0: float,
    depth: int,
    request: MartingaleRequest,
    seed: int,
    particle_cap: int = DEFAULT_PARTICLE_CAP,
    pruning: Pruning | None = None,
) -> MartingaleSeries:
    """One replica: simulate a tree with its own stream and fold the functionals."""
    rng = replica_rng(seed, replica)
    stream = simulate_tree(
        spec,
        x0,
        b0,
        depth,
        rng,
        particle_cap=particle_cap,
        suffix_from=request.suffix_from,
        pruning=pruning,
    )
    return fold_martingales(stream, request, replica)


def summarize(series: Sequence[MartingaleSeries], seed: int | None = None) -> dict:
    """Mean and SE of every functional at every generation over replicas."""
    if not series:
        return {}
    out: dict[str, list[dict]] = {}
    for name in sorted(series[0].values):
        matrix = np.array([s.values[name] for s in series])
        out[name] = [estimate_of(matrix[:, n], seed).to_dict() for n in range(matrix.shape[1])]
    return out


def martingale_increments(series: Sequence[MartingaleSeries], name: str) -> list[Estimate]:
    """Replica means of F_{n+1} - F_n for each lag."""
    matrix = np.array([s.values[name] for s in series])
    return [estimate_of(matrix[:, n + 1] - matrix[:, n]) for n in range(matrix.shape[1] - 1)]


# ------------------------------------------------------------------
# Exchangeability
# ------------------------------------------------------------------


def _position_weighted_trace(mats: Sequence[np.ndarray]) -> float:
    return float(sum((k + 1) * np.trace(g) for k, g in enumerate(mats)))


@dataclass(frozen=True)
class ExchangeabilityReport:
    n: int
    exact: float
    forward: Estimate
    reversed: Estimate

    @property
    def passed(self) -> bool:
        return self.forward.agrees_with(self.exact) and self.reversed.agrees_with(self.exact)

    def to_dict(self) -> dict:
        return {
            "statistic": f"exchangeability(n={self.n})",
            "exact": self.exact,
            "forward": self.forward.to_dict(),
            "reversed": self.reversed.to_dict(),
            "pass": self.passed,
        }


def exact_path_sum(
    spec: ModelSpec, n: int, f: Callable[[Sequence[np.ndarray]], float]
) -> float:
    """Integral of f(g_1, ..., g_n) against the n-fold product of the intensity."""
    mu = intensity(spec)
    total = 0.0
    for word in itertools.product(range(spec.n_atoms), repeat=n):
        mass = math.prod(float(mu.masses[j]) for j in word)
        if mass:
            total += mass * f([mu.atoms[j] for j in word])
    return total


def verify_exchangeability(
    spec: ModelSpec,
    x0: np.ndarray,
    n: int,
    replicas: int,
    seed: int,
    f: Callable[[Sequence[np.ndarray]], float] = _position_weighted_trace,
) -> ExchangeabilityReport:
    """Compare E sum_{|u|=n} f(g_{u|1}, ..., g_u) and its reversed-order version
    with the exact product-intensity value."""
    scaled = spec.scaled_atoms
    forward = np.zeros(replicas)
    backward = np.zeros(replicas)
    for rep in range(replicas):
        rng = replica_rng(seed, rep)
        history: list[GenerationSnapshot] = list(simulate_tree(spec, x0, 0.0, n, rng))
        last = history[-1]
        for i in range(last.population):
            word = []
            idx = i
            for snap in reversed(history[1:]):
                assert snap.atom is not None and snap.parent is not None
                word.append(int(snap.atom[idx]))
                idx = int(snap.parent[idx])
            word.reverse()
            mats = [scaled[j] for j in word]
            forward[rep] += f(mats)
            backward[rep] += f(mats[::-1])
    return ExchangeabilityReport(
        n=n,
        exact=exact_path_sum(spec, n, f),
        forward=estimate_of(forward, seed),
        reversed=estimate_of(backward, seed),
    )

"""Reproduction laws: offspring counts, matrix atoms, intensity and model documents."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from mbrw import cone
from mbrw.errors import (
    ArtifactError,
    ConditionError,
    InvariantViolation,
    ModelValidationError,
)

logger = logging.getLogger(__name__)

PROB_TOL = 1e-12
POISSON_CAP = 1_000_000
LATTICE_TOL = 1e-9
# Spans shorter than this are treated as "no lattice" by the A2 heuristic.
MIN_LATTICE_SPAN = 1e-6


# ------------------------------------------------------------------
# Offspring laws
# ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class OffspringLaw:
    """Law of the number of children N.

    ``kind`` is ``deterministic``, ``finite`` or ``poisson``.  Finite and
    deterministic laws are stored as (counts, probs); Poisson keeps its mean.
    """

    kind: str
    counts: tuple[int, ...] = ()
    probs: tuple[float, ...] = ()
    poisson_mean: float = 0.0

    @classmethod
    def deterministic(cls, n: int) -> OffspringLaw:
        if n < 0:
            raise ValueError(f"offspring count must be nonnegative, got: {n}")
        return cls(kind="deterministic", counts=(int(n),), probs=(1.0,))

    @classmethod
    def finite(cls, support: Sequence[tuple[int, float]]) -> OffspringLaw:
        if not support:
            raise ValueError("finite offspring law needs at least one count")
        merged: dict[int, float] = {}
        for count, prob in support:
            if int(count) != count or count < 0:
                raise ValueError(f"offspring counts must be nonnegative integers: {count!r}")
            if not prob >= 0:
                raise ValueError(f"offspring probabilities must be nonnegative: {prob!r}")
            merged[int(count)] = merged.get(int(count), 0.0) + float(prob)
        total = sum(merged.values())
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"offspring probabilities sum to {total!r}, not 1")
        items = sorted((c, p) for c, p in merged.items() if p > 0)
        return cls(
            kind="finite",
            counts=tuple(c for c, _ in items),
            probs=tuple(p for _, p in items),
        )

    @classmethod
    def poisson(cls, mean: float) -> OffspringLaw:
        if not mean > 0 or not math.isfinite(mean):
            raise ValueError(f"poisson mean must be positive and finite, got: {mean!r}")
        return cls(kind="poisson", poisson_mean=float(mean))

    @property
    def mean(self) -> float:
        if self.kind == "poisson":
            return self.poisson_mean
        return float(sum(c * p for c, p in zip(self.counts, self.probs, strict=True)))

    @property
    def max_count(self) -> int | None:
        """Largest possible count, or None for unbounded laws."""
        if self.kind == "poisson":
            return None
        return max(self.counts)

    def pmf(self, n: int) -> float:
        if self.kind == "poisson":
            return float(stats.poisson.pmf(n, self.poisson_mean))
        for c, p in zip(self.counts, self.probs, strict=True):
            if c == n:
                return p
        return 0.0

    def pgf(self, q: float) -> float:
        if self.kind == "poisson":
            return math.exp(self.poisson_mean * (q - 1.0))
        return float(sum(p * q**c for c, p in zip(self.counts, self.probs, strict=True)))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "deterministic":
            return np.full(size, self.counts[0], dtype=np.int64)
        if self.kind == "finite":
            idx = rng.choice(len(self.counts), size=size, p=self.probs)
            return np.asarray(self.counts, dtype=np.int64)[idx]
        draws = rng.poisson(self.poisson_mean, size=size).astype(np.int64)
        if size and int(draws.max()) > POISSON_CAP:
            raise InvariantViolation("poisson offspring cap", float(draws.max()), POISSON_CAP)
        return draws

    def size_biased_sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Sample from the law n P(N = n) / E N."""
        if self.kind == "poisson":
            return 1 + self.sample(rng, size)
        weights = np.asarray(self.counts, dtype=float) * np.asarray(self.probs)
        total = weights.sum()
        if total <= 0:
            raise ConditionError("A3", "size-biased law undefined when E N = 0")
        idx = rng.choice(len(self.counts), size=size, p=weights / total)
        return np.asarray(self.counts, dtype=np.int64)[idx]

    def with_mean(self, m: float) -> OffspringLaw:
        """Return a law of the same family with mean ``m``.

        Poisson laws keep their family; bounded laws become the two-point law
        on floor(m) and floor(m) + 1.
        """
        if not m > 0:
            raise ValueError(f"target mean must be positive, got: {m!r}")
        if self.kind == "poisson":
            return OffspringLaw.poisson(m)
        low = math.floor(m)
        frac = m - low
        if frac < PROB_TOL:
            return OffspringLaw.deterministic(int(low))
        return OffspringLaw.finite([(low, 1.0 - frac), (low + 1, frac)])

    def extinction_probability(self) -> float:
        """Smallest fixed point of the generating function in [0, 1]."""
        if self.mean <= 1.0:
            return 1.0
        if self.pmf(0) == 0.0:
            return 0.0
        return float(optimize.brentq(lambda q: self.pgf(q) - q, 0.0, 1.0 - 1e-12))

    def to_dict(self) -> dict:
        if self.kind == "poisson":
            return {"kind": "poisson", "mean": self.poisson_mean}
        if self.kind == "deterministic":
            return {"kind": "deterministic", "count": self.counts[0]}
        return {
            "kind": "finite",
            "support": [[c, p] for c, p in zip(self.counts, self.probs, strict=True)],
        }


# ------------------------------------------------------------------
# Model specification
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A reproduction law with i.i.d. children drawn from scaled matrix atoms."""

    d: int
    offspring: OffspringLaw
    atoms: tuple[np.ndarray, ...]
    weights: tuple[float, ...]
    scale_lambda: float = 1.0
    label: str = ""
    _stack: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.atoms) != len(self.weights) or not self.atoms:
            raise ModelValidationError("atoms", "need one weight per atom and at least one atom")
        for idx, atom in enumerate(self.atoms):
            try:
                g = cone.as_matrix(atom)
            except ConditionError as exc:
                raise ModelValidationError(f"atoms[{idx}].matrix", exc.detail) from None
            if g.shape != (self.d, self.d):
                raise ModelValidationError(
                    f"atoms[{idx}].matrix", f"shape {g.shape} does not match d={self.d}"
                )
            if np.any(g <= 0):
                raise ModelValidationError(
                    f"atoms[{idx}].matrix", "condition A1* requires strictly positive entries"
                )
        for idx, w in enumerate(self.weights):
            if not w >= 0:
                raise ModelValidationError(f"atoms[{idx}].weight", "weight must be nonnegative")
        total = float(sum(self.weights))
        if abs(total - 1.0) > PROB_TOL:
            raise ModelValidationError("atoms", f"weights sum to {total!r}, not 1")
        if not self.scale_lambda > 0 or not math.isfinite(self.scale_lambda):
            raise ModelValidationError("scale_lambda", "must be positive and finite")
        stack = np.stack([np.asarray(a, dtype=float) for a in self.atoms])
        stack.setflags(write=False)
        object.__setattr__(self, "_stack", stack)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def scaled_atoms(self) -> np.ndarray:
        """Stacked atoms times scale_lambda, shape (m, d, d)."""
        return self.scale_lambda * self._stack

    @property
    def offspring_mean(self) -> float:
        return self.offspring.mean

    def transposed(self) -> ModelSpec:
        """The model whose atoms are the transposes g* of this model's atoms."""
        return ModelSpec(
            d=self.d,
            offspring=self.offspring,
            atoms=tuple(np.ascontiguousarray(a.T) for a in self._stack),
            weights=self.weights,
            scale_lambda=self.scale_lambda,
            label=f"{self.label} (dual)" if self.label else "dual",
        )

    def with_scale(self, scale_lambda: float) -> ModelSpec:
        return ModelSpec(
            d=self.d,
            offspring=self.offspring,
            atoms=self.atoms,
            weights=self.weights,
            scale_lambda=scale_lambda,
            label=self.label,
        )

    def with_offspring(self, offspring: OffspringLaw) -> ModelSpec:
        return ModelSpec(
            d=self.d,
            offspring=offspring,
            atoms=self.atoms,
            weights=self.weights,
            scale_lambda=self.scale_lambda,
            label=self.label,
        )

    def fk(self) -> cone.FKConstants:
        return cone.fk_constants(list(self._stack), self.d)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "offspring": self.offspring.to_dict(),
            "atoms": [
                {"matrix": np.asarray(a, dtype=float).tolist(), "weight": w}
                for a, w in zip(self.atoms, self.weights, strict=True)
            ],
            "scale_lambda": self.scale_lambda,
            "label": self.label,
        }


def model_hash(spec: ModelSpec) -> str:
    """SHA-256 of the canonical JSON form of ``spec``."""
    canonical = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ------------------------------------------------------------------
# Intensity and sampling
# ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IntensityMeasure:
    """Atomic intensity: mass E N * q_j at the scaled atom lambda * A_j."""

    atoms: np.ndarray
    masses: np.ndarray

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def integrate(self, f: Callable[[np.ndarray], float]) -> float:
        """Integral of a matrix function against the measure."""
        pairs = zip(self.atoms, self.masses, strict=True)
        return float(sum(m * f(g) for g, m in pairs))


def intensity(spec: ModelSpec) -> IntensityMeasure:
    return IntensityMeasure(
        atoms=spec.scaled_atoms,
        masses=spec.offspring_mean * spec.weight_array,
    )


def sample_generation(spec: ModelSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Draw one family: N from the offspring law, then N i.i.d. scaled atoms."""
    n = int(spec.offspring.sample(rng, 1)[0])
    if n == 0:
        return []
    idx = rng.choice(spec.n_atoms, size=n, p=spec.weights)
    scaled = spec.scaled_atoms
    return [scaled[j] for j in idx]


def sample_families(
    spec: ModelSpec, rng: np.random.Generator, n_parents: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw families for ``n_parents`` particles at once.

    Returns (counts, atom_indices) where children are laid out parent by
    parent, in parent order.
    """
    counts = spec.offspring.sample(rng, n_parents)
    total = int(counts.sum())
    atom_idx = rng.choice(spec.n_atoms, size=total, p=spec.weights)
    return counts, atom_idx


# ------------------------------------------------------------------
# Condition checks
# ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ConditionStatus:
    name: str
    status: str  # holds | fails | heuristic-pass | heuristic-fail | unchecked
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "status": self.status, "detail": self.detail}


@dataclass(frozen=True, slots=True)
class ConditionReport:
    conditions: tuple[ConditionStatus, ...]

    def status(self, name: str) -> str:
        for cond in self.conditions:
            if cond.name == name:
                return cond.status
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"conditions": [c.to_dict() for c in self.conditions]}


def lattice_span(values: Sequence[float], tol: float = LATTICE_TOL) -> float | None:
    """Return c > 0 when all values lie in one coset shift + c Z, else None.

    A single distinct value counts as arithmetic and returns ``inf``.
    """
    arr = np.asarray(values, dtype=float)
    diffs = np.abs(arr - arr[0])
    diffs = diffs[diffs > tol]
    if diffs.size == 0:
        return math.inf
    span = float(diffs[0])
    for delta in diffs[1:]:
        a, b = max(span, float(delta)), min(span, float(delta))
        while b > tol:
            r = math.fmod(a, b)
            if b - r <= tol:
                r = 0.0
            a, b = b, r
        span = a
        if span < MIN_LATTICE_SPAN:
            return None
    resid = diffs / span - np.round(diffs / span)
    if np.max(np.abs(resid)) * span > 10 * tol * max(1, diffs.size):
        return None
    return span


def check_conditions(
    spec: ModelSpec,
    m_alpha: tuple[float, float] | None = None,
    delta: float = 0.0,
) -> ConditionReport:
    """Evaluate conditions A1*-A5 for ``spec``.

    ``m_alpha`` is (M(alpha), M'(alpha)) from the spectral module when
    available; without it A3 is reported as unchecked unless E N <= 1.
    """
    results: list[ConditionStatus] = []
    scaled = spec.scaled_atoms

    try:
        fk = spec.fk()
        results.append(ConditionStatus("A1*", "holds", f"kappa={fk.kappa:.6g}"))
    except ConditionError as exc:
        results.append(ConditionStatus("A1*", "fails", exc.detail))
        fk = None

    roots: list[float] = []
    for length in (1, 2, 3):
        for word in itertools.product(range(spec.n_atoms), repeat=length):
            prod = np.eye(spec.d)
            for j in word:
                prod = scaled[j] @ prod
            roots.append(math.log(cone.perron_root(prod)))
    span = lattice_span(roots)
    if span is None:
        results.append(
            ConditionStatus(
                "A2", "heuristic-pass", "log Perron roots up to length 3 not in one lattice"
            )
        )
    else:
        results.append(
            ConditionStatus(
                "A2", "heuristic-fail", f"log Perron roots lie in a lattice of span {span:.6g}"
            )
        )

    mean = spec.offspring_mean
    if mean <= 1.0:
        results.append(ConditionStatus("A3", "fails", f"E N = {mean:.6g} is not > 1"))
    elif m_alpha is None:
        results.append(ConditionStatus("A3", "unchecked", "no boundary data supplied"))
    else:
        value, slope = m_alpha
        ok = abs(value) <= 1e-8 and abs(slope) <= 1e-6
        results.append(
            ConditionStatus(
                "A3",
                "holds" if ok else "fails",
                f"M(alpha)={value:.3e}, M'(alpha)={slope:.3e}",
            )
        )

    if fk is not None:
        margins = [-math.log(cone.op_norm(g)) - fk.kappa_bar for g in scaled]
        best = max(margins)
        positive_weight = any(
            m > delta and w > 0 for m, w in zip(margins, spec.weights, strict=True)
        )
        results.append(
            ConditionStatus(
                "A4",
                "holds" if positive_weight else "fails",
                f"best margin delta={best:.6g}",
            )
        )
    else:
        results.append(ConditionStatus("A4", "unchecked", "A1* does not hold"))

    if spec.offspring.kind == "poisson":
        results.append(ConditionStatus("A5", "holds", "light tail"))
    else:
        results.append(ConditionStatus("A5", "holds", "finite model"))

    return ConditionReport(conditions=tuple(results))


# ------------------------------------------------------------------
# Model documents
# ------------------------------------------------------------------


def _require(doc: Mapping, key: str, path: str) -> object:
    if key not in doc:
        raise ModelValidationError(f"{path}{key}" if path else key, "missing field")
    return doc[key]


def _offspring_from_dict(raw: object) -> OffspringLaw:
    if not isinstance(raw, Mapping):
        raise ModelValidationError("offspring", "expected an object")
    kind = _require(raw, "kind", "offspring.")
    try:
        if kind == "deterministic":
            count = _require(raw, "count", "offspring.")
            if not isinstance(count, int) or isinstance(count, bool):
                raise ModelValidationError("offspring.count", "expected an integer")
            return OffspringLaw.deterministic(count)
        if kind == "poisson":
            mean = _require(raw, "mean", "offspring.")
            if not isinstance(mean, int | float):
                raise ModelValidationError("offspring.mean", "expected a number")
            return OffspringLaw.poisson(float(mean))
        if kind == "finite":
            support = _require(raw, "support", "offspring.")
            if not isinstance(support, list):
                raise ModelValidationError("offspring.support", "expected a list")
            pairs = []
            for i, item in enumerate(support):
                if not isinstance(item, list | tuple) or len(item) != 2:
                    raise ModelValidationError(
                        f"offspring.support[{i}]", "expected a [count, probability] pair"
                    )
                pairs.append((item[0], float(item[1])))
            return OffspringLaw.finite(pairs)
    except ValueError as exc:
        raise ModelValidationError("offspring", str(exc)) from None
    raise ModelValidationError("offspring.kind", f"unknown kind {kind!r}")


def parse_model(doc: object) -> ModelSpec:
    """Validate a model document and build a ModelSpec.

    Raises:
        ModelValidationError: For the first violation, with its path.
    """
    if not isinstance(doc, Mapping):
        raise ModelValidationError("", "model document must be an object")
    d = _require(doc, "d", "")
    if not isinstance(d, int) or isinstance(d, bool) or not 2 <= d <= cone.MAX_DIMENSION:
        raise ModelValidationError("d", f"expected an integer in [2, {cone.MAX_DIMENSION}]")
    offspring = _offspring_from_dict(_require(doc, "offspring", ""))
    raw_atoms = _require(doc, "atoms", "")
    if not isinstance(raw_atoms, list) or not raw_atoms:
        raise ModelValidationError("atoms", "expected a nonempty list")
    atoms: list[np.ndarray] = []
    weights: list[float] = []
    for i, raw in enumerate(raw_atoms):
        if not isinstance(raw, Mapping):
            raise ModelValidationError(f"atoms[{i}]", "expected an object")
        matrix = _require(raw, "matrix", f"atoms[{i}].")
        try:
            arr = np.asarray(matrix, dtype=float)
        except (TypeError, ValueError):
            raise ModelValidationError(f"atoms[{i}].matrix", "not a numeric matrix") from None
        if arr.shape != (d, d):
            raise ModelValidationError(f"atoms[{i}].matrix", f"expected shape ({d}, {d})")
        weight = _require(raw, "weight", f"atoms[{i}].")
        if not isinstance(weight, int | float) or isinstance(weight, bool):
            raise ModelValidationError(f"atoms[{i}].weight", "expected a number")
        atoms.append(arr)
        weights.append(float(weight))
    scale = doc.get("scale_lambda", 1.0)
    if not isinstance(scale, int | float) or isinstance(scale, bool):
        raise ModelValidationError("scale_lambda", "expected a number")
    label = doc.get("label", "")
    if not isinstance(label, str):
        raise ModelValidationError("label", "expected a string")
    return ModelSpec(
        d=d,
        offspring=offspring,
        atoms=tuple(atoms),
        weights=tuple(weights),
        scale_lambda=float(scale),
        label=label,
    )


def load_model(path: str | Path) -> ModelSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(str(path), exc.strerror or "unreadable") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArtifactError(str(path), f"invalid JSON: {exc.msg}") from None
    spec = parse_model(doc)
    logger.info(
        "model loaded",
        extra={"path": str(path), "label": spec.label, "atoms": spec.n_atoms, "d": spec.d},
    )
    return spec

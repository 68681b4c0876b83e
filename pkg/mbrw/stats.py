"""Monte Carlo estimates and mergeable moment accumulators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, slots=True)
class Estimate:
    """A Monte Carlo point estimate with its standard error."""

    value: float
    se: float
    replicas: int
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "se": self.se,
            "replicas": self.replicas,
            "seed": self.seed,
        }

    def agrees_with(self, other: Estimate | float, k: float = 3.0) -> bool:
        """True when the two values differ by at most ``k`` combined SE."""
        if isinstance(other, Estimate):
            return abs(self.value - other.value) <= k * combined_se(self, other)
        return abs(self.value - other) <= k * self.se


def combined_se(*estimates: Estimate) -> float:
    return math.sqrt(sum(e.se**2 for e in estimates))


@dataclass(slots=True)
class Moments:
    """Running count, sum, sum of squares and extremes.

    ``merge`` is associative and commutative up to float rounding; callers
    that need bit-identical output merge in replica order.
    """

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0
    maximum: float = -math.inf
    minimum: float = math.inf

    def add(self, value: float) -> None:
        self.count += 1
        self.total += value
        self.total_sq += value * value
        self.maximum = max(self.maximum, value)
        self.minimum = min(self.minimum, value)

    def add_many(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            return
        self.count += int(values.size)
        self.total += float(values.sum())
        self.total_sq += float(np.dot(values, values))
        self.maximum = max(self.maximum, float(values.max()))
        self.minimum = min(self.minimum, float(values.min()))

    def merge(self, other: Moments) -> Moments:
        return Moments(
            count=self.count + other.count,
            total=self.total + other.total,
            total_sq=self.total_sq + other.total_sq,
            maximum=max(self.maximum, other.maximum),
            minimum=min(self.minimum, other.minimum),
        )

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else math.nan

    @property
    def variance(self) -> float:
        if self.count < 2:
            return 0.0
        mean = self.mean
        var = (self.total_sq - self.count * mean * mean) / (self.count - 1)
        return max(var, 0.0)

    def estimate(self, seed: int | None = None) -> Estimate:
        se = math.sqrt(self.variance / self.count) if self.count else math.nan
        return Estimate(value=self.mean, se=se, replicas=self.count, seed=seed)


def estimate_of(values: np.ndarray, seed: int | None = None) -> Estimate:
    """Mean and standard error of a sample of i.i.d. replica values."""
    values = np.asarray(values, dtype=float)
    n = int(values.size)
    if n == 0:
        return Estimate(value=math.nan, se=math.nan, replicas=0, seed=seed)
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Estimate(value=float(values.mean()), se=se, replicas=n, seed=seed)


@dataclass(slots=True)
class SeriesAccumulator:
    """Per-index moments for quantities recorded at several depths."""

    by_key: dict[tuple, Moments] = field(default_factory=dict)

    def add(self, key: tuple, value: float) -> None:
        self.by_key.setdefault(key, Moments()).add(value)

    def estimates(self, seed: int | None = None) -> dict[tuple, Estimate]:
        return {k: m.estimate(seed) for k, m in sorted(self.by_key.items())}


MIN_REPLICAS = 30


@dataclass(frozen=True)
class Comparison:
    """Two estimates of the same quantity, agreeing within ``k`` combined SE."""

    statistic: str
    lhs: Estimate
    rhs: Estimate
    k: float = 3.0
    slack: float = 0.0

    @property
    def se(self) -> float:
        return combined_se(self.lhs, self.rhs)

    @property
    def status(self) -> str:
        sampled = [e for e in (self.lhs, self.rhs) if not _is_exact(e)]
        if any(e.replicas < MIN_REPLICAS for e in sampled):
            return "inconclusive"
        if not (math.isfinite(self.lhs.value) and math.isfinite(self.rhs.value)):
            return "inconclusive"
        gap = abs(self.lhs.value - self.rhs.value)
        return "pass" if gap <= self.k * self.se + self.slack else "fail"

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "lhs": self.lhs.value,
            "rhs": self.rhs.value,
            "se": self.se,
            "pass": self.passed,
            "status": self.status,
        }


def exact(value: float) -> Estimate:
    """An exactly known value, as an Estimate with zero error."""
    return Estimate(value=float(value), se=0.0, replicas=0)


def _is_exact(e: Estimate) -> bool:
    return e.replicas == 0 and e.se == 0.0

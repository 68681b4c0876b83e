"""Exception hierarchy.  Every error carries its context and a CLI exit code."""

from __future__ import annotations

# ------------------------------------------------------------------
# Roots
# ------------------------------------------------------------------


class MbrwError(Exception):
    exit_code = 2


class ConfigError(MbrwError):
    """Invalid flags, experiment settings or model documents."""

    exit_code = 1


class MathError(MbrwError):
    """A numerical or probabilistic precondition failed."""

    exit_code = 2


class ArtifactError(MbrwError):
    """An input or output file could not be read, written or decoded."""

    exit_code = 3

    def __init__(self, path: str, reason: str) -> None:
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


# ------------------------------------------------------------------
# Configuration
# ------------------------------------------------------------------


class ModelValidationError(ConfigError):
    """Raised for the first invariant violation found in a model document."""

    def __init__(self, path: str, reason: str) -> None:
        self.path = path
        self.reason = reason
        super().__init__(f"model invalid at {path or '<root>'}: {reason}")


# ------------------------------------------------------------------
# Mathematics
# ------------------------------------------------------------------


class ConditionError(MathError):
    """A structural condition on the matrices does not hold."""

    def __init__(self, condition: str, detail: str) -> None:
        self.condition = condition
        self.detail = detail
        super().__init__(f"condition {condition} violated: {detail}")


class ConvergenceError(MathError):
    def __init__(self, what: str, iterations: int, residual: float) -> None:
        self.what = what
        self.iterations = int(iterations)
        self.residual = float(residual)
        super().__init__(
            f"{what} did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )


class CalibrationError(MathError):
    def __init__(self, reason: str) -> None:
        self.reason = reason
        super().__init__(reason)


class InvariantViolation(MathError):
    """A deterministic check that must always hold was broken."""

    def __init__(self, check: str, value: float, bound: float) -> None:
        self.check = check
        self.value = float(value)
        self.bound = float(bound)
        super().__init__(f"{check}: value {value:.6e} exceeds bound {bound:.6e}")


class PopulationCapError(MathError):
    def __init__(self, generation: int, count: int, cap: int) -> None:
        self.generation = int(generation)
        self.count = int(count)
        self.cap = int(cap)
        super().__init__(
            f"population cap {cap} exceeded at generation {generation} "
            f"({count} particles)"
        )


class InsufficientSampleError(MathError):
    def __init__(self, what: str, observed: int, suggestion: str) -> None:
        self.what = what
        self.observed = int(observed)
        self.suggestion = suggestion
        super().__init__(f"{what}: only {observed} samples; {suggestion}")


class HorizonError(MathError):
    """The truncation tail of a series is too large relative to its value."""

    def __init__(self, horizon: int, tail: float, suggested: int) -> None:
        self.horizon = int(horizon)
        self.tail = float(tail)
        self.suggested = int(suggested)
        super().__init__(
            f"horizon {horizon} insufficient (tail bound {tail:.3e}); "
            f"try horizon >= {suggested}"
        )

from __future__ import annotations

import os
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class Config:
    """Immutable run configuration, loaded from environment variables."""

    threads: int
    cache_path: str
    log_level: str
    grid_size: int = 512
    particle_cap: int = 2_000_000
    seed: int = 20240101
    max_iter: int = 100_000
    eigen_tol: float = 1e-12

    @classmethod
    def from_env(cls) -> Config:
        """Build a Config from environment variables.

        Raises:
            ValueError: If a variable is malformed or out of range.
        """
        config = cls(
            threads=_int_env("MBRW_THREADS", 1),
            cache_path=os.environ.get("MBRW_CACHE_PATH", "data/mbrw-cache.db"),
            log_level=os.environ.get("LOG_LEVEL", "INFO"),
            grid_size=_int_env("MBRW_GRID_SIZE", 512),
            particle_cap=_int_env("MBRW_PARTICLE_CAP", 2_000_000),
            seed=_int_env("MBRW_SEED", 20240101),
        )
        config.validate()
        return config

    def with_overrides(self, **overrides: object) -> Config:
        """Return a copy with command-line values applied (``None`` means unset)."""
        updates = {k: v for k, v in overrides.items() if v is not None}
        config = replace(self, **updates)  # type: ignore[arg-type]
        config.validate()
        return config

    def validate(self) -> None:
        if self.threads < 1:
            raise ValueError(f"threads must be at least 1, got: {self.threads}")
        if self.grid_size < 8:
            raise ValueError(f"grid_size must be at least 8, got: {self.grid_size}")
        if self.particle_cap < 1:
            raise ValueError(f"particle_cap must be positive, got: {self.particle_cap}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got: {self.seed}")

    def log_summary(self) -> dict:
        """Return config values for the startup log line."""
        return {
            "threads": self.threads,
            "cache_path": self.cache_path,
            "log_level": self.log_level,
            "grid_size": self.grid_size,
            "particle_cap": self.particle_cap,
            "seed": self.seed,
        }


def _int_env(name: str, default: int) -> int:
    """Read an integer from an environment variable with a clear error."""
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got: {raw!r}") from None

from typing import Literal
from pathlib import Path
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # worker pool used by the fit orchestrator and the simulation harness
    workers: int = Field(1, ge=1)
    worker_kind: Literal["thread", "process"] = "thread"
    # chains inside one sampler run; 1 runs them sequentially
    chain_workers: int = Field(1, ge=1)

    # ML/REML optimizer
    optimizer_tolerance: float = Field(1e-8, gt=0)
    optimizer_restarts: int = Field(3, ge=1)
    optimizer_max_iter: int = Field(20000, ge=100)
    sigma_floor: float = Field(1e-6, gt=0)
    optimizer_seed: int = 20240101

    # bridge sampling fixed point
    bridge_tolerance: float = Field(1e-10, gt=0)
    bridge_max_iter: int = Field(1000, ge=1)

    # predictive criteria and stacking
    criteria_max_draws: int = Field(1000, ge=100)
    stacking_tolerance: float = Field(1e-8, gt=0)
    stacking_max_iter: int = Field(100_000, ge=1)

    # frequentist IRR intervals and model-averaged draws
    bootstrap_resamples: int = Field(500, ge=0)
    mixture_draws: int = Field(10_000, ge=100)

    log_level: str = "INFO"

    # component-local .env file (estimation/.env), overridable with IRR_* variables
    model_config = SettingsConfigDict(env_prefix="IRR_", env_file=str(Path(__file__).parent / ".env"))


# Lazy settings accessor to avoid import-time instantiation
_settings_instance = None


def get_settings() -> Settings:
    """Return a cached Settings instance.

    A malformed environment (e.g. IRR_WORKERS=abc) would make every import
    of the estimation package fail; in that case fall back to the defaults
    so library use and test collection still work.
    """
    global _settings_instance
    if _settings_instance is None:
        try:
            _settings_instance = Settings()
        except Exception:
            _settings_instance = Settings.model_construct()
    return _settings_instance


def reset_settings() -> None:
    """Drop the cached instance so the next `get_settings()` re-reads the environment."""
    global _settings_instance
    _settings_instance = None

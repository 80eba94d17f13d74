import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from estimation.averaging import AVERAGING_METHODS, SELECTION_METHODS
from shared.errors import SchemaError


class RunConfig(BaseSettings):
    command: Literal["fit", "simulate", "report"]
    # fit
    data: Optional[Path] = None
    covariates: List[str] = Field(default_factory=list)
    # off fits only the constant-mean half of the model space
    mean_covariates: bool = True
    # first entry is the primary analysis, the rest are sensitivity reruns
    prior: List[str] = Field(default_factory=lambda: ["medium"])
    chains: Optional[int] = Field(None, ge=2)
    warmup: Optional[int] = Field(None, ge=100)
    draws: Optional[int] = Field(None, ge=100)
    methods: Optional[List[str]] = None
    # simulate
    scenarios: Optional[List[str]] = None
    ratees: Optional[List[int]] = None
    ratings: Optional[List[int]] = None
    replications: Optional[int] = Field(None, ge=1)

    seed: int = Field(20240101, ge=0, lt=2 ** 64)
    out: Path = Path("irr-output")
    workers: Optional[int] = Field(None, ge=1)
    bootstrap: Optional[int] = Field(None, ge=0)
    # unset falls back to the engine setting (IRR_LOG_LEVEL)
    log_level: Optional[str] = None

    model_config = SettingsConfigDict(env_prefix="IRR_RUN_", env_file=str(Path(__file__).parent / ".env"))

    @model_validator(mode="after")
    def _command_inputs(self) -> "RunConfig":
        if self.command == "fit" and self.data is None:
            raise ValueError("fit requires --data")
        if self.methods is not None:
            unknown = [m for m in self.methods if m not in SELECTION_METHODS + AVERAGING_METHODS]
            if unknown:
                raise ValueError(f"unknown method(s): {', '.join(unknown)}")
        return self

    @property
    def selection_methods(self) -> List[str]:
        chosen = self.methods if self.methods is not None else list(SELECTION_METHODS)
        return [m for m in chosen if m in SELECTION_METHODS]

    @property
    def averaging_methods(self) -> List[str]:
        chosen = self.methods if self.methods is not None else list(AVERAGING_METHODS)
        return [m for m in chosen if m in AVERAGING_METHODS]


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Flat JSON object whose keys mirror the command-line flags."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise SchemaError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in raw.items()}


def load_run_config(command: str, flags: Dict[str, Any], config_file: Optional[Union[str, Path]] = None) -> RunConfig:
    """File values first, then every flag that was actually given."""
    values: Dict[str, Any] = read_config_file(config_file) if config_file else {}
    values.update({k: v for k, v in flags.items() if v is not None})
    values["command"] = command
    return RunConfig(**values)


__all__ = ["RunConfig", "read_config_file", "load_run_config"]

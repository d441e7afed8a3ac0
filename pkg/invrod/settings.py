import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import (
    BaseSettings,
    JsonConfigSettingsSource,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    SettingsError,
)

from .exceptions import ConfigError

SCHEMA_VERSION = 1


class SolverSettings(BaseModel):
    """Solver overrides, unset fields keep the scenario's own value"""

    dt: float | None = Field(default=None, gt=0, description="Time step (s)")
    newton_tol: float | None = Field(default=None, gt=0, description="Newton residual tolerance (N)")
    max_newton_iters: int | None = Field(default=None, ge=1, description="Newton iteration cap per step")
    max_steps: int | None = Field(default=None, ge=1, description="Relaxation step cap")
    relaxation_tol: float | None = Field(default=None, gt=0, description="Static residual tolerance (N)")
    ramp_fraction: float | None = Field(default=None, ge=0, le=1, description="Share of steps used to ramp loads")
    damping: float | None = Field(default=None, ge=0, description="Mass-proportional damping (1/s)")
    divergence_window: int | None = Field(default=None, ge=1, description="Consecutive residual increases")
    divergence_factor: float | None = Field(default=None, gt=1, description="Residual growth over the window")
    backtrack_halvings: int | None = Field(default=None, ge=0, description="Step halvings after a stall")
    max_cutbacks: int | None = Field(default=None, ge=0, description="Step subdivisions after a failed step")
    reanchor_rotation: float | None = Field(default=None, gt=0, description="Tangent turn that re-anchors frames (rad)")
    max_tangent_rotation: float | None = Field(default=None, gt=0, description="Opt-in admissibility cap (rad)")

    def overrides(self) -> dict:
        return self.model_dump(exclude_none=True)


class OutputSettings(BaseModel):
    directory: Path = Field(default=Path("out"), description="Directory for OBJ and CSV artifacts")
    export_every: int = Field(default=1, ge=1, description="Write an OBJ snapshot every k steps")


class Settings(BaseSettings):
    schema_version: int = Field(default=SCHEMA_VERSION, description="Configuration file schema version")
    threads: int = Field(default=1, ge=1, description="Threads used for element evaluation")
    solver: SolverSettings = SolverSettings()
    output: OutputSettings = OutputSettings()

    model_config = SettingsConfigDict(env_prefix="INVROD_", env_nested_delimiter="__")

    @field_validator("schema_version")
    @classmethod
    def supported_version(cls, value: int) -> int:
        if value != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {value}, expected {SCHEMA_VERSION}")
        return value

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings, JsonConfigSettingsSource(settings_cls), env_settings)


def load_settings(config_file: str | Path | None = None, **overrides) -> Settings:
    """Settings from init overrides, then the JSON file, then INVROD_ environment variables"""
    if config_file is not None and not Path(config_file).is_file():
        raise ConfigError(f"configuration file {config_file} not found")

    class FileSettings(Settings):
        model_config = SettingsConfigDict(json_file=config_file, env_prefix="INVROD_", env_nested_delimiter="__")

    try:
        return FileSettings(**overrides)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    except (json.JSONDecodeError, SettingsError) as exc:
        raise ConfigError(f"configuration file {config_file} is not valid JSON: {exc}") from exc


Mode = Literal["forward", "inverse", "roundtrip", "bench", "oracle"]


class RunConfig(BaseModel):
    """One command line invocation"""

    mode: Mode
    scenario: str | None = Field(default=None, description="Catalog key or name")
    net: Path | None = Field(default=None, description="Custom net file used as the DC (or UC in forward mode)")
    dc: Path | None = Field(default=None, description="Custom polyline (OBJ v records) used as the DC")
    sample_count: int | None = Field(default=None, ge=2, description="Curve sampling override")
    intensity: float = Field(default=1.0, ge=0, description="Scale of gravity and magnetic field")
    gammas: list[float] = Field(default=[1.0, 3.0, 6.0], description="Cantilever gamma values for the oracle")
    node_count: int = Field(default=100, ge=3, description="Cantilever node count for the oracle")
    cases: list[str] = Field(default=["spherical", "ring"], description="Scenarios timed by the benchmark")
    settings: Settings = Field(default_factory=Settings)

    @model_validator(mode="after")
    def needs_input(self) -> "RunConfig":
        if self.mode in ("forward", "inverse", "roundtrip") and not (self.scenario or self.net or self.dc):
            raise ValueError(f"{self.mode} needs --scenario, --net or --dc")
        if self.net is not None and self.dc is not None:
            raise ValueError("--net and --dc are mutually exclusive")
        return self

    @property
    def output(self) -> Path:
        return self.settings.output.directory

    @property
    def export_every(self) -> int:
        return self.settings.output.export_every

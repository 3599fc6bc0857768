"""Experiment configuration: models, backends, pipeline defaults, prices.

Files are TOML or JSON, picked by suffix.
"""
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Annotated, Optional, Union

from pydantic import Field, ValidationError, model_validator

from src.backends import (
    Backend,
    HttpBackendSpec,
    ScriptedBackendSpec,
    StochasticBackendSpec,
    build_backend,
)
from src.core import (
    DEFAULT_PRICE_SHEET,
    FrozenModel,
    ModelId,
    PipelineConfig,
    PriceSheet,
    Regime,
)
from src.errors import ConfigError

AnyBackendSpec = Annotated[
    Union[HttpBackendSpec, ScriptedBackendSpec, StochasticBackendSpec],
    Field(discriminator="type"),
]


class ModelEntry(FrozenModel):
    key: str = Field(min_length=1)
    display_name: str = ""
    backend: str = Field(min_length=1)

    def to_model_id(self) -> ModelId:
        return ModelId(key=self.key, display_name=self.display_name, backend_ref=self.backend)


class PipelineDefaults(FrozenModel):
    planner: Optional[str] = None
    executor: Optional[str] = None
    critic: Optional[str] = None
    baseline: Optional[str] = None
    parallelism: Optional[int] = Field(default=None, ge=1)
    timeout: float = Field(default=60.0, gt=0)


class ExperimentConfig(FrozenModel):
    models: list[ModelEntry]
    backends: dict[str, AnyBackendSpec]
    pipeline: PipelineDefaults = PipelineDefaults()
    # directory that relative paths (fixtures) are resolved against
    base_dir: str = "."

    @model_validator(mode="after")
    def _check_refs(self):
        keys = [m.key for m in self.models]
        if not keys:
            raise ValueError("at least one model is required")
        if len(set(keys)) != len(keys):
            raise ValueError(f"model keys must be unique, got {keys}")
        for model in self.models:
            if model.backend not in self.backends:
                raise ValueError(f"model {model.key!r} refers to unknown backend {model.backend!r}")
        return self

    def model(self, key: str) -> ModelId:
        for entry in self.models:
            if entry.key == key:
                return entry.to_model_id()
        raise ConfigError(f"unknown model key {key!r}; configured: {[m.key for m in self.models]}")

    @property
    def model_ids(self) -> list[ModelId]:
        return [entry.to_model_id() for entry in self.models]

    def pipeline_config(
        self,
        regime: Regime,
        planner: Optional[str] = None,
        executor: Optional[str] = None,
        critic: Optional[str] = None,
    ) -> PipelineConfig:
        """Resolve three model keys (falling back to ``[pipeline]``) into a config."""
        planner = planner or self.pipeline.planner
        executor = executor or self.pipeline.executor
        critic = critic or self.pipeline.critic
        if not (planner and executor and critic):
            raise ConfigError("planner, executor and critic model keys are required")
        return PipelineConfig(
            planner=self.model(planner),
            executor=self.model(executor),
            critic=self.model(critic),
            regime=regime,
        )

    def build_backends(self, seed: Optional[int] = None) -> dict[str, Backend]:
        """One backend instance per model key."""
        built: dict[str, Backend] = {}
        for entry in self.models:
            built[entry.key] = build_backend(
                self.backends[entry.backend], name=entry.backend, base_dir=self.base_dir, seed=seed
            )
        return built


def _read_mapping(path: Path) -> dict:
    try:
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"{path}: file not found") from None
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    data = _read_mapping(path)
    data.setdefault("base_dir", str(path.parent))
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_price_sheet(path: Optional[Union[str, Path]] = None) -> PriceSheet:
    """Prices from ``path`` (model key -> input_rate/output_rate), else the defaults."""
    if path is None:
        return DEFAULT_PRICE_SHEET
    path = Path(path)
    data = _read_mapping(path)
    rows = data.get("prices", data)
    try:
        return PriceSheet.model_validate({"rows": rows})
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

"""
Configuration management using Pydantic Settings and Pydantic models.

Process-level knobs come from environment variables (prefix ``SCD_``);
experiments are JSON documents with embedding/train/scd/output sections,
validated with unknown keys rejected.
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError
from app.layers import PRESETS, EmbeddingConfig, LayerDesc

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process settings loaded from environment variables."""

    log_level: str = "INFO"

    # Default parent directory for run outputs when a config names none
    output_dir: str = "runs"

    # Finite-difference suite used by the gradcheck command
    gradcheck_seeds: int = 5
    gradcheck_tolerance: float = 1e-4
    finite_difference_step: float = 1e-5

    model_config = SettingsConfigDict(
        env_prefix="SCD_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


# Global settings instance - lazily loaded
_settings: Settings | None = None


def get_settings() -> Settings:
    """Get the global settings instance, creating it if needed."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def override_settings(settings: Settings) -> None:
    """Override settings for testing purposes."""
    global _settings
    _settings = settings


_VARIANT_PATTERN = re.compile(r"^(?:SCDT_)?L(\d+)_M(\d+(?:\.\d+)?)$", re.IGNORECASE)


class ScdConfig(BaseModel):
    """Stochastic channel decorrelation settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = True
    epsilon: float = Field(default=0.3, ge=0.0, lt=1.0)
    pair_budget: int = Field(default=1000, ge=1)
    layers: tuple[int, ...] = (3, 5)
    alpha: float = 1.0
    beta: float = 2.0
    denom_stabilizer: float = Field(default=1e-8, gt=0.0)
    # Manual per-layer overrides of epsilon
    layer_margins: dict[int, float] = Field(default_factory=dict)
    include_exemplar_branch: bool = False

    @field_validator("layers")
    @classmethod
    def _sorted_unique(cls, layers: tuple[int, ...]) -> tuple[int, ...]:
        if any(layer < 1 for layer in layers):
            raise ValueError("layer indices are 1-based conv indices")
        return tuple(sorted(set(layers)))

    @model_validator(mode="after")
    def _check_enabled(self) -> "ScdConfig":
        if self.enabled and not self.layers:
            raise ValueError("layers must be non-empty when SCD is enabled")
        for layer, margin in self.layer_margins.items():
            if not 0.0 <= margin < 1.0:
                raise ValueError(f"layer_margins[{layer}]={margin} is outside [0, 1)")
        return self

    def margin_for(self, layer: int) -> float:
        return self.layer_margins.get(layer, self.epsilon)

    @property
    def variant_tag(self) -> str:
        """Short experiment name such as 'L35_M0.3', or 'none' when disabled."""
        if not self.enabled:
            return "none"
        layers = "".join(str(layer) for layer in self.layers)
        margin = f"{self.epsilon:.1f}" if round(self.epsilon, 1) == self.epsilon else f"{self.epsilon:g}"
        return f"L{layers}_M{margin}"

    @classmethod
    def from_variant(cls, tag: str, base: "ScdConfig | None" = None) -> "ScdConfig":
        """
        Parse a variant tag onto a base configuration.

        Args:
            tag: 'none', or 'L<conv digits>_M<margin>' with an optional 'SCDT_' prefix
            base: Configuration supplying every other field

        Returns:
            A new ScdConfig
        """
        base = base or cls()
        fields = base.model_dump()
        if tag.strip().lower() in ("none", "scdt_none"):
            fields["enabled"] = False
            return cls.model_validate(fields)
        match = _VARIANT_PATTERN.match(tag.strip())
        if match is None:
            raise ConfigError(f"Unrecognised SCD variant tag '{tag}' (expected e.g. 'L35_M0.3' or 'none')")
        fields.update(
            enabled=True,
            layers=tuple(int(digit) for digit in match.group(1)),
            epsilon=float(match.group(2)),
        )
        return cls.model_validate(fields)


class DataConfig(BaseModel):
    """Synthetic pair generator knobs."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Target side length as a fraction of the exemplar size
    target_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    distractors: int = Field(default=6, ge=0)
    scale_jitter: float = Field(default=0.05, ge=0.0, lt=0.5)
    rotation_jitter_deg: float = Field(default=5.0, ge=0.0, le=45.0)
    brightness_jitter: float = Field(default=0.1, ge=0.0, lt=1.0)


class TrainConfig(BaseModel):
    """SGD recipe. Defaults follow the full-scale fine-tuning schedule."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=50, ge=1)
    samples_per_epoch: int = Field(default=3200, ge=1)
    lr_initial: float = Field(default=1e-3, gt=0.0)
    lr_final: float = Field(default=1e-5, gt=0.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    seed: int = 0
    label_radius: float = Field(default=2.0, ge=0.0)
    score_scale: float = Field(default=1e-3, gt=0.0)
    eval_batch_size: int = Field(default=8, ge=1)
    data: DataConfig = Field(default_factory=DataConfig)
    scd: ScdConfig = Field(default_factory=ScdConfig)

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if self.lr_final > self.lr_initial:
            raise ValueError(f"lr_final={self.lr_final} exceeds lr_initial={self.lr_initial}")
        return self


class EmbeddingSection(BaseModel):
    """Either a named preset or an inline layer list."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Defaults to table1 when neither preset nor layers is given
    preset: Literal["table1", "desk"] | None = None
    layers: tuple[LayerDesc, ...] | None = None
    in_channels: int = Field(default=3, ge=1)
    exemplar_size: int | None = Field(default=None, ge=1)
    search_size: int | None = Field(default=None, ge=1)
    relu_after_bn: bool = True
    bn_after_last_conv: bool = False

    @model_validator(mode="after")
    def _check_source(self) -> "EmbeddingSection":
        if self.layers is not None:
            if self.preset is not None:
                raise ValueError("give either 'preset' or inline 'layers', not both")
            if self.exemplar_size is None or self.search_size is None:
                raise ValueError("inline layers need exemplar_size and search_size")
        return self

    def resolve(self) -> EmbeddingConfig:
        if self.layers is not None:
            return EmbeddingConfig(
                in_channels=self.in_channels,
                exemplar_size=self.exemplar_size,
                search_size=self.search_size,
                layers=self.layers,
            )
        cfg = PRESETS[self.preset or "table1"](
            relu_after_bn=self.relu_after_bn,
            bn_after_last_conv=self.bn_after_last_conv,
        )
        overrides = {
            key: value
            for key, value in (("exemplar_size", self.exemplar_size), ("search_size", self.search_size))
            if value is not None
        }
        return cfg.model_copy(update=overrides) if overrides else cfg


class OutputConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    directory: str | None = None
    # Metric rows written per epoch
    metrics_per_epoch: int = Field(default=1, ge=1)
    checkpoint_every_epoch: bool = False

    def resolve_directory(self) -> Path:
        return Path(self.directory if self.directory is not None else get_settings().output_dir)


class ExperimentConfig(BaseModel):
    """A complete experiment: embedding, training recipe (with SCD) and outputs."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    embedding: EmbeddingSection = Field(default_factory=EmbeddingSection)
    train: TrainConfig = Field(default_factory=TrainConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="before")
    @classmethod
    def _move_scd_into_train(cls, data: Any) -> Any:
        # The document keeps scd as its own section; TrainConfig owns it in memory.
        if isinstance(data, dict) and "scd" in data:
            data = dict(data)
            train = dict(data.get("train") or {})
            if "scd" in train:
                raise ValueError("scd given both as a section and inside train")
            train["scd"] = data.pop("scd")
            data["train"] = train
        return data

    @model_validator(mode="after")
    def _check_layer_references(self) -> "ExperimentConfig":
        conv_count = self.embedding.resolve().conv_count
        scd = self.train.scd
        referenced = set(scd.layers) | set(scd.layer_margins)
        missing = sorted(layer for layer in referenced if not 1 <= layer <= conv_count)
        if missing:
            raise ValueError(
                f"scd.layers references conv layer(s) {missing}, "
                f"but the embedding has only {conv_count} conv layers"
            )
        return self

    @property
    def scd(self) -> ScdConfig:
        return self.train.scd

    @property
    def embedding_config(self) -> EmbeddingConfig:
        return self.embedding.resolve()

    def to_document(self) -> dict[str, Any]:
        """Serialise back to the on-disk section layout."""
        document = self.model_dump(mode="json")
        document["scd"] = document["train"].pop("scd")
        return document

    def updated(self, **sections: dict[str, Any]) -> "ExperimentConfig":
        """Return a re-validated copy with fields of the named sections replaced."""
        document = self.to_document()
        for section, fields in sections.items():
            document[section] = {**document[section], **fields}
        return ExperimentConfig.model_validate(document)

    def with_scd(self, scd: ScdConfig) -> "ExperimentConfig":
        return self.updated(scd=scd.model_dump(mode="json"))

    @classmethod
    def desk(cls, seed: int = 7) -> "ExperimentConfig":
        """Desk-scale defaults: 3-layer embedding, batch 8, 10 epochs, 200 pairs per epoch."""
        return cls.model_validate(
            {
                "embedding": {"preset": "desk"},
                "train": {
                    "batch_size": 8,
                    "epochs": 10,
                    "samples_per_epoch": 200,
                    "lr_initial": 0.05,
                    "lr_final": 0.005,
                    "seed": seed,
                },
                "scd": {"layers": [3], "epsilon": 0.3},
            }
        )

    @classmethod
    def table1(cls, seed: int = 0) -> "ExperimentConfig":
        """Full-scale embedding with the fine-tuning recipe defaults."""
        return cls.model_validate(
            {
                "embedding": {"preset": "table1"},
                "train": {"seed": seed},
                "scd": {"layers": [3, 5], "epsilon": 0.3},
            }
        )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    """
    Load and validate an experiment configuration file.

    Args:
        path: JSON document with embedding/train/scd/output sections

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: if the file is missing or is not valid JSON
        pydantic.ValidationError: if a field is invalid or unknown
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e

    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}") from e

    if not isinstance(document, dict):
        raise ConfigError(f"{path} must contain a JSON object")

    config = ExperimentConfig.model_validate(document)
    logger.debug(f"Loaded experiment config from {path}")
    return config

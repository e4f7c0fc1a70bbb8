"""JSON run configuration with strict validation.

Unknown keys are rejected at every level; errors carry the dotted field path.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import DEFAULT_CLASS_WEIGHTS, AugmentationConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CDCSection(_Strict):
    channels: int = 128
    dilation_rates: list[int] = Field(default_factory=lambda: [2, 4, 8, 12])
    kernel: int = 3
    batchnorm: bool = True

    @field_validator("dilation_rates")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) < 1:
            raise ValueError("dilation rates must be a non-empty list of positive ints")
        return v


class ModelSection(_Strict):
    input_channels: int = 3
    encoder_channels: list[int] = Field(default_factory=lambda: [32, 32, 64, 128])
    decoder_channels: list[int] = Field(default_factory=lambda: [128, 64, 32])
    num_classes: int = 4
    dropout_rate: float = 0.2
    cdc: CDCSection = Field(default_factory=CDCSection)

    @model_validator(mode="after")
    def _consistent(self):
        try:
            self.build().validate()
        except ValueError as e:
            raise ValueError(str(e)) from None
        return self

    def build(self) -> ModelConfig:
        d = self.model_dump()
        return ModelConfig.from_dict(d)


class AugmentationSection(_Strict):
    enabled: bool = True
    crop_size: int = 512
    scale_range: tuple[float, float] = (0.8, 1.25)
    max_pan: float = 0.1
    hflip: bool = True
    vflip: bool = True
    multiplier: int = 83

    def build(self, seed: int) -> AugmentationConfig:
        cfg = AugmentationConfig(self.crop_size, list(self.scale_range), self.max_pan, self.hflip, self.vflip,
                                 self.multiplier, seed, self.enabled)
        cfg.validate()
        return cfg


class TrainSection(_Strict):
    iterations: int = Field(1000, ge=0)
    batch_size: int = Field(4, ge=1)
    base_lr: float = Field(1e-4, gt=0)
    power: float = Field(0.9, ge=0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    momentum: float = Field(0.9, ge=0, lt=1)
    class_weights: list[float] = Field(default_factory=lambda: list(DEFAULT_CLASS_WEIGHTS))
    checkpoint_every: int = Field(0, ge=0)

    @field_validator("class_weights")
    @classmethod
    def _weights(cls, v):
        if len(v) != 4 or min(v) < 0:
            raise ValueError("class_weights needs four non-negative values (background, arteriole, venule, intersection)")
        return v

    def build(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class DataSection(_Strict):
    manifest: Optional[str] = None
    folds: int = Field(5, ge=2)
    n_test: int = Field(10, ge=0)
    synthetic_size: int = Field(64, ge=32)


class RunConfig(_Strict):
    model: ModelSection = Field(default_factory=ModelSection)
    augmentation: AugmentationSection = Field(default_factory=AugmentationSection)
    train: TrainSection = Field(default_factory=TrainSection)
    data: DataSection = Field(default_factory=DataSection)
    output_dir: str = "runs"
    seed: int = 0
    eval_padding: Literal["reflect", "zero"] = "reflect"
    report_recall: bool = False

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:10]

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply dotted-path overrides (``train.iterations=5``); None values are skipped."""
        d = self.to_dict()
        for path, value in overrides.items():
            if value is None:
                continue
            node = d
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return parse_config(d)


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def parse_config(data) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_format(e)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    cfg = parse_config(raw)
    if cfg.data.manifest and not Path(cfg.data.manifest).is_absolute():
        cfg.data.manifest = str((path.parent / cfg.data.manifest).resolve())
    return cfg

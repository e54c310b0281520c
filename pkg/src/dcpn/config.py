"""Experiment configuration: one YAML file, schema-validated before any compute."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .encoders import PRESETS, ConvEncoderConfig, PyramidEncoderConfig
from .fewshot import HeadConfig, MetaTrainSettings, ablation_config
from .pretrain import DecoderConfig, PretrainSettings


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit status 2)."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    name: str
    root: Optional[Path] = None
    split: Literal["train", "test"] = "train"


class SyntheticSection(_Section):
    n_classes: int = Field(10, ge=2)
    per_class: int = Field(100, ge=2)
    seed: int = 0
    novel_seed: int = 1  # second corpus standing in for a different dataset (near/mixture tasks)


class DataSection(_Section):
    image_size: int = 32
    task: Literal["same", "near", "mixture"] = "same"
    base: Optional[DatasetSection] = None  # None -> synthetic corpus
    novel: Optional[DatasetSection] = None
    synthetic: SyntheticSection = SyntheticSection()
    train_fraction: float = Field(0.7, gt=0, lt=1)

    @model_validator(mode="after")
    def _check(self):
        if self.image_size % 32:
            raise ValueError(f"image_size {self.image_size} must be divisible by 32")
        if (self.base is None) != (self.novel is None):
            raise ValueError("give both base and novel datasets, or neither (synthetic corpus)")
        return self

    @property
    def synthetic_mode(self) -> bool:
        return self.base is None


class EncodersSection(_Section):
    preset: Optional[Literal["tiny", "full"]] = None
    pyramid: PyramidEncoderConfig = PyramidEncoderConfig()
    conv: ConvEncoderConfig = ConvEncoderConfig()
    dim: int = Field(64, ge=2)

    @model_validator(mode="after")
    def _apply_preset(self):
        if self.preset is not None:
            self.pyramid, self.conv = PRESETS[self.preset]
        if self.dim % 2:
            raise ValueError(f"embedding dim {self.dim} must be even")
        return self


class PretrainSection(_Section):
    image_size: int = 64
    decoder: DecoderConfig = DecoderConfig()
    optim: PretrainSettings = PretrainSettings(max_steps=200)
    dump_reconstructions: int = 4

    @model_validator(mode="after")
    def _check(self):
        if self.image_size % 64:
            raise ValueError(f"pretraining image_size {self.image_size} must be divisible by 64")
        return self


class FewshotSection(_Section):
    n_way: Optional[int] = None  # None -> the task's default way count
    k_shot: int = Field(1, ge=1)
    q_queries: int = Field(15, ge=1)
    scales: list[Literal["global", "local", "mix"]] = Field(["global", "local", "mix"], min_length=1)
    metric: Literal["euclidean", "cosine"] = "euclidean"
    temperature: float = Field(1.0, gt=0)
    squared: bool = False
    epochs: int = Field(10, ge=1)
    episodes_per_epoch: int = Field(50, ge=1)
    lr: float = 1e-3
    bank_size: int = 512

    def head(self, pretrained: bool) -> HeadConfig:
        return ablation_config(self.scales, self.metric, pretrained, self.temperature, self.squared)

    def training(self, n_way: int) -> MetaTrainSettings:
        return MetaTrainSettings(n_way=n_way, k_shot=self.k_shot, q_queries=self.q_queries, epochs=self.epochs,
                                 episodes_per_epoch=self.episodes_per_epoch, lr=self.lr, bank_size=self.bank_size)


class EvalSection(_Section):
    n_tasks: int = Field(1000, ge=1)
    q: int = Field(15, ge=1)
    k_shots: list[int] = [1]


class ExperimentConfig(_Section):
    data: DataSection = DataSection()
    encoders: EncodersSection = EncodersSection()
    pretrain: PretrainSection = PretrainSection()
    fewshot: FewshotSection = FewshotSection()
    eval: EvalSection = EvalSection()
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if "mix" in self.fewshot.scales and self.fewshot.bank_size < self.encoders.dim // 2:
            raise ValueError(f"bank_size {self.fewshot.bank_size} is smaller than the PCA width "
                             f"{self.encoders.dim // 2}")
        return self

    def digest(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def build_config(raw: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Validate a nested dict plus dotted-key overrides (``{"fewshot.k_shot": 5}``)."""
    data = json.loads(json.dumps(raw or {}, default=str))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path: Path | str | None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping of sections")
    return build_config(raw, overrides)


def dump_config(config: ExperimentConfig, path: Path | str) -> None:
    Path(path).write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False))

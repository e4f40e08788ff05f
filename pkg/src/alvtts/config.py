"""Run configuration: one YAML file drives corpus generation, training,
synthesis, and evaluation. Every key is typed here; unknown keys fail
loudly instead of being silently ignored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .corpus import SpeakerSpec, SyntheticCorpusConfig
from .errors import ConfigError


@dataclass
class QuantizerSection:
    input_dim: int = 1
    width: int = 64
    codebook_size: int = 4
    commitment_weight: float = 4.0

    def validate(self) -> None:
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.width < 1 or self.input_dim < 1:
            raise ConfigError("quantizer width and input_dim must be positive")
        if self.commitment_weight < 0:
            raise ConfigError("commitment_weight must be >= 0")


@dataclass
class BackboneSection:
    width: int = 64
    layers: int = 2
    heads: int = 2
    ff_dim: int = 128
    dropout: float = 0.0
    max_len: int = 512

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise ConfigError(
                f"backbone width {self.width} not divisible by heads {self.heads}"
            )


@dataclass
class BertSection:
    width: int = 64
    layers: int = 2
    heads: int = 2
    ff_dim: int = 128
    dropout: float = 0.0
    max_len: int = 64
    mask_ratio: float = 0.15

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise ConfigError(
                f"bert width {self.width} not divisible by heads {self.heads}"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside (0, 1)")


@dataclass
class StageSection:
    lr: float = 1e-3
    iterations: int = 1000
    batch_size: int = 32

    def validate(self, name: str) -> None:
        if self.lr <= 0:
            raise ConfigError(f"{name}.lr must be positive")
        if self.iterations < 0:
            raise ConfigError(f"{name}.iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"{name}.batch_size must be >= 1")


@dataclass
class TrainingSection:
    seed: int = 0
    warmup: int = 200
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    calibration_fraction: float = 0.1
    eval_every: int = 50
    stage1: StageSection = field(
        default_factory=lambda: StageSection(lr=1e-3, iterations=3000, batch_size=16)
    )
    bert: StageSection = field(
        default_factory=lambda: StageSection(lr=1e-3, iterations=1000, batch_size=32)
    )
    stage2: StageSection = field(
        default_factory=lambda: StageSection(lr=1e-3, iterations=1000, batch_size=32)
    )

    def validate(self) -> None:
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        held_out = self.val_fraction + self.test_fraction + self.calibration_fraction
        for name, frac in (
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
            ("calibration_fraction", self.calibration_fraction),
        ):
            if not 0.0 <= frac < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if held_out >= 1.0:
            raise ConfigError("split fractions leave no training data")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        self.stage1.validate("stage1")
        self.bert.validate("bert")
        self.stage2.validate("stage2")


@dataclass
class AugmentSection:
    backend: str = "rule_based"
    endpoint: str = ""
    model: str = ""
    max_tokens: int = 256
    timeout: float = 30.0
    concurrency: int = 1
    max_attempts: int = 3

    def validate(self) -> None:
        if self.backend not in ("rule_based", "remote"):
            raise ConfigError(f"unknown augment backend {self.backend!r}")
        if self.backend == "remote" and not self.endpoint:
            raise ConfigError("remote backend needs an endpoint URL")
        if self.concurrency < 1 or self.max_attempts < 1:
            raise ConfigError("concurrency and max_attempts must be >= 1")


@dataclass
class PathsSection:
    workdir: str = "runs/desk"


@dataclass
class RunConfig:
    corpus: SyntheticCorpusConfig = field(default_factory=SyntheticCorpusConfig)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    bert: BertSection = field(default_factory=BertSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> None:
        self.corpus.validate()
        self.quantizer.validate()
        self.backbone.validate()
        self.bert.validate()
        self.training.validate()
        self.augment.validate()
        if self.quantizer.width != self.backbone.width:
            raise ConfigError(
                "quantizer.width must equal backbone.width: the accent "
                "embedding table is the quantizer codebook"
            )

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)


_SCALAR_TYPES = {
    "int": int,
    "float": float,
    "str": str,
    "bool": bool,
    "DialectID": str,
}


def _coerce_scalar(value: Any, type_str: str, context: str) -> Any:
    target = _SCALAR_TYPES.get(str(type_str))
    if target is None:
        return value
    if target is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, bool) and target is not bool:
        raise ConfigError(f"{context}: expected {target.__name__}, got bool")
    if not isinstance(value, target):
        raise ConfigError(
            f"{context}: expected {target.__name__}, got {type(value).__name__}"
        )
    return value


_NESTED = {
    "corpus": SyntheticCorpusConfig,
    "quantizer": QuantizerSection,
    "backbone": BackboneSection,
    "training": TrainingSection,
    "augment": AugmentSection,
    "paths": PathsSection,
    "stage1": StageSection,
    "stage2": StageSection,
}


def _field_class(cls: type, name: str) -> type:
    # "bert" is the model section at top level and a stage inside training
    if name == "bert":
        return StageSection if cls is TrainingSection else BertSection
    mapped = _NESTED.get(name)
    if mapped is None:
        raise ConfigError(f"no nested section named {name!r}")
    return mapped


def _build_section(cls: type, data: Any, context: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{context}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        f = known[name]
        sub_context = f"{context}.{name}"
        if name == "speakers":
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub_context}: expected a list of speakers")
            kwargs[name] = tuple(
                _build_section(SpeakerSpec, spk, f"{sub_context}[{i}]")
                for i, spk in enumerate(value)
            )
        elif name == "words_per_sentence":
            if not (isinstance(value, (list, tuple)) and len(value) == 2):
                raise ConfigError(f"{sub_context}: expected a [min, max] pair")
            kwargs[name] = (int(value[0]), int(value[1]))
        elif isinstance(value, dict):
            kwargs[name] = _build_section(_field_class(cls, name), value, sub_context)
        else:
            kwargs[name] = _coerce_scalar(value, f.type, sub_context)
    return cls(**kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    config = _build_section(RunConfig, raw, "config")
    config.validate()
    return config


def config_hash(config: RunConfig) -> str:
    """Stable digest over the full configuration contents."""
    canonical = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

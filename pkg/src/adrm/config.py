"""Experiment config schema, named presets and YAML loading."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .attacks import ATTACK_KINDS
from .corruptions import CORRUPTIONS
from .data import AugmentConfig
from .diversify import DiversificationSpec
from .errors import ConfigError
from .trainer import Seeds, TrainConfig

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    kind: Literal["synthetic", "npz", "image_folder", "cifar10"] = "synthetic"
    path: Optional[str] = None
    manifest: Optional[str] = None
    n_classes: int = Field(10, ge=2)
    image_size: int = Field(16, ge=4)
    channels: int = Field(3, ge=1)
    n_train_per_class: int = Field(500, ge=1)
    n_test_per_class: int = Field(100, ge=1)
    distractor: float = Field(0.6, ge=0)
    noise: float = Field(0.06, ge=0)
    max_shift: int = Field(2, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _needs_path(self):
        if self.kind != "synthetic" and not self.path:
            raise ValueError(f"dataset kind {self.kind!r} requires 'path'")
        return self

    def loader_spec(self):
        if self.kind == "synthetic":
            return self.model_dump(exclude={"path", "manifest"})
        spec = {"kind": self.kind, "path": self.path}
        if self.manifest:
            spec["manifest"] = self.manifest
        return spec


class StreamSection(_Strict):
    n_steps: int = Field(5, ge=1)
    class_order_seed: Optional[int] = None


class ModelSection(_Strict):
    architecture: Literal["linear", "mlp", "small-cnn", "resnet32"] = "small-cnn"
    options: dict = Field(default_factory=dict)


class AugmentSection(_Strict):
    enabled: bool = True
    flip_p: float = Field(0.5, ge=0, le=1)
    crop_p: float = Field(1.0, ge=0, le=1)
    crop_padding: int = Field(2, ge=0)
    brightness_p: float = Field(0.5, ge=0, le=1)
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    contrast_p: float = Field(0.5, ge=0, le=1)
    contrast_range: tuple[float, float] = (0.8, 1.2)


class DiversificationSection(_Strict):
    ratio: float = Field(0.1, ge=0, le=1)
    epsilon_low: float = Field(1 / 255, ge=0)
    epsilon_high: float = Field(16 / 255, ge=0)
    augment_diversified: bool = False


class SeedSection(_Strict):
    data: int = 0
    init: int = 0
    memory: int = 0
    diversify: int = 0
    eval: int = 0


class TrainSection(_Strict):
    mode: Literal["finetune", "joint", "er", "adrm"] = "er"
    batch_size: int = Field(256, ge=1)
    rehearsal_batch_size: Optional[int] = Field(None, ge=1)
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    lr_decay: float = Field(0.1, gt=0)
    milestones: list[float] = Field(default_factory=lambda: [0.5, 0.75])
    epochs_first: int = Field(200, ge=1)
    epochs_rest: int = Field(128, ge=1)
    memory_budget: int = Field(1024, ge=1)
    memory_policy: Literal["reservoir", "class_balanced"] = "reservoir"
    offer_timing: Literal["after_task", "per_step"] = "after_task"
    augment: AugmentSection = Field(default_factory=AugmentSection)
    diversification: DiversificationSection = Field(default_factory=DiversificationSection)


class CorruptionEval(_Strict):
    kinds: list[str] = Field(default_factory=lambda: list(CORRUPTIONS))
    severities: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4, 5])

    @model_validator(mode="after")
    def _check(self):
        bad = [k for k in self.kinds if k not in CORRUPTIONS]
        if bad:
            raise ValueError(f"unsupported corruption kinds {bad}")
        if any(not 0 <= s <= 5 for s in self.severities):
            raise ValueError("severities must lie in [0, 5]")
        return self


class AttackEval(_Strict):
    kinds: list[str] = Field(default_factory=lambda: list(ATTACK_KINDS))
    epsilons_255: list[float] = Field(default_factory=lambda: [0, 2, 4, 8, 16])
    pgd_steps: int = Field(10, ge=1)
    l2_scale: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        bad = [k for k in self.kinds if k not in ATTACK_KINDS]
        if bad:
            raise ValueError(f"unsupported attack kinds {bad}")
        return self


class EvaluationSection(_Strict):
    max_examples: Optional[int] = Field(None, ge=1)
    corruption: CorruptionEval = Field(default_factory=CorruptionEval)
    attacks: AttackEval = Field(default_factory=AttackEval)
    analysis_subset: int = Field(2000, ge=2)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    name: str
    output_dir: Optional[str] = None
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    stream: StreamSection = Field(default_factory=StreamSection)
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    seeds: SeedSection = Field(default_factory=SeedSection)

    def to_train_config(self):
        t, s = self.train, self.seeds
        aug = None
        if t.augment.enabled:
            aug = AugmentConfig(**t.augment.model_dump(exclude={"enabled"}))
        d = t.diversification
        return TrainConfig(
            mode=t.mode, architecture=self.model.architecture,
            model_options=dict(self.model.options), batch_size=t.batch_size,
            rehearsal_batch_size=t.rehearsal_batch_size, lr=t.lr, momentum=t.momentum,
            weight_decay=t.weight_decay, lr_decay=t.lr_decay, milestones=tuple(t.milestones),
            epochs_first=t.epochs_first, epochs_rest=t.epochs_rest,
            memory_budget=t.memory_budget, memory_policy=t.memory_policy,
            offer_timing=t.offer_timing, augment=aug, augment_diversified=d.augment_diversified,
            diversification=DiversificationSpec(d.ratio, d.epsilon_low, d.epsilon_high, s.diversify),
            seeds=Seeds(s.data, s.init, s.memory, s.diversify),
        )

    def normalized(self):
        """Plain dict with every default materialized."""
        return self.model_dump(mode="json")

    def digest(self):
        blob = json.dumps(self.normalized(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def json_schema():
    return ExperimentConfig.model_json_schema()


# --------------------------------------------------------------------------
# presets

_DESK = {
    "dataset": {"kind": "synthetic", "n_classes": 10, "image_size": 16,
                "n_train_per_class": 500, "n_test_per_class": 100},
    "stream": {"n_steps": 5},
    "model": {"architecture": "small-cnn"},
    "train": {"batch_size": 64, "epochs_first": 10, "epochs_rest": 5, "memory_budget": 200},
    "evaluation": {"analysis_subset": 1000},
}

_FULL = {
    "dataset": {"kind": "cifar10", "path": "data/cifar10"},
    "stream": {"n_steps": 5},
    "model": {"architecture": "resnet32",
              "options": {"mean": [0.4914, 0.4822, 0.4465], "std": [0.2470, 0.2435, 0.2616]}},
    "train": {"batch_size": 256, "epochs_first": 200, "epochs_rest": 128, "memory_budget": 1024},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _variant(base, name, mode, ratio=None):
    train = {"mode": mode}
    if ratio is not None:
        train["diversification"] = {"ratio": ratio}
    return _merge(base, {"name": name, "train": train})


PRESETS = {}
for _prefix, _base in (("desk", _DESK), ("full-cifar", _FULL)):
    for _mode in ("finetune", "joint", "er"):
        PRESETS[f"{_prefix}-{_mode}"] = _variant(_base, f"{_prefix}-{_mode}", _mode)
    for _pct in (0, 10, 25, 50, 75, 100):
        PRESETS[f"{_prefix}-adrm-r{_pct}"] = _variant(_base, f"{_prefix}-adrm-r{_pct}", "adrm", _pct / 100)


def _error_path(err):
    first = err.errors()[0]
    return ".".join(str(p) for p in first["loc"]), first["msg"]


def parse_config(data):
    """Validate a mapping; a ``preset`` key names a base config that the rest overrides."""
    data = dict(data or {})
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", "preset")
        data = _merge(PRESETS[preset], data)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        path, msg = _error_path(err)
        raise ConfigError(msg, path) from None


def load_config(source):
    """Load a YAML/JSON config file, or a bare preset name."""
    if isinstance(source, str) and source in PRESETS and not Path(source).exists():
        return parse_config({"preset": source}), yaml.safe_dump({"preset": source})
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config file {source!r} not found")
    text = path.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"unparseable config: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return parse_config(data), text

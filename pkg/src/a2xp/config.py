"""Experiment configuration: a JSON document with a schema version."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError
from .objective import BACKBONES, KL_DIRECTIONS, TUNING_MODES
from .prompts import INIT_KINDS

SCHEMA_VERSION = 1
ABLATION_GRIDS = ("mixer", "init", "tuning")
EMBEDDERS = ("backbone_copy", "random")


@dataclass
class DatasetSpec:
    """Either a folder tree ``root/<domain>/<class>/*`` or the synthetic shapes recipe."""

    kind: str = "synthetic"
    path: Optional[str] = None
    image_size: Optional[int] = None
    n_per_class: int = 300
    size: int = 32
    strength: float = 1.0
    val_fraction: float = 0.1


@dataclass
class PretextSpec:
    """Supervised pretext training of the objective backbone on photo-style shapes.

    Class ``k`` gets ``int(n_per_class * class_decay**k) + min_per_class``
    images, so the pretext label distribution differs from the balanced
    benchmark (``class_decay=1`` gives a balanced pretext set).
    """

    n_per_class: int = 400
    class_decay: float = 0.55
    min_per_class: int = 10
    steps: int = 3000
    batch_size: int = 64
    lr: float = 3e-3
    seed: int = 12345
    augment: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: str = "small_cnn"
    backbone_checkpoint: Optional[str] = None
    pretext: PretextSpec = field(default_factory=PretextSpec)
    init: str = "zero"
    init_scale: float = 0.03
    use_expert_norm: bool = True
    use_tanh: bool = True
    use_softmax: bool = False
    tuning_mode: str = "frozen"
    tune_experts: bool = False
    budget_meta: int = 1000
    budget_adapt: int = 1000
    budget_generalize: int = 1000
    lr_adapt: float = 1e-2
    lr_generalize: float = 1e-4
    momentum: float = 0.9
    schedule_cycles: int = 3
    schedule_final_fraction: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 32
    border_width: int = 4
    smoothing: float = 0.05
    kl_direction: str = "target_to_model"
    embedder: str = "backbone_copy"
    head_init_scale: float = 0.1
    seeds: list[int] = field(default_factory=lambda: [0])
    ablation_grids: list[str] = field(default_factory=lambda: ["mixer"])
    output_dir: str = "runs/a2xp"
    schema_version: int = SCHEMA_VERSION

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        err = []
        d = self.dataset
        if d.kind not in ("synthetic", "folder"):
            err.append(f"dataset.kind: expected 'synthetic' or 'folder', got {d.kind!r}")
        if d.kind == "folder":
            if not d.path:
                err.append("dataset.path: required for folder datasets")
            elif check_paths and not Path(d.path).is_dir():
                err.append(f"dataset.path: {d.path} does not exist")
        if not 0 <= d.val_fraction < 1:
            err.append(f"dataset.val_fraction: must be in [0, 1), got {d.val_fraction}")
        if d.n_per_class < 1 or d.size < 8:
            err.append("dataset: n_per_class must be >= 1 and size >= 8")
        if self.backbone not in BACKBONES:
            err.append(f"backbone: unknown {self.backbone!r}; known {sorted(BACKBONES)}")
        if self.backbone_checkpoint and check_paths and not Path(self.backbone_checkpoint).is_file():
            err.append(f"backbone_checkpoint: {self.backbone_checkpoint} does not exist")
        if self.pretext.steps < 0 or self.pretext.lr <= 0:
            err.append("pretext: steps must be >= 0 and lr > 0")
        if not 0 < self.pretext.class_decay <= 1 or self.pretext.min_per_class < 0:
            err.append("pretext: class_decay must be in (0, 1] and min_per_class >= 0")
        if self.init not in INIT_KINDS:
            err.append(f"init: expected one of {INIT_KINDS}, got {self.init!r}")
        if self.init_scale <= 0:
            err.append("init_scale: must be > 0")
        if self.tuning_mode not in TUNING_MODES:
            err.append(f"tuning_mode: expected one of {TUNING_MODES}, got {self.tuning_mode!r}")
        for name in ("budget_meta", "budget_adapt", "budget_generalize"):
            if getattr(self, name) < 0:
                err.append(f"{name}: must be >= 0")
        for name in ("lr_adapt", "lr_generalize"):
            if not getattr(self, name) > 0:
                err.append(f"{name}: must be > 0")
        if not 0 <= self.momentum < 1:
            err.append("momentum: must be in [0, 1)")
        if self.schedule_cycles < 1 or not 0 < self.schedule_final_fraction <= 1:
            err.append("schedule: cycles >= 1 and final fraction in (0, 1] required")
        if self.weight_decay < 0:
            err.append("weight_decay: must be >= 0")
        if self.batch_size < 1:
            err.append("batch_size: must be >= 1")
        if self.border_width < 1:
            err.append("border_width: must be >= 1")
        if not 0 <= self.smoothing < 0.5:
            err.append("smoothing: must be in [0, 0.5)")
        if self.kl_direction not in KL_DIRECTIONS:
            err.append(f"kl_direction: expected one of {KL_DIRECTIONS}")
        if self.embedder not in EMBEDDERS:
            err.append(f"embedder: expected one of {EMBEDDERS}")
        if self.head_init_scale <= 0:
            err.append("head_init_scale: must be > 0")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            err.append("seeds: need at least one seed, without duplicates")
        for g in self.ablation_grids:
            if g not in ABLATION_GRIDS:
                err.append(f"ablation_grids: unknown grid {g!r}; known {ABLATION_GRIDS}")
        if self.schema_version != SCHEMA_VERSION:
            err.append(f"schema_version: expected {SCHEMA_VERSION}, got {self.schema_version}")
        if err:
            raise ConfigurationError("invalid config: " + "; ".join(err))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"invalid config: unknown fields {unknown}")
        try:
            if "dataset" in raw:
                raw["dataset"] = DatasetSpec(**raw["dataset"])
            if "pretext" in raw:
                raw["pretext"] = PretextSpec(**raw["pretext"])
            return cls(**raw)
        except TypeError as exc:
            raise ConfigurationError(f"invalid config: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def load_config(path: str | Path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return ExperimentConfig.from_dict(raw).validate(check_paths)

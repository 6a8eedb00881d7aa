"""Configuration dataclasses and JSON / ``key=value`` override handling."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

STRATEGIES = ("soft_kmeans", "hard_kmeans", "hard_uniform")


@dataclass
class BackboneConfig:
    image_height: int = 64
    image_width: int = 64
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    final_norm: bool = False
    # GELU after the second MLP layer as well as the first
    mlp_output_gelu: bool = False

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not a multiple "
                f"of patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.depth < 0 or self.channels < 1:
            raise ConfigError("depth must be >= 0 and channels >= 1")


@dataclass
class PartitionSpec:
    num_parts: int = 2
    alpha: float = 1.0
    beta: float = 0.0
    strategy: str = "soft_kmeans"
    # "flow" backpropagates through distances/attention, "detach" freezes the attention matrix
    attention_grad: str = "flow"
    max_iters: int = 100
    tol: float = 1e-9

    def validate(self, num_patches: int | None = None) -> None:
        if self.num_parts < 1:
            raise ConfigError("num_parts must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.attention_grad not in ("flow", "detach"):
            raise ConfigError("attention_grad must be 'flow' or 'detach'")
        if num_patches is not None and self.num_parts > num_patches:
            raise ConfigError(f"num_parts {self.num_parts} exceeds patch count {num_patches}")


@dataclass
class HeadConfig:
    additive_dim: int = 512
    num_classes: int = 701
    margin: float = 0.3
    include_global_head: bool = True
    dropout: float = 0.0

    def validate(self) -> None:
        if self.additive_dim < 1 or self.num_classes < 1:
            raise ConfigError("additive_dim and num_classes must be positive")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 120
    base_lr_backbone: float = 0.003
    base_lr_new: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_factor: float = 0.1
    lr_decay_epochs: list[int] = field(default_factory=lambda: [70, 110])
    seed: int = 0
    grad_clip: float = 0.0
    # 0 disables periodic validation / best-checkpoint tracking
    eval_every: int = 0
    max_steps: int = 0

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class DataConfig:
    root: str = ""
    satellite_factor: int = 3
    augment: bool = True
    flip: bool = True
    max_rotation: float = 10.0
    crop_scale_min: float = 0.9
    normalize: bool = True
    eval_split: str = "test"


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    asa: PartitionSpec = field(default_factory=PartitionSpec)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.backbone.validate()
        self.asa.validate(self.backbone.num_patches)
        self.head.validate()
        self.train.validate()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for section, values in d.items():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            for key, value in values.items():
                _set_field(getattr(cfg, section), section, key, value)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


_SECTIONS = ("backbone", "asa", "head", "train", "data")


def dataclass_from_dict(cls, d: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def _set_field(obj, section: str, key: str, value: Any) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if key not in fields:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(obj, key, _coerce(value, getattr(obj, key), f"{section}.{key}"))


def _coerce(value: Any, current: Any, name: str) -> Any:
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            parsed = json.loads(value) if value.startswith("[") else [
                int(v) for v in value.split(",") if v
            ]
            return list(parsed)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    return value


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` overrides.

    Keys are either dotted (``asa.num_parts``) or bare field names that are
    unique across sections (``num_parts``).
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
        else:
            owners = [
                s for s in _SECTIONS
                if key in {f.name for f in dataclasses.fields(getattr(cfg, s))}
            ]
            if not owners:
                raise ConfigError(f"unknown config key {key!r}")
            if len(owners) > 1:
                raise ConfigError(f"ambiguous key {key!r}; use one of {[f'{s}.{key}' for s in owners]}")
            section, name = owners[0], key
        _set_field(getattr(cfg, section), section, name, value)
    return cfg


def micro_config() -> RunConfig:
    """Desk-scale configuration used by the synthetic overfit run."""
    cfg = RunConfig()
    cfg.head.num_classes = 8
    return cfg

"""Configuration dataclasses and validation.

Run configs are flat JSON objects; :meth:`RunConfig.from_dict` routes each key
to the sub-config that owns it and rejects anything unknown.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the field."""


@dataclass
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 96
    depth: int = 12
    heads: int = 4
    mlp_ratio: float = 4.0
    lora_rank: int = 4
    lora_alpha: float = 4.0
    freeze_base: bool = False
    fusion_taps: tuple[int, ...] = (2, 5, 8, 11)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> None:
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})"
            )
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})")
        if self.lora_rank < 0:
            raise ConfigError(f"lora_rank must be >= 0, got {self.lora_rank}")
        if len(self.fusion_taps) != 4 or sorted(set(self.fusion_taps)) != list(self.fusion_taps):
            raise ConfigError(f"fusion_taps must be 4 increasing block indices, got {self.fusion_taps}")
        if self.fusion_taps[0] < 1 or self.fusion_taps[-1] > self.depth:
            raise ConfigError(
                f"fusion_taps {self.fusion_taps} need blocks 1..{self.fusion_taps[-1]} but depth={self.depth}"
            )


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompt_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 2
    decoder_mlp_dim: int = 64
    fusion_heads: int = 4
    coarse_down: int = 2
    coarse_dilation: int = 2
    fine_residual: bool = True
    anchor_sizes: tuple[float, ...] = (8.0, 16.0, 32.0)
    rpn_top_k: int = 16
    rpn_nms: float = 0.7
    mask_nms: float = 0.5
    num_classes: int = 0
    use_c2ffm: bool = True
    use_semantic_prompt: bool = True
    use_spatial_prompt: bool = True
    resupply_sparse: bool = True

    @property
    def use_ssspm(self) -> bool:
        return self.use_semantic_prompt or self.use_spatial_prompt

    def validate(self) -> None:
        self.backbone.validate()
        if self.prompt_dim % 8 or self.prompt_dim <= 0:
            raise ConfigError(f"prompt_dim must be a positive multiple of 8, got {self.prompt_dim}")
        if self.prompt_dim % self.decoder_heads:
            raise ConfigError(
                f"prompt_dim ({self.prompt_dim}) must be divisible by decoder_heads ({self.decoder_heads})"
            )
        if self.backbone.embed_dim % self.fusion_heads:
            raise ConfigError(
                f"embed_dim ({self.backbone.embed_dim}) must be divisible by fusion_heads ({self.fusion_heads})"
            )
        if self.backbone.grid % self.coarse_down:
            raise ConfigError(
                f"embedding grid ({self.backbone.grid}) must be divisible by coarse_down ({self.coarse_down})"
            )
        if self.rpn_top_k < 1:
            raise ConfigError("rpn_top_k must be >= 1")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")


@dataclass
class TrainConfig:
    base_lr: float = 0.0002
    weight_decay: float = 0.05
    warmup_iters: int = 50
    final_lr_ratio: float = 0.001
    batch_size: int = 2
    max_iters: int = 2000
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_iou: float = 1.0
    lambda_cls: float = 1.0
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    hflip: bool = False

    def validate(self) -> None:
        if self.warmup_iters < 1:
            raise ConfigError(f"warmup_iters must be >= 1, got {self.warmup_iters}")
        if not 0 < self.final_lr_ratio < 1:
            raise ConfigError(f"final_lr_ratio must lie in (0, 1), got {self.final_lr_ratio}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda_iou", "lambda_cls"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    class_agnostic: bool = True
    data: str | None = None
    test_data: str | None = None
    depth_root: str | None = None
    output: str = "runs/default"
    missing_depth: str = "error"

    _TOP = ("class_agnostic", "data", "test_data", "depth_root", "output", "missing_depth")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for key, value in d.items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        return cls.from_dict(raw)

    def _owner(self, key: str):
        if key in self._TOP:
            return self
        for obj in (self.train, self.model, self.model.backbone):
            if key in {f.name for f in dataclasses.fields(obj)} and key != "backbone":
                return obj
        raise ConfigError(f"unknown config key: {key!r}")

    def set(self, key: str, value: Any) -> None:
        owner = self._owner(key)
        current = getattr(owner, key)
        setattr(owner, key, _coerce(key, value, current))

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if self.missing_depth not in ("error", "placeholder"):
            raise ConfigError(f"missing_depth must be 'error' or 'placeholder', got {self.missing_depth!r}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for obj in (self.model.backbone, self.model, self.train):
            for f in dataclasses.fields(obj):
                if f.name == "backbone":
                    continue
                v = getattr(obj, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
        for k in self._TOP:
            out[k] = getattr(self, k)
        return out


def _coerce(key: str, value: Any, current: Any) -> Any:
    if isinstance(value, str) and not isinstance(current, str) and current is not None:
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(type(current[0])(v) for v in value) if current else tuple(value)
    if value is not None and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def tiny_model_config(**overrides: Any) -> ModelConfig:
    """Small model used by tests and the desk-scale experiments."""
    bb = BackboneConfig(image_size=64, patch_size=8, embed_dim=32, depth=12, heads=2, lora_rank=4)
    cfg = ModelConfig(backbone=bb, prompt_dim=32, decoder_heads=2, decoder_mlp_dim=64, fusion_heads=2)
    for k, v in overrides.items():
        target = bb if hasattr(bb, k) else cfg
        if not hasattr(target, k):
            raise ConfigError(f"unknown config key: {k!r}")
        setattr(target, k, v)
    cfg.validate()
    return cfg

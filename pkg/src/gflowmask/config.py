"""Run configuration: JSON in, validated pydantic models out.

Unknown keys are rejected at every level so a typo fails loudly instead of
silently falling back to a default.
"""

from __future__ import annotations

import json
from enum import Enum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

__all__ = [
    "BackboneConfig",
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "GFlowOutConfig",
    "MaskMode",
    "RunConfig",
    "TrainConfig",
    "load_config",
]


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


class MaskMode(str, Enum):
    NONE = "none"
    RANDOM = "random"
    BOTTOMUP = "bottomup"
    TOPDOWN = "topdown"

    @property
    def learned(self) -> bool:
        return self in (MaskMode.BOTTOMUP, MaskMode.TOPDOWN)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneConfig(_Strict):
    kind: Literal["minires", "minivit"] = "minires"
    input_size: int = Field(32, ge=4)
    in_channels: int = Field(3, ge=1)
    n_classes: int = Field(3, ge=2)
    # minires
    stem_channels: int = Field(8, ge=1)
    stem_stride: int = Field(2, ge=1, le=2)
    channels: tuple[int, ...] = (8, 16, 32)
    strides: tuple[int, ...] = (1, 2, 2)
    # minivit
    patch_size: int = Field(8, ge=1)
    embed_dim: int = Field(32, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    mlp_dim: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.kind == "minires":
            if len(self.channels) < 1 or len(self.channels) != len(self.strides):
                raise ValueError("channels and strides must be non-empty and of equal length")
            if any(c < 1 for c in self.channels) or any(s not in (1, 2) for s in self.strides):
                raise ValueError("channels must be positive and strides 1 or 2")
        else:
            if self.input_size % self.patch_size:
                raise ValueError("input_size must be divisible by patch_size")
            if self.embed_dim % self.n_heads:
                raise ValueError("embed_dim must be divisible by n_heads")
        return self

    @property
    def n_blocks(self) -> int:
        return len(self.channels) if self.kind == "minires" else self.n_layers

    @property
    def dropout_sites(self) -> list[str]:
        return [f"block{i}" for i in range(self.n_blocks)]

    @property
    def site_units(self) -> list[int]:
        if self.kind == "minires":
            return list(self.channels)
        return [self.embed_dim] * self.n_layers

    @property
    def embed_units(self) -> int:
        """Width of the pooled input embedding handed to bottom-up policies."""
        return self.stem_channels if self.kind == "minires" else self.embed_dim


class GFlowOutConfig(_Strict):
    mask_mode: MaskMode = MaskMode.BOTTOMUP
    pi: float = Field(0.9, gt=0.0, le=1.0)
    lambda_tb: float = Field(1.0, ge=0.0)
    policy_hidden: int = Field(32, ge=1)


class TrainConfig(_Strict):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    policy_lr: float = Field(1e-3, gt=0.0)


class EvalConfig(_Strict):
    passes: int = Field(5, ge=1)
    ece_bins: int = Field(10, ge=1)
    batch_size: int = Field(50, ge=1)


class DataConfig(_Strict):
    root: str = "data"
    n_classes: int = Field(3, ge=2, le=3)
    per_class_counts: tuple[int, ...] = (267, 267, 266)
    ood_per_class_counts: tuple[int, ...] = (67, 67, 66)
    image_size: int = Field(40, ge=8)
    test_fraction: float = Field(0.25, ge=0.0, lt=1.0)
    ood_shift: Literal["brightness_shift", "texture_swap"] = "brightness_shift"
    brightness_shift: float = 0.3

    @model_validator(mode="after")
    def _check_counts(self):
        for counts in (self.per_class_counts, self.ood_per_class_counts):
            if len(counts) != self.n_classes or any(c < 1 for c in counts):
                raise ValueError("per-class counts need one entry >= 1 per class")
        return self


class RunConfig(_Strict):
    seed: int
    data: DataConfig = DataConfig()
    backbone: BackboneConfig = BackboneConfig()
    gflowout: GFlowOutConfig = GFlowOutConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _check_classes(self):
        if self.backbone.n_classes != self.data.n_classes:
            raise ValueError("backbone.n_classes must equal data.n_classes")
        return self

    def resolve(self, base: Path) -> "RunConfig":
        """Rebase relative data/output paths onto ``base`` (the config's directory)."""
        root = Path(self.data.root)
        out = Path(self.output_dir)
        return self.model_copy(
            update={
                "data": self.data.model_copy(update={"root": str(root if root.is_absolute() else base / root)}),
                "output_dir": str(out if out.is_absolute() else base / out),
            }
        )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc
    return cfg.resolve(path.resolve().parent)

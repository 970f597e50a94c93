"""Flat key-value configuration for the whole pipeline.

One config object drives the scene generator, the model, the losses, the
schedule and the evaluation thresholds, so a single committed file fully
describes an experiment. Files are YAML restricted to flat scalar keys;
CLI ``--set key=value`` flags override file keys.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

SEED_ENV_VAR = "PARTSEG_SEED"

FPN_LEVELS = (3, 4, 5, 6, 7)
FPN_STRIDES = (8, 16, 32, 64, 128)


@dataclass
class PipelineConfig:
    # --- scene generator ---
    image_size: int = 128
    k_parts: int = 7                  # part categories including background
    n_instances_min: int = 1
    n_instances_max: int = 4
    overlap_prob: float = 0.3
    n_train: int = 200
    n_val: int = 40
    base_seed: int = 0

    # --- model ---
    channels: int = 64                # shared FPN/head width
    head_convs: int = 4               # detection tower depth
    roi_size: int = 32                # RoI pooling output, one of {14, 32, 48}
    context_module: str = "pgec"      # one of {pgec, psp, aspp, none}
    use_edge_branch: bool = True
    use_gn: bool = True               # group norm after the last prediction conv
    use_miou_loss: bool = True
    use_miou_score: bool = True

    # --- detection ---
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 50
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # upper offset bounds for P3..P6; P7 is unbounded above
    level_ranges: tuple[float, float, float, float] = (64.0, 128.0, 256.0, 512.0)

    # --- loss weights ---
    alpha: float = 2.0                # parsing cross-entropy weight
    beta: float = 2.0                 # edge loss weight
    theta: float = 2.0                # structural mIoU loss weight
    gamma: float = 1.0                # mIoU-score MSE weight

    # --- schedule ---
    epochs: int = 60
    batch_size: int = 8
    base_lr: float = 0.005
    lr_decay_epochs: tuple[int, ...] = (40, 52)
    momentum: float = 0.9
    weight_decay: float = 0.0001
    seed: int = 0

    # --- training plumbing ---
    max_train_rois: int = 16          # parse-head RoIs per optimizer step
    box_jitter: float = 0.1           # +-10% jitter on GT boxes fed to the parse head
    scale_jitter: float = 0.125       # +-12.5% train-time rescale on a fixed canvas
    clip_grad_norm: float = 10.0      # per-head gradient norm cap; 0 disables
    divergence_limit: float = 1.0e4
    device: str = "auto"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.k_parts < 2:
            raise ValueError("k_parts must be >= 2 (background plus one part)")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.n_instances_min < 1 or self.n_instances_max < self.n_instances_min:
            raise ValueError("invalid instance count range")
        if self.roi_size not in (14, 32, 48):
            raise ValueError("roi_size must be one of {14, 32, 48}")
        if self.context_module not in ("pgec", "psp", "aspp", "none"):
            raise ValueError("context_module must be one of {pgec, psp, aspp, none}")
        if len(self.level_ranges) != 4 or list(self.level_ranges) != sorted(self.level_ranges):
            raise ValueError("level_ranges must be 4 increasing offset bounds")
        for name in ("alpha", "beta", "theta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValueError(f"config file {path} must hold a flat key-value mapping")
        return cls.from_dict(data)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        data = self.to_dict()
        for key, value in overrides.items():
            if key not in data:
                raise KeyError(f"unknown config key: {key}")
            data[key] = value
        return PipelineConfig.from_dict(data)


def parse_override(text: str) -> tuple[str, object]:
    """Parse one ``key=value`` CLI override, coercing via YAML scalar rules."""
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def apply_env_seed(cfg: PipelineConfig) -> PipelineConfig:
    """Apply the global seed override from the environment, if set."""
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return cfg
    seed = int(raw)
    return cfg.with_overrides({"seed": seed, "base_seed": seed})

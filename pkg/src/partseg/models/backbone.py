"""Small trainable backbone plus the five-level feature pyramid.

The backbone is a stem followed by four down-sampling stages (each one
stride-2 conv and one stride-1 conv, both with group norm and ReLU),
yielding C3/C4/C5 at strides 8/16/32. The pyramid builds P3-P5 from 1x1
lateral projections with top-down addition plus 3x3 output convs, and P6/P7
from stride-2 convs on P5/P6, for strides {8, 16, 32, 64, 128}.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import FPN_LEVELS


def group_norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm = group_norm(c_out)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


@dataclass
class FeaturePyramid:
    """Per-level feature grids keyed by pyramid level (stride = 2**level)."""

    levels: dict[int, torch.Tensor]
    channels: int
    image_size: tuple[int, int]      # original (H, W) before padding
    padded_size: tuple[int, int]

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    @property
    def strides(self) -> dict[int, int]:
        return {lvl: 2 ** lvl for lvl in self.levels}


class Backbone(nn.Module):
    def __init__(self, channels: int = 64):
        super().__init__()
        widths = [max(8, channels // 4), channels // 2, channels, channels, channels]
        self.stem = ConvBlock(3, widths[0], stride=2)
        stages = []
        for i in range(4):
            stages.append(nn.Sequential(
                ConvBlock(widths[i], widths[i + 1], stride=2),
                ConvBlock(widths[i + 1], widths[i + 1]),
            ))
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[1], feats[2], feats[3]  # C3, C4, C5


class FpnNetwork(nn.Module):
    """Backbone + pyramid; pads inputs so every level has an exact grid."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.channels = channels
        self.backbone = Backbone(channels)
        self.lateral3 = nn.Conv2d(channels, channels, 1)
        self.lateral4 = nn.Conv2d(channels, channels, 1)
        self.lateral5 = nn.Conv2d(channels, channels, 1)
        self.output3 = nn.Conv2d(channels, channels, 3, padding=1)
        self.output4 = nn.Conv2d(channels, channels, 3, padding=1)
        self.output5 = nn.Conv2d(channels, channels, 3, padding=1)
        self.down6 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.down7 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[2], images.shape[3]
        pad_h = (-h) % 128
        pad_w = (-w) % 128
        if pad_h or pad_w:
            images = F.pad(images, (0, pad_w, 0, pad_h))
        c3, c4, c5 = self.backbone(images)
        p5 = self.lateral5(c5)
        p4 = self.lateral4(c4) + F.interpolate(p5, scale_factor=2.0, mode="nearest")
        p3 = self.lateral3(c3) + F.interpolate(p4, scale_factor=2.0, mode="nearest")
        p3 = self.output3(p3)
        p4 = self.output4(p4)
        p5 = self.output5(p5)
        p6 = self.down6(p5)
        p7 = self.down7(p6)
        levels = dict(zip(FPN_LEVELS, (p3, p4, p5, p6, p7)))
        return FeaturePyramid(levels=levels, channels=self.channels,
                              image_size=(h, w),
                              padded_size=(h + pad_h, w + pad_w))

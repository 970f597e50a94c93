"""Context encoding for RoI features: multi-scale gating plus self-attention.

The pyramid gather-excite module runs a 3x3 conv branch in parallel with
four gather-excite units (spatial extents 4, 8, 16 and global) and fuses
everything by summation. Each finite-extent unit average-pools with
kernel = stride = extent, applies a depth-wise transform, upsamples back
and gates the input through a sigmoid; the global unit gathers with five
serial stride-2 depth-wise convolutions down to a 1x1 descriptor.

The non-local block is the embedded-Gaussian form with a group-normalised
output projection inside the residual branch.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import group_norm


class GatherExciteUnit(nn.Module):
    """Finite-extent gather-excite: pool, transform, upsample, gate."""

    def __init__(self, channels: int, extent: int):
        super().__init__()
        self.extent = extent
        self.transform = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        k = min(self.extent, h, w)
        gathered = F.avg_pool2d(x, kernel_size=k, stride=k)
        gathered = self.transform(gathered)
        gate = torch.sigmoid(F.interpolate(gathered, size=(h, w), mode="nearest"))
        return x * gate


class GlobalGatherExciteUnit(nn.Module):
    """Global gather via five serial stride-2 depth-wise convolutions."""

    def __init__(self, channels: int, n_layers: int = 5):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv2d(channels, channels, 3, stride=2, padding=1, groups=channels)
            for _ in range(n_layers)
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        g = x
        for conv in self.convs:
            g = conv(g)
        if g.shape[-2:] != (1, 1):
            g = F.adaptive_avg_pool2d(g, 1)
        gate = torch.sigmoid(F.interpolate(g, size=(h, w), mode="nearest"))
        return x * gate


class PyramidGatherExcite(nn.Module):
    """3x3 conv branch + gather-excite units at extents {4, 8, 16, global}."""

    def __init__(self, channels: int, extents: tuple[int, ...] = (4, 8, 16),
                 global_layers: int = 5):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.units = nn.ModuleList([GatherExciteUnit(channels, e) for e in extents])
        self.global_unit = GlobalGatherExciteUnit(channels, global_layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv(x)
        for unit in self.units:
            out = out + unit(x)
        return out + self.global_unit(x)


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian self-attention over all spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        inter = max(channels // 2, 1)
        self.theta = nn.Conv2d(channels, inter, 1)
        self.phi = nn.Conv2d(channels, inter, 1)
        self.g = nn.Conv2d(channels, inter, 1)
        self.project = nn.Conv2d(inter, channels, 1)
        self.norm = group_norm(channels)
        # start as an identity mapping so the residual branch trains gently
        nn.init.zeros_(self.norm.weight)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        q = self.theta(x).flatten(2).transpose(1, 2)     # (B, HW, C')
        k = self.phi(x).flatten(2)                       # (B, C', HW)
        return torch.softmax(q @ k, dim=-1)              # (B, HW, HW)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        attn = self.attention(x)
        v = self.g(x).flatten(2).transpose(1, 2)         # (B, HW, C')
        y = (attn @ v).transpose(1, 2).reshape(b, -1, h, w)
        return x + self.norm(self.project(y))


class PspContext(nn.Module):
    """Pyramid pooling: pooled 1x1 convs at several grid sizes, concat, project."""

    def __init__(self, channels: int, bins: tuple[int, ...] = (1, 2, 4, 8)):
        super().__init__()
        self.bins = bins
        reduced = max(channels // len(bins), 1)
        self.reducers = nn.ModuleList([nn.Conv2d(channels, reduced, 1) for _ in bins])
        self.project = nn.Conv2d(channels + reduced * len(bins), channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        outs = [x]
        for b, conv in zip(self.bins, self.reducers):
            pooled = F.adaptive_avg_pool2d(x, b)
            outs.append(F.interpolate(conv(pooled), size=(h, w), mode="bilinear",
                                      align_corners=False))
        return self.project(torch.cat(outs, dim=1))


class AsppContext(nn.Module):
    """Atrous spatial pyramid: parallel dilated 3x3 convs plus image pooling."""

    def __init__(self, channels: int, rates: tuple[int, ...] = (1, 2, 4)):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Conv2d(channels, channels, 1)] +
            [nn.Conv2d(channels, channels, 3, padding=r, dilation=r) for r in rates])
        self.pool_conv = nn.Conv2d(channels, channels, 1)
        self.project = nn.Conv2d(channels * (len(rates) + 2), channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        outs = [branch(x) for branch in self.branches]
        pooled = self.pool_conv(F.adaptive_avg_pool2d(x, 1))
        outs.append(F.interpolate(pooled, size=(h, w), mode="nearest"))
        return self.project(torch.cat(outs, dim=1))


def build_context(name: str, channels: int) -> nn.Module | None:
    if name == "pgec":
        return PyramidGatherExcite(channels)
    if name == "psp":
        return PspContext(channels)
    if name == "aspp":
        return AsppContext(channels)
    if name == "none":
        return None
    raise ValueError(f"unknown context module {name!r}")

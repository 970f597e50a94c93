"""Edge-guided per-instance parsing head.

RoI features from P3 pass through the context encoder (multi-scale gating +
non-local attention), then four shared 3x3 convolutions (group norm after
the last, switchable), then two sibling branches — part parsing and binary
edge — each upsampling 2x with a transposed convolution, so logits come out
at twice the RoI resolution.

Ground-truth crops are nearest-resampled label rasters; edge crops are
re-extracted from the resampled parsing crop so boundaries stay one pixel
wide at head resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..config import PipelineConfig
from .backbone import group_norm
from .context import NonLocalBlock, build_context


@dataclass
class RoiPrediction:
    parsing_logits: torch.Tensor           # (N, K, R, R)
    edge_logits: torch.Tensor | None       # (N, 1, R, R) when the branch is on

    @property
    def resolution(self) -> int:
        return self.parsing_logits.shape[-1]


class PredictionBranch(nn.Module):
    """2x transposed-conv upsample followed by a 1x1 logit conv."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        self.act = nn.ReLU(inplace=True)
        self.logits = nn.Conv2d(channels, out_channels, 1)

    def forward(self, x):
        return self.logits(self.act(self.up(x)))


class ParsingHead(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        c = cfg.channels
        self.context = build_context(cfg.context_module, c)
        self.non_local = NonLocalBlock(c)
        trunk: list[nn.Module] = []
        for i in range(4):
            trunk.append(nn.Conv2d(c, c, 3, padding=1))
            if i == 3 and cfg.use_gn:
                trunk.append(group_norm(c))
            trunk.append(nn.ReLU(inplace=True))
        self.trunk = nn.Sequential(*trunk)
        self.parsing_branch = PredictionBranch(c, cfg.k_parts)
        self.edge_branch = PredictionBranch(c, 1) if cfg.use_edge_branch else None

    def encode(self, roi: torch.Tensor) -> torch.Tensor:
        """Context-enhanced RoI feature (same shape as the input)."""
        if self.context is not None:
            roi = self.context(roi)
        return self.non_local(roi)

    def forward_with_features(self, roi: torch.Tensor) -> tuple[RoiPrediction, torch.Tensor]:
        encoded = self.encode(roi)
        x = self.trunk(encoded)
        edge = self.edge_branch(x) if self.edge_branch is not None else None
        pred = RoiPrediction(parsing_logits=self.parsing_branch(x), edge_logits=edge)
        return pred, encoded

    def forward(self, roi: torch.Tensor) -> RoiPrediction:
        return self.forward_with_features(roi)[0]


def crop_labels(raster: torch.Tensor, box, out_size: int) -> torch.Tensor:
    """Nearest-neighbour resample of a label raster crop to out_size x out_size.

    Output pixel centres sit at box-relative positions ((k + 0.5) / out_size);
    sources outside the raster read background (0).
    """
    x0, y0, x1, y1 = (float(v) for v in (box.as_tuple() if hasattr(box, "as_tuple") else box))
    h, w = raster.shape
    device = raster.device
    xs = x0 + (torch.arange(out_size, device=device, dtype=torch.float64) + 0.5) * (x1 - x0) / out_size
    ys = y0 + (torch.arange(out_size, device=device, dtype=torch.float64) + 0.5) * (y1 - y0) / out_size
    cols = torch.floor(xs).long()
    rows = torch.floor(ys).long()
    valid = ((cols >= 0) & (cols < w)).view(1, -1) & ((rows >= 0) & (rows < h)).view(-1, 1)
    cols = cols.clamp(0, w - 1)
    rows = rows.clamp(0, h - 1)
    crop = raster[rows.view(-1, 1), cols.view(1, -1)]
    return torch.where(valid, crop, torch.zeros_like(crop))


def edge_targets_from_crop(parsing_crop: torch.Tensor) -> torch.Tensor:
    """8-neighbourhood edge labels of a (R, R) label crop, on-device."""
    p = parsing_crop
    h, w = p.shape
    edge = torch.zeros((h, w), dtype=torch.bool, device=p.device)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(-dy, 0), h - max(dy, 0))
            xs = slice(max(-dx, 0), w - max(dx, 0))
            ys_n = slice(max(dy, 0), h - max(-dy, 0))
            xs_n = slice(max(dx, 0), w - max(-dx, 0))
            edge[ys, xs] |= p[ys, xs] != p[ys_n, xs_n]
    return edge.to(torch.long)


def parsing_loss(parsing_logits: torch.Tensor, gt_crop: torch.Tensor) -> torch.Tensor:
    """Mean pixel cross-entropy over the part categories.

    Accepts one crop ((K, R, R) with (R, R) labels) or a batch of crops.
    """
    if parsing_logits.ndim == 3:
        parsing_logits = parsing_logits.unsqueeze(0)
        gt_crop = gt_crop.unsqueeze(0)
    return nn.functional.cross_entropy(parsing_logits, gt_crop)


def edge_weight_mass(gt_edges: torch.Tensor) -> float:
    """Total weight the edge loss spreads over a crop: w0|Y-| + w1|Y+|.

    Dividing the raw loss by this mass yields its weighted-mean form, which
    is the scale the optimiser sees.
    """
    n = gt_edges.numel()
    n_pos = float(gt_edges.sum())
    return 2.0 * n_pos * (n - n_pos) / n if n else 0.0


def edge_loss(edge_logits: torch.Tensor, gt_edges: torch.Tensor) -> torch.Tensor:
    """Class-balanced edge cross-entropy with deliberately swapped weights.

    w0 = |edge| / |all| scales the non-edge sum and w1 = |non-edge| / |all|
    scales the (minority) edge sum; both sums are raw, not averaged. A crop
    with no edge pixels contributes zero.
    """
    logits = edge_logits.reshape(-1)
    labels = gt_edges.reshape(-1).to(logits.dtype)
    n = labels.numel()
    n_pos = labels.sum()
    n_neg = n - n_pos
    if n_pos == 0:
        return logits.sum() * 0
    w0 = n_pos / n
    w1 = n_neg / n
    log_p1 = nn.functional.logsigmoid(logits)
    log_p0 = nn.functional.logsigmoid(-logits)
    return -(w0 * (log_p0 * (1 - labels)).sum() + w1 * (log_p1 * labels).sum())


def prediction_loss(pred: RoiPrediction, gt_parsing_crop: torch.Tensor,
                    gt_edge_crop: torch.Tensor | None,
                    cfg: PipelineConfig) -> dict[str, torch.Tensor]:
    """Weighted parsing + edge loss for one crop or a batch of crops.

    The edge term is computed per crop (its class weights depend on that
    crop's edge pixel count) and averaged over the batch.
    """
    l_parsing = parsing_loss(pred.parsing_logits, gt_parsing_crop)
    if pred.edge_logits is not None and gt_edge_crop is not None:
        if pred.edge_logits.ndim == 3:
            l_edge = edge_loss(pred.edge_logits, gt_edge_crop)
        else:
            per_roi = [edge_loss(pred.edge_logits[i], gt_edge_crop[i])
                       for i in range(pred.edge_logits.shape[0])]
            l_edge = torch.stack(per_roi).mean()
    else:
        l_edge = l_parsing * 0
    return {"l_parsing": l_parsing, "l_edge": l_edge,
            "l_pred": cfg.alpha * l_parsing + cfg.beta * l_edge}

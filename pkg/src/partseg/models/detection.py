"""Anchor-free per-pixel detection head.

Every pyramid location predicts a person-vs-background logit, a centerness
logit and a 4-D (l, t, r, b) offset vector (made positive by a per-level
learnable exponential scale). Targets follow the inside-box rule with
per-level offset ranges; the loss is focal + (-log IoU) + centerness BCE.
Decoding thresholds the combined score, inverts the offsets around each
location, clips to the image, and applies greedy NMS with a fixed cap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import FPN_LEVELS, PipelineConfig
from ..geometry import Box
from .backbone import FeaturePyramid, group_norm

INF = float("inf")


@dataclass
class DetectionOutputs:
    """Per-level raw head outputs; regression is post-transform (positive)."""

    class_logits: dict[int, torch.Tensor]       # (B, 1, h, w)
    centerness_logits: dict[int, torch.Tensor]  # (B, 1, h, w)
    regression: dict[int, torch.Tensor]         # (B, 4, h, w), strictly positive

    @property
    def levels(self) -> list[int]:
        return sorted(self.class_logits)


@dataclass
class AssignmentTargets:
    """Per-level, per-location training targets."""

    labels: dict[int, torch.Tensor]        # (B, N) 1 = person, 0 = background
    offsets: dict[int, torch.Tensor]       # (B, N, 4), positives only
    centerness: dict[int, torch.Tensor]    # (B, N), positives only
    matched_box: dict[int, torch.Tensor]   # (B, N) index into gt list, -1 = background


@dataclass
class Detection:
    box: Box
    score: float
    level: int


class Scale(nn.Module):
    def __init__(self, value: float = 1.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(value)))

    def forward(self, x):
        return x * self.scale


class DetectionHead(nn.Module):
    """Tower shared across P3-P7 with class/centerness/regression outputs."""

    def __init__(self, channels: int = 64, n_convs: int = 4, prior_prob: float = 0.01):
        super().__init__()
        def tower():
            layers = []
            for _ in range(n_convs):
                layers += [nn.Conv2d(channels, channels, 3, padding=1, bias=False),
                           group_norm(channels), nn.ReLU(inplace=True)]
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.reg_tower = tower()
        self.cls_logits = nn.Conv2d(channels, 1, 3, padding=1)
        self.centerness = nn.Conv2d(channels, 1, 3, padding=1)
        self.bbox_pred = nn.Conv2d(channels, 4, 3, padding=1)
        self.scales = nn.ModuleDict({str(lvl): Scale(1.0) for lvl in FPN_LEVELS})
        # bias so the initial class probability is prior_prob (stable focal loss)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, pyramid: FeaturePyramid) -> DetectionOutputs:
        cls, ctr, reg = {}, {}, {}
        for lvl, feat in pyramid.levels.items():
            c = self.cls_tower(feat)
            r = self.reg_tower(feat)
            cls[lvl] = self.cls_logits(c)
            ctr[lvl] = self.centerness(c)
            reg[lvl] = torch.exp(self.scales[str(lvl)](self.bbox_pred(r)))
        return DetectionOutputs(class_logits=cls, centerness_logits=ctr, regression=reg)


def level_locations(level: int, h: int, w: int, device=None,
                    dtype=torch.float32) -> torch.Tensor:
    """(h*w, 2) image-plane (x, y) points of one level's grid, row-major."""
    stride = 2 ** level
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) * stride
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) * stride
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)


def pyramid_locations(outputs: DetectionOutputs) -> dict[int, torch.Tensor]:
    locs = {}
    for lvl in outputs.levels:
        t = outputs.class_logits[lvl]
        locs[lvl] = level_locations(lvl, t.shape[2], t.shape[3], device=t.device, dtype=t.dtype)
    return locs


def level_offset_ranges(cfg: PipelineConfig) -> dict[int, tuple[float, float]]:
    bounds = (0.0, *cfg.level_ranges, INF)
    return {lvl: (bounds[i], bounds[i + 1]) for i, lvl in enumerate(FPN_LEVELS)}


def assign_targets(locations: dict[int, torch.Tensor],
                   gt_boxes: list[list[Box]],
                   cfg: PipelineConfig) -> AssignmentTargets:
    """Match every location of every image to a box or to background.

    A location is positive iff it lies inside a box (boundary inclusive) and
    its largest offset falls inside the level's range; among several
    eligible boxes the minimum-area one wins (ties: lowest box index).
    """
    ranges = level_offset_ranges(cfg)
    batch = len(gt_boxes)
    labels, offsets, centerness_t, matched = {}, {}, {}, {}
    for lvl, locs in locations.items():
        n = locs.shape[0]
        lo, hi = ranges[lvl]
        lvl_labels = torch.zeros(batch, n, dtype=torch.long, device=locs.device)
        lvl_offsets = torch.zeros(batch, n, 4, dtype=locs.dtype, device=locs.device)
        lvl_center = torch.zeros(batch, n, dtype=locs.dtype, device=locs.device)
        lvl_matched = torch.full((batch, n), -1, dtype=torch.long, device=locs.device)
        for b, boxes in enumerate(gt_boxes):
            if not boxes:
                continue
            coords = torch.tensor([bx.as_tuple() for bx in boxes],
                                  dtype=locs.dtype, device=locs.device)  # (M, 4)
            areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
            x = locs[:, 0:1]
            y = locs[:, 1:2]
            l = x - coords[:, 0]
            t = y - coords[:, 1]
            r = coords[:, 2] - x
            bt = coords[:, 3] - y
            off = torch.stack([l, t, r, bt], dim=2)       # (N, M, 4)
            inside = off.min(dim=2).values >= 0
            max_off = off.max(dim=2).values
            eligible = inside & (max_off > lo) & (max_off <= hi)
            cand_area = torch.where(eligible, areas.expand_as(eligible), torch.full_like(areas, INF).expand_as(eligible))
            best = cand_area.argmin(dim=1)                 # lowest index wins ties
            positive = eligible.any(dim=1)
            lvl_labels[b] = positive.long()
            lvl_matched[b] = torch.where(positive, best, torch.full_like(best, -1))
            sel = off[torch.arange(off.shape[0], device=locs.device), best]
            lvl_offsets[b] = torch.where(positive.unsqueeze(1), sel, torch.zeros_like(sel))
            lvl_center[b] = torch.where(positive, offsets_to_centerness(sel), torch.zeros_like(positive, dtype=locs.dtype))
        labels[lvl] = lvl_labels
        offsets[lvl] = lvl_offsets
        centerness_t[lvl] = lvl_center
        matched[lvl] = lvl_matched
    return AssignmentTargets(labels=labels, offsets=offsets,
                             centerness=centerness_t, matched_box=matched)


def offsets_to_centerness(off: torch.Tensor) -> torch.Tensor:
    """Vectorised centerness of (..., 4) offset tensors; 0 where degenerate."""
    l, t, r, b = off.unbind(dim=-1)
    lr = torch.maximum(l, r)
    tb = torch.maximum(t, b)
    ratio = torch.where(lr > 0, torch.minimum(l, r) / lr.clamp(min=1e-12), torch.zeros_like(lr)) * \
        torch.where(tb > 0, torch.minimum(t, b) / tb.clamp(min=1e-12), torch.zeros_like(tb))
    return torch.sqrt(ratio.clamp(min=0))


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               gamma: float, alpha: float) -> torch.Tensor:
    """Sum of the focal loss over all entries (caller normalises)."""
    prob = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (alpha_t * (1 - p_t) ** gamma * ce).sum()


def iou_of_offsets(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """IoU of boxes decoded from (l, t, r, b) offsets around a shared point."""
    pl, pt, pr, pb = pred.unbind(dim=-1)
    tl, tt, tr, tb = target.unbind(dim=-1)
    inter_w = torch.minimum(pl, tl) + torch.minimum(pr, tr)
    inter_h = torch.minimum(pt, tt) + torch.minimum(pb, tb)
    inter = inter_w.clamp(min=0) * inter_h.clamp(min=0)
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    return inter / (area_p + area_t - inter).clamp(min=1e-12)


def detection_loss(outputs: DetectionOutputs, targets: AssignmentTargets,
                   cfg: PipelineConfig) -> dict[str, torch.Tensor]:
    """Three-term detection loss; returns l_cls, l_reg, l_center and l_det."""
    cls_logits, cls_targets = [], []
    pos_reg_pred, pos_reg_target = [], []
    pos_ctr_logits, pos_ctr_target = [], []
    for lvl in outputs.levels:
        logits = outputs.class_logits[lvl].permute(0, 2, 3, 1).reshape(outputs.class_logits[lvl].shape[0], -1)
        cls_logits.append(logits.reshape(-1))
        labels = targets.labels[lvl]
        cls_targets.append(labels.reshape(-1).to(logits.dtype))
        pos = labels.bool()
        if pos.any():
            reg = outputs.regression[lvl].permute(0, 2, 3, 1).reshape(labels.shape[0], -1, 4)
            ctr = outputs.centerness_logits[lvl].permute(0, 2, 3, 1).reshape(labels.shape[0], -1)
            pos_reg_pred.append(reg[pos])
            pos_reg_target.append(targets.offsets[lvl][pos])
            pos_ctr_logits.append(ctr[pos])
            pos_ctr_target.append(targets.centerness[lvl][pos])

    all_logits = torch.cat(cls_logits)
    all_targets = torch.cat(cls_targets)
    n_pos = int(all_targets.sum().item())
    l_cls = focal_loss(all_logits, all_targets, cfg.focal_gamma, cfg.focal_alpha) / max(n_pos, 1)
    if n_pos > 0:
        pred = torch.cat(pos_reg_pred)
        tgt = torch.cat(pos_reg_target)
        iou = iou_of_offsets(pred, tgt).clamp(min=1e-6)
        l_reg = (-torch.log(iou)).mean()
        l_center = F.binary_cross_entropy_with_logits(
            torch.cat(pos_ctr_logits), torch.cat(pos_ctr_target))
    else:
        l_reg = all_logits.sum() * 0
        l_center = all_logits.sum() * 0
    return {"l_cls": l_cls, "l_reg": l_reg, "l_center": l_center,
            "l_det": l_cls + l_reg + l_center}


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float,
        max_keep: int | None = None) -> list[int]:
    """Greedy NMS with a deterministic tie-break (score desc, then x0, y0)."""
    n = boxes.shape[0]
    if n == 0:
        return []
    # chained stable sorts: least significant key first
    order = torch.argsort(boxes[:, 1], stable=True)
    order = order[torch.argsort(boxes[order, 0], stable=True)]
    order = order[torch.argsort(-scores[order], stable=True)]
    x0, y0, x1, y1 = boxes[order].unbind(dim=1)
    areas = (x1 - x0).clamp(min=0) * (y1 - y0).clamp(min=0)
    alive = torch.ones(n, dtype=torch.bool, device=boxes.device)
    keep: list[int] = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        iw = (torch.minimum(x1[pos], x1) - torch.maximum(x0[pos], x0)).clamp(min=0)
        ih = (torch.minimum(y1[pos], y1) - torch.maximum(y0[pos], y0)).clamp(min=0)
        inter = iw * ih
        iou = inter / (areas[pos] + areas - inter).clamp(min=1e-12)
        alive &= iou <= iou_threshold
    return keep


def decode_detections(outputs: DetectionOutputs, image_size: tuple[int, int],
                      cfg: PipelineConfig) -> list[list[Detection]]:
    """Score, decode, clip, NMS and cap detections for every batch image."""
    h_img, w_img = image_size
    locations = pyramid_locations(outputs)
    batch = next(iter(outputs.class_logits.values())).shape[0]
    results: list[list[Detection]] = []
    for b in range(batch):
        boxes, scores, levels = [], [], []
        for lvl in outputs.levels:
            cls = torch.sigmoid(outputs.class_logits[lvl][b, 0].reshape(-1))
            ctr = torch.sigmoid(outputs.centerness_logits[lvl][b, 0].reshape(-1))
            score = cls * ctr
            mask = score > cfg.score_threshold
            if not mask.any():
                continue
            locs = locations[lvl][mask]
            off = outputs.regression[lvl][b].permute(1, 2, 0).reshape(-1, 4)[mask]
            x0 = (locs[:, 0] - off[:, 0]).clamp(0, w_img)
            y0 = (locs[:, 1] - off[:, 1]).clamp(0, h_img)
            x1 = (locs[:, 0] + off[:, 2]).clamp(0, w_img)
            y1 = (locs[:, 1] + off[:, 3]).clamp(0, h_img)
            valid = (x1 > x0) & (y1 > y0)
            stacked = torch.stack([x0, y0, x1, y1], dim=1)[valid]
            boxes.append(stacked)
            scores.append(score[mask][valid])
            levels.extend([lvl] * int(valid.sum().item()))
        if not boxes:
            results.append([])
            continue
        all_boxes = torch.cat(boxes)
        all_scores = torch.cat(scores)
        keep = nms(all_boxes, all_scores, cfg.nms_iou, max_keep=cfg.max_detections)
        dets = [Detection(box=Box(*(float(v) for v in all_boxes[i])),
                          score=float(all_scores[i]), level=levels[i])
                for i in keep]
        results.append(dets)
    return results

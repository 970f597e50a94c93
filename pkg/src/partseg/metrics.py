"""Evaluation metrics: global mIoU, part/region average precision, PCP, box AP.

AP matching is greedy by descending score with one-to-one ground-truth
assignment; a detection is a true positive when its overlap with the best
unmatched ground-truth instance of its image reaches the threshold. The
precision-recall curve integrates with the all-points interpolation
(precision envelope from the right).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Box, box_iou

AP_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass
class MetricReport:
    miou: float
    per_class_iou: list[float]
    ap_p_50: float
    ap_p_vol: float
    pcp_50: float
    ap_r_vol: float
    map_bbox: float
    extras: dict = field(default_factory=dict)

    FIELDS = ("miou", "ap_p_50", "ap_p_vol", "pcp_50", "ap_r_vol", "map_bbox")

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.FIELDS}
        out["per_class_iou"] = list(self.per_class_iou)
        out.update(self.extras)
        return out

    def table(self) -> str:
        width = max(len(n) for n in self.FIELDS)
        lines = ["metric".ljust(width) + "  value", "-" * (width + 8)]
        for name in self.FIELDS:
            lines.append(name.ljust(width) + f"  {getattr(self, name):.4f}")
        return "\n".join(lines)


def miou_global(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                num_classes: int) -> tuple[float, list[float]]:
    """Dataset-wide per-class IoU (background included) and their mean.

    Classes absent from both predictions and ground truth (zero union) are
    excluded from the mean and reported as NaN.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction/ground-truth counts differ")
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for pred, gt in zip(preds, gts):
        if pred.shape != gt.shape:
            raise ValueError("raster shapes differ")
        for c in range(num_classes):
            p = pred == c
            g = gt == c
            inter[c] += np.logical_and(p, g).sum()
            union[c] += np.logical_or(p, g).sum()
    per_class = [float(inter[c] / union[c]) if union[c] > 0 else float("nan")
                 for c in range(num_classes)]
    valid = [v for v in per_class if not np.isnan(v)]
    return (float(np.mean(valid)) if valid else float("nan")), per_class


def instance_part_miou(pred_raster: np.ndarray, gt_raster: np.ndarray) -> float:
    """Mean per-class IoU over part classes present in either instance."""
    present = sorted((set(np.unique(pred_raster)) | set(np.unique(gt_raster))) - {0})
    if not present:
        return 0.0
    total = 0.0
    for c in present:
        p = pred_raster == c
        g = gt_raster == c
        union = np.logical_or(p, g).sum()
        total += np.logical_and(p, g).sum() / union
    return float(total / len(present))


def region_iou(pred_raster: np.ndarray, gt_raster: np.ndarray) -> float:
    """Class-agnostic foreground-mask IoU of two instance rasters."""
    p = pred_raster > 0
    g = gt_raster > 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(p, g).sum() / union)


def _ranked_detections(pred_instances: Sequence[Sequence]) -> list[tuple[int, int, float]]:
    """Flatten per-image instances to (image, index, score), best first."""
    flat = [(img, idx, float(inst.fused_score))
            for img, instances in enumerate(pred_instances)
            for idx, inst in enumerate(instances)]
    flat.sort(key=lambda t: (-t[2], t[0], t[1]))
    return flat


def _greedy_match(pred_instances, gt_counts: list[int],
                  overlap: Callable[[int, int, int], float],
                  threshold: float) -> list[tuple[int, int, int]]:
    """Greedy one-to-one matching; returns (image, pred_idx, gt_idx) triples.

    ``overlap(img, pred_idx, gt_idx)`` scores one candidate pair; each
    detection takes the best-overlap unmatched ground truth of its image if
    that overlap reaches the threshold.
    """
    matched_gt: set[tuple[int, int]] = set()
    matches = []
    for img, idx, _ in _ranked_detections(pred_instances):
        best_gt, best_ov = -1, 0.0
        for g in range(gt_counts[img]):
            if (img, g) in matched_gt:
                continue
            ov = overlap(img, idx, g)
            if ov > best_ov:
                best_gt, best_ov = g, ov
        if best_gt >= 0 and best_ov >= threshold:
            matched_gt.add((img, best_gt))
            matches.append((img, idx, best_gt))
    return matches


def _average_precision(pred_instances, gt_counts: list[int],
                       overlap: Callable[[int, int, int], float],
                       threshold: float) -> float:
    """All-points interpolated AP at one overlap threshold."""
    n_gt = sum(gt_counts)
    if n_gt == 0:
        return float("nan")
    matches = {(img, idx) for img, idx, _ in _greedy_match(
        pred_instances, gt_counts, overlap, threshold)}
    flags = [(img, idx) in matches for img, idx, _ in _ranked_detections(pred_instances)]
    if not flags:
        return 0.0
    tp = np.cumsum(flags).astype(np.float64)
    fp = np.cumsum([not f for f in flags]).astype(np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


class _OverlapCache:
    def __init__(self, fn):
        self.fn = fn
        self.cache: dict[tuple[int, int, int], float] = {}

    def __call__(self, img: int, p: int, g: int) -> float:
        key = (img, p, g)
        if key not in self.cache:
            self.cache[key] = self.fn(img, p, g)
        return self.cache[key]


def ap_p(pred_instances, gt_instances,
         thresholds: Sequence[float] = AP_THRESHOLDS) -> dict[float, float]:
    """Part-level AP at each threshold; matching by instance part mIoU."""
    gt_counts = [len(g) for g in gt_instances]
    overlap = _OverlapCache(lambda img, p, g: instance_part_miou(
        pred_instances[img][p].parsing, gt_instances[img][g].parsing))
    return {t: _average_precision(pred_instances, gt_counts, overlap, t)
            for t in thresholds}


def ap_r(pred_instances, gt_instances,
         thresholds: Sequence[float] = AP_THRESHOLDS) -> dict[float, float]:
    """Region-level AP: matching by class-agnostic foreground IoU."""
    gt_counts = [len(g) for g in gt_instances]
    overlap = _OverlapCache(lambda img, p, g: region_iou(
        pred_instances[img][p].parsing, gt_instances[img][g].parsing))
    return {t: _average_precision(pred_instances, gt_counts, overlap, t)
            for t in thresholds}


def pcp_50(pred_instances, gt_instances) -> float:
    """Mean fraction of correctly parsed parts per ground-truth instance.

    Uses the AP^p matching at threshold 0.5; a matched instance's part is
    correct when its class IoU exceeds 0.5; unmatched instances score 0.
    """
    gt_counts = [len(g) for g in gt_instances]
    n_gt = sum(gt_counts)
    if n_gt == 0:
        return float("nan")
    overlap = _OverlapCache(lambda img, p, g: instance_part_miou(
        pred_instances[img][p].parsing, gt_instances[img][g].parsing))
    matches = _greedy_match(pred_instances, gt_counts, overlap, 0.5)
    total = 0.0
    for img, p, g in matches:
        gt = gt_instances[img][g]
        pred = pred_instances[img][p]
        parts = sorted(gt.part_ids)
        if not parts:
            continue
        correct = 0
        for c in parts:
            pm = pred.parsing == c
            gm = gt.parsing == c
            union = np.logical_or(pm, gm).sum()
            if union > 0 and np.logical_and(pm, gm).sum() / union > 0.5:
                correct += 1
        total += correct / len(parts)
    return float(total / n_gt)


def map_bbox(pred_boxes: Sequence[Sequence[tuple[Box, float]]],
             gt_boxes: Sequence[Sequence[Box]], threshold: float = 0.5) -> float:
    """Single-class box AP at one IoU threshold."""

    class _BoxRecord:
        def __init__(self, score):
            self.fused_score = score

    records = [[_BoxRecord(score) for _, score in per_img] for per_img in pred_boxes]
    gt_counts = [len(g) for g in gt_boxes]
    overlap = _OverlapCache(lambda img, p, g: box_iou(pred_boxes[img][p][0], gt_boxes[img][g]))
    return _average_precision(records, gt_counts, overlap, threshold)


def evaluate_dataset(prediction_sets, scenes, num_classes: int) -> MetricReport:
    """Full metric suite of predictions against ground-truth scenes."""
    import warnings

    pred_instances = [ps.instances for ps in prediction_sets]
    gt_instances = [list(s.instances) for s in scenes]
    if sum(len(g) for g in gt_instances) == 0:
        warnings.warn("dataset has no ground-truth instances; AP metrics undefined")
    miou, per_class = miou_global([ps.global_parsing for ps in prediction_sets],
                                  [s.global_parsing for s in scenes], num_classes)
    ap_p_scores = ap_p(pred_instances, gt_instances)
    ap_r_scores = ap_r(pred_instances, gt_instances)
    boxes_pred = [[(inst.box, inst.fused_score) for inst in ps.instances]
                  for ps in prediction_sets]
    boxes_gt = [[inst.box for inst in s.instances] for s in scenes]
    return MetricReport(
        miou=miou,
        per_class_iou=per_class,
        ap_p_50=ap_p_scores[0.5],
        ap_p_vol=float(np.mean([ap_p_scores[t] for t in AP_THRESHOLDS])),
        pcp_50=pcp_50(pred_instances, gt_instances),
        ap_r_vol=float(np.mean([ap_r_scores[t] for t in AP_THRESHOLDS])),
        map_bbox=map_bbox(boxes_pred, boxes_gt),
    )

"""Quality refinement: structural mIoU surrogate loss and mIoU re-scoring.

The surrogate loss is the convex Lovász extension of the per-class Jaccard
loss on softmax probabilities, averaged over the classes present in the
ground truth or the prediction; at saturated (0/1) predictions it equals
the mean per-present-class (1 - IoU) exactly.

The re-scoring subnetwork (two convolutions, three fully connected layers)
regresses the mIoU between the predicted crop and its ground truth; its
output is fused with the detection score by a geometric mean for ranking.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import PipelineConfig


def lovasz_gradient(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Jaccard-loss Lovász extension for sorted 0/1 labels."""
    n = gt_sorted.numel()
    total = gt_sorted.sum()
    intersection = total - gt_sorted.cumsum(0)
    union = total + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if n > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_miou_loss(parsing_logits: torch.Tensor, gt_crop: torch.Tensor) -> torch.Tensor:
    """Lovász softmax loss of a (K, H, W) logit map against (H, W) labels."""
    if parsing_logits.ndim != 3:
        raise ValueError(f"expected (K, H, W) logits, got {tuple(parsing_logits.shape)}")
    k = parsing_logits.shape[0]
    probs = torch.softmax(parsing_logits, dim=0).reshape(k, -1)
    labels = gt_crop.reshape(-1)
    pred_labels = parsing_logits.argmax(dim=0).reshape(-1)
    present = sorted(set(torch.unique(labels).tolist()) | set(torch.unique(pred_labels).tolist()))
    losses = []
    for c in present:
        fg = (labels == c).to(probs.dtype)
        errors = (fg - probs[c]).abs()
        errors_sorted, order = torch.sort(errors, descending=True)
        grad = lovasz_gradient(fg[order])
        losses.append(torch.dot(errors_sorted, grad))
    return torch.stack(losses).mean()


def lovasz_miou_loss_batch(parsing_logits: torch.Tensor, gt_crops: torch.Tensor) -> torch.Tensor:
    """Mean Lovász loss over a batch of (N, K, H, W) crops."""
    if parsing_logits.shape[0] == 0:
        return parsing_logits.sum() * 0
    return torch.stack([lovasz_miou_loss(parsing_logits[i], gt_crops[i])
                        for i in range(parsing_logits.shape[0])]).mean()


def compute_map_miou(pred_crop, gt_crop) -> float:
    """Mean per-class IoU over part classes present in either raster, in [0, 1].

    Background is not a part class; two all-background crops score 1.0.
    """
    pred = torch.as_tensor(pred_crop).reshape(-1)
    gt = torch.as_tensor(gt_crop).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("crops must share a shape")
    present = sorted((set(torch.unique(pred).tolist()) | set(torch.unique(gt).tolist())) - {0})
    if not present:
        return 1.0
    ious = []
    for c in present:
        p = pred == c
        g = gt == c
        inter = (p & g).sum().item()
        union = (p | g).sum().item()
        ious.append(inter / union)
    return float(sum(ious) / len(ious))


def refinement_loss(score_pred: torch.Tensor, miou_target: torch.Tensor,
                    lovasz: torch.Tensor, cfg: PipelineConfig) -> torch.Tensor:
    """theta * structural loss + gamma * MSE of the quality score."""
    return cfg.theta * lovasz + cfg.gamma * (score_pred - miou_target) ** 2


def fuse_instance_score(det_score: float, miou_score: float) -> float:
    """Geometric mean of detection confidence and predicted parsing quality."""
    return math.sqrt(det_score * miou_score)


class MiouScoreNet(nn.Module):
    """Predicts the crop-level parsing quality in [0, 1].

    Consumes the concatenation of the (detached) parsing logits, pooled to
    the RoI resolution, with the context-encoded RoI feature.
    """

    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        c_in = cfg.k_parts + cfg.channels
        c_mid = 32
        self.conv1 = nn.Conv2d(c_in, c_mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c_mid, c_mid, 3, stride=2, padding=1)
        spatial = math.ceil(cfg.roi_size / 4)
        self.fc1 = nn.Linear(c_mid * spatial * spatial, 128)
        self.fc2 = nn.Linear(128, 32)
        self.fc3 = nn.Linear(32, 1)

    def forward(self, parsing_logits: torch.Tensor, roi_feature: torch.Tensor) -> torch.Tensor:
        """(N, K, R2, R2) logits + (N, C, R, R) features -> (N,) scores."""
        pooled = F.adaptive_avg_pool2d(parsing_logits.detach(), roi_feature.shape[-2:])
        x = torch.cat([pooled, roi_feature], dim=1)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = x.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return torch.sigmoid(self.fc3(x)).squeeze(1)

"""Inference pipeline: detect, parse each box, re-score, paste to a raster."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import PipelineConfig
from .geometry import Box
from .models.detection import decode_detections
from .models.network import InstanceParsingNetwork
from .models.refinement import fuse_instance_score


@dataclass
class InstanceRecord:
    """One predicted human instance."""

    box: Box
    det_score: float
    miou_score: float | None
    fused_score: float
    parsing: np.ndarray          # (H, W) uint8 full-image raster
    edges: np.ndarray | None     # (H, W) uint8 binary raster


@dataclass
class PredictionSet:
    """All instances of one image (sorted by descending fused score)."""

    instances: list[InstanceRecord]
    global_parsing: np.ndarray

    @classmethod
    def empty(cls, image_size: tuple[int, int]) -> "PredictionSet":
        return cls(instances=[], global_parsing=np.zeros(image_size, dtype=np.uint8))


def paste_global(instances: list[InstanceRecord], image_size: tuple[int, int]) -> np.ndarray:
    """Overlay instance rasters; the highest fused score wins overlaps."""
    out = np.zeros(image_size, dtype=np.uint8)
    for inst in sorted(instances, key=lambda r: r.fused_score):
        mask = inst.parsing > 0
        out[mask] = inst.parsing[mask]
    return out


def _paste_crop(probs: torch.Tensor, box: Box, image_size: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize class probabilities to the box extent, then argmax."""
    h_img, w_img = image_size
    x0 = max(0, int(round(box.x0)))
    y0 = max(0, int(round(box.y0)))
    x1 = min(w_img, int(round(box.x1)))
    y1 = min(h_img, int(round(box.y1)))
    out = np.zeros(image_size, dtype=np.uint8)
    if x1 <= x0 or y1 <= y0:
        return out
    resized = F.interpolate(probs.unsqueeze(0), size=(y1 - y0, x1 - x0),
                            mode="bilinear", align_corners=False)[0]
    labels = resized.argmax(dim=0).to(torch.uint8).cpu().numpy()
    out[y0:y1, x0:x1] = labels
    return out


def _paste_edge(edge_logits: torch.Tensor, box: Box, image_size: tuple[int, int]) -> np.ndarray:
    h_img, w_img = image_size
    x0 = max(0, int(round(box.x0)))
    y0 = max(0, int(round(box.y0)))
    x1 = min(w_img, int(round(box.x1)))
    y1 = min(h_img, int(round(box.y1)))
    out = np.zeros(image_size, dtype=np.uint8)
    if x1 <= x0 or y1 <= y0:
        return out
    prob = torch.sigmoid(F.interpolate(edge_logits.unsqueeze(0), size=(y1 - y0, x1 - x0),
                                       mode="bilinear", align_corners=False))[0, 0]
    out[y0:y1, x0:x1] = (prob > 0.5).to(torch.uint8).cpu().numpy()
    return out


@torch.no_grad()
def predict(network: InstanceParsingNetwork, image: np.ndarray,
            cfg: PipelineConfig) -> PredictionSet:
    """Full pipeline on one (H, W, 3) image in [0, 1]."""
    was_training = network.training
    network.eval()
    try:
        h_img, w_img = image.shape[:2]
        device = next(network.parameters()).device
        tensor = torch.from_numpy(np.ascontiguousarray(image)).to(device)
        tensor = tensor.permute(2, 0, 1).unsqueeze(0).float()
        pyramid = network.forward_pyramid(tensor)
        outputs = network.forward_detection(pyramid)
        detections = decode_detections(outputs, (h_img, w_img), cfg)[0]
        if not detections:
            return PredictionSet.empty((h_img, w_img))
        boxes = torch.tensor([d.box.as_tuple() for d in detections],
                             dtype=torch.float32, device=device)
        image_index = torch.zeros(len(detections), dtype=torch.long, device=device)
        pred, encoded = network.forward_parsing(pyramid, image_index, boxes)
        scores = network.forward_scores(pred, encoded)
        records = []
        for i, det in enumerate(detections):
            probs = torch.softmax(pred.parsing_logits[i], dim=0)
            parsing = _paste_crop(probs, det.box, (h_img, w_img))
            edges = None
            if pred.edge_logits is not None:
                edges = _paste_edge(pred.edge_logits[i], det.box, (h_img, w_img))
            miou_score = float(scores[i]) if scores is not None else None
            fused = fuse_instance_score(det.score, miou_score) if miou_score is not None else det.score
            records.append(InstanceRecord(box=det.box, det_score=det.score,
                                          miou_score=miou_score, fused_score=fused,
                                          parsing=parsing, edges=edges))
        records.sort(key=lambda r: -r.fused_score)
        return PredictionSet(instances=records,
                             global_parsing=paste_global(records, (h_img, w_img)))
    finally:
        if was_training:
            network.train()


def predict_dataset(network: InstanceParsingNetwork, scenes, cfg: PipelineConfig) -> list[PredictionSet]:
    return [predict(network, scene.image, cfg) for scene in scenes]

"""The full detect-parse-refine network."""
from __future__ import annotations

import torch
import torch.nn as nn

from ..config import PipelineConfig
from .backbone import FeaturePyramid, FpnNetwork
from .detection import DetectionHead, DetectionOutputs
from .parsing import ParsingHead, RoiPrediction
from .refinement import MiouScoreNet
from .roi_align import roi_align_batch


class InstanceParsingNetwork(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        self.fpn = FpnNetwork(cfg.channels)
        self.detection = DetectionHead(cfg.channels, cfg.head_convs)
        self.parsing = ParsingHead(cfg)
        self.score_net = MiouScoreNet(cfg) if cfg.use_miou_score else None

    def forward_pyramid(self, images: torch.Tensor) -> FeaturePyramid:
        return self.fpn(images)

    def forward_detection(self, pyramid: FeaturePyramid) -> DetectionOutputs:
        return self.detection(pyramid)

    def forward_parsing(self, pyramid: FeaturePyramid, image_index: torch.Tensor,
                        boxes: torch.Tensor) -> tuple[RoiPrediction, torch.Tensor]:
        """Run the parse head on boxes; returns predictions + encoded RoIs.

        ``image_index`` maps each box to its batch image; boxes are image-plane
        (N, 4) coordinates and are treated as constants.
        """
        if image_index.numel() and not bool((image_index[1:] >= image_index[:-1]).all()):
            raise ValueError("boxes must be sorted by image index")
        p3 = pyramid[3]
        rois = []
        for b in range(p3.shape[0]):
            sel = image_index == b
            if sel.any():
                rois.append(roi_align_batch(p3[b], boxes[sel].detach(), self.cfg.roi_size, 8))
        if not rois:
            empty = p3.new_zeros((0, self.cfg.channels, self.cfg.roi_size, self.cfg.roi_size))
            return RoiPrediction(parsing_logits=empty[:, :0], edge_logits=None), empty
        roi_feats = torch.cat(rois)
        return self.parsing.forward_with_features(roi_feats)

    def forward_scores(self, pred: RoiPrediction, encoded_rois: torch.Tensor) -> torch.Tensor | None:
        if self.score_net is None or pred.parsing_logits.shape[0] == 0:
            return None
        return self.score_net(pred.parsing_logits, encoded_rois)

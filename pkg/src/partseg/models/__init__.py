from .backbone import Backbone, FeaturePyramid, FpnNetwork
from .context import AsppContext, NonLocalBlock, PspContext, PyramidGatherExcite, build_context
from .detection import (
    AssignmentTargets,
    Detection,
    DetectionHead,
    DetectionOutputs,
    assign_targets,
    decode_detections,
    detection_loss,
    focal_loss,
    level_locations,
    level_offset_ranges,
    nms,
    pyramid_locations,
)
from .network import InstanceParsingNetwork
from .parsing import (
    ParsingHead,
    RoiPrediction,
    crop_labels,
    edge_loss,
    edge_targets_from_crop,
    parsing_loss,
    prediction_loss,
)
from .refinement import (
    MiouScoreNet,
    compute_map_miou,
    fuse_instance_score,
    lovasz_miou_loss,
    lovasz_miou_loss_batch,
    refinement_loss,
)
from .roi_align import roi_align, roi_align_batch

__all__ = [
    "AssignmentTargets",
    "AsppContext",
    "Backbone",
    "Detection",
    "DetectionHead",
    "DetectionOutputs",
    "FeaturePyramid",
    "FpnNetwork",
    "InstanceParsingNetwork",
    "MiouScoreNet",
    "NonLocalBlock",
    "ParsingHead",
    "PspContext",
    "PyramidGatherExcite",
    "RoiPrediction",
    "assign_targets",
    "build_context",
    "compute_map_miou",
    "crop_labels",
    "decode_detections",
    "detection_loss",
    "edge_loss",
    "edge_targets_from_crop",
    "focal_loss",
    "fuse_instance_score",
    "level_locations",
    "level_offset_ranges",
    "lovasz_miou_loss",
    "lovasz_miou_loss_batch",
    "nms",
    "parsing_loss",
    "prediction_loss",
    "pyramid_locations",
    "refinement_loss",
    "roi_align",
    "roi_align_batch",
]

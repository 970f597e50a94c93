"""Anchor-free instance-level part segmentation on synthetic scenes."""

from .config import PipelineConfig
from .data import Scene, extract_edge_labels, generate_dataset, generate_scene
from .estimator import PartInstanceSegmenter
from .geometry import Box, Location, OffsetVector, box_iou, centerness, compute_offsets
from .inference import InstanceRecord, PredictionSet, paste_global, predict
from .metrics import MetricReport, evaluate_dataset
from .models import InstanceParsingNetwork
from .training import train

__all__ = [
    "Box",
    "InstanceParsingNetwork",
    "InstanceRecord",
    "Location",
    "MetricReport",
    "OffsetVector",
    "PartInstanceSegmenter",
    "PipelineConfig",
    "PredictionSet",
    "Scene",
    "box_iou",
    "centerness",
    "compute_offsets",
    "evaluate_dataset",
    "extract_edge_labels",
    "generate_dataset",
    "generate_scene",
    "paste_global",
    "predict",
    "train",
]

__version__ = "0.1.0"

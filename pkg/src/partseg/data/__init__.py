from .edges import extract_edge_labels
from .io import DatasetError, load_dataset, save_dataset
from .synthetic import GroundTruthInstance, Scene, generate_dataset, generate_scene

__all__ = [
    "DatasetError",
    "GroundTruthInstance",
    "Scene",
    "extract_edge_labels",
    "generate_dataset",
    "generate_scene",
    "load_dataset",
    "save_dataset",
]

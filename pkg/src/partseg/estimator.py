"""Scikit-learn style estimator wrapping the full pipeline.

``fit`` trains the detect-parse-refine network on a list of scenes and
``predict`` returns per-image instance predictions, so the model slots into
pipelines and parameter searches that speak the estimator protocol.
"""
from __future__ import annotations

import tempfile

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import PipelineConfig
from .data.synthetic import Scene
from .inference import PredictionSet, predict
from .metrics import MetricReport, evaluate_dataset
from .training import train


def _as_image(x) -> np.ndarray:
    image = x.image if isinstance(x, Scene) else np.asarray(x)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.dtype.kind not in "fc":
        raise ValueError(f"images must be float arrays in [0, 1], got dtype {image.dtype}")
    if float(image.min()) < -1e-6 or float(image.max()) > 1 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    return image.astype(np.float32)


class PartInstanceSegmenter(BaseEstimator):
    """Detects person instances and labels their parts, pixel by pixel.

    Parameters mirror the pipeline config; anything not exposed here can be
    overridden through ``config_overrides``.
    """

    def __init__(self, k_parts: int = 7, image_size: int = 128, channels: int = 64,
                 roi_size: int = 32, context_module: str = "pgec",
                 use_edge_branch: bool = True, use_gn: bool = True,
                 use_miou_loss: bool = True, use_miou_score: bool = True,
                 epochs: int = 60, batch_size: int = 8, base_lr: float = 0.005,
                 seed: int = 0, config_overrides: dict | None = None):
        self.k_parts = k_parts
        self.image_size = image_size
        self.channels = channels
        self.roi_size = roi_size
        self.context_module = context_module
        self.use_edge_branch = use_edge_branch
        self.use_gn = use_gn
        self.use_miou_loss = use_miou_loss
        self.use_miou_score = use_miou_score
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.seed = seed
        self.config_overrides = config_overrides

    def _build_config(self) -> PipelineConfig:
        overrides = dict(self.config_overrides or {})
        params = {name: getattr(self, name) for name in (
            "k_parts", "image_size", "channels", "roi_size", "context_module",
            "use_edge_branch", "use_gn", "use_miou_loss", "use_miou_score",
            "epochs", "batch_size", "base_lr", "seed")}
        params.update(overrides)
        return PipelineConfig().with_overrides(params)

    @staticmethod
    def _validate_scenes(X) -> list[Scene]:
        if not isinstance(X, (list, tuple)) or not X:
            raise ValueError("expected a non-empty list of scenes")
        for i, scene in enumerate(X):
            if not isinstance(scene, Scene):
                raise TypeError(f"X[{i}] is not a Scene")
            _as_image(scene)
        return list(X)

    def fit(self, X, y=None) -> "PartInstanceSegmenter":
        """Train on a list of ground-truth scenes (labels ride along in X)."""
        scenes = self._validate_scenes(X)
        cfg = self._build_config()
        with tempfile.TemporaryDirectory() as tmp:
            result = train(cfg, scenes, tmp)
        self.config_ = cfg
        self.model_ = result.network
        self.history_ = result.history
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict/score")

    def predict(self, X) -> list[PredictionSet]:
        """Per-image instance predictions for scenes or raw (H, W, 3) images."""
        self._check_fitted()
        if not isinstance(X, (list, tuple)):
            raise ValueError("expected a list of images or scenes")
        return [predict(self.model_, _as_image(x), self.config_) for x in X]

    def evaluate(self, X) -> MetricReport:
        """Full metric report against the scenes' ground truth."""
        self._check_fitted()
        scenes = self._validate_scenes(X)
        preds = self.predict(scenes)
        return evaluate_dataset(preds, scenes, self.config_.k_parts)

    def score(self, X, y=None) -> float:
        """Global mIoU on scenes with ground truth (higher is better)."""
        return self.evaluate(X).miou

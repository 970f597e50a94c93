import math

import numpy as np
import pytest
import torch

from oracles import central_differences, gradient_relative_error
from partseg.config import PipelineConfig
from partseg.models.detection import (
    AssignmentTargets,
    DetectionOutputs,
    detection_loss,
    focal_loss,
    iou_of_offsets,
)


def single_location_outputs(cls, ctr, reg, dtype=torch.float64):
    return DetectionOutputs(
        class_logits={3: torch.tensor(cls, dtype=dtype).view(1, 1, 1, 1)},
        centerness_logits={3: torch.tensor(ctr, dtype=dtype).view(1, 1, 1, 1)},
        regression={3: torch.tensor(reg, dtype=dtype).view(1, 4, 1, 1)},
    )


def single_location_targets(label, offsets, center, dtype=torch.float64):
    return AssignmentTargets(
        labels={3: torch.tensor([[label]], dtype=torch.long)},
        offsets={3: torch.tensor([offsets], dtype=dtype).view(1, 1, 4)},
        centerness={3: torch.tensor([[center]], dtype=dtype)},
        matched_box={3: torch.tensor([[0 if label else -1]])},
    )


class TestFocalLoss:
    def test_exponent_zero_weight_one_reduces_to_cross_entropy(self):
        # one positive location at probability 0.5 -> ln 2
        logits = torch.tensor([0.0], dtype=torch.float64)
        targets = torch.tensor([1.0], dtype=torch.float64)
        loss = focal_loss(logits, targets, gamma=0.0, alpha=1.0)
        assert float(loss) == pytest.approx(math.log(2), rel=1e-12)

    def test_defaults_downweight_easy_examples(self):
        easy = focal_loss(torch.tensor([6.0]), torch.tensor([1.0]), 2.0, 0.25)
        hard = focal_loss(torch.tensor([-6.0]), torch.tensor([1.0]), 2.0, 0.25)
        assert float(easy) < float(hard) * 1e-3


class TestRegressionLoss:
    def test_perfect_prediction_is_zero(self):
        cfg = PipelineConfig()
        outputs = single_location_outputs(2.0, 0.0, [8.0, 8.0, 8.0, 8.0])
        targets = single_location_targets(1, [8.0, 8.0, 8.0, 8.0], 1.0)
        losses = detection_loss(outputs, targets, cfg)
        assert float(losses["l_reg"]) == pytest.approx(0.0, abs=1e-9)

    def test_half_iou_gives_ln2(self):
        # pred box area 256, target shifts bottom side: intersection 128
        cfg = PipelineConfig()
        outputs = single_location_outputs(2.0, 0.0, [8.0, 8.0, 8.0, 8.0])
        targets = single_location_targets(1, [8.0, 8.0, 8.0, 0.0], 0.0)
        pred = torch.tensor([8.0, 8.0, 8.0, 8.0])
        tgt = torch.tensor([8.0, 8.0, 8.0, 0.0])
        assert float(iou_of_offsets(pred, tgt)) == pytest.approx(0.5)
        losses = detection_loss(outputs, targets, cfg)
        assert float(losses["l_reg"]) == pytest.approx(math.log(2), rel=1e-6)

    def test_zero_positives_normalises_by_one(self):
        cfg = PipelineConfig()
        outputs = single_location_outputs(0.0, 0.0, [1.0, 1.0, 1.0, 1.0])
        targets = single_location_targets(0, [0.0, 0.0, 0.0, 0.0], 0.0)
        losses = detection_loss(outputs, targets, cfg)
        assert float(losses["l_reg"]) == 0.0
        assert float(losses["l_center"]) == 0.0
        prob = 1 / (1 + math.exp(0.0))
        expected = (1 - cfg.focal_alpha) * prob ** cfg.focal_gamma * (-math.log(1 - 0.5))
        assert float(losses["l_cls"]) == pytest.approx(expected, rel=1e-6)

    def test_composition(self):
        cfg = PipelineConfig()
        outputs = single_location_outputs(1.3, -0.4, [5.0, 6.0, 7.0, 8.0])
        targets = single_location_targets(1, [6.0, 6.0, 6.0, 6.0], 0.73)
        losses = detection_loss(outputs, targets, cfg)
        total = losses["l_cls"] + losses["l_reg"] + losses["l_center"]
        assert float(losses["l_det"]) == pytest.approx(float(total))


def torch_gradient(fn, x: np.ndarray) -> np.ndarray:
    t = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(t).backward()
    return t.grad.numpy().copy()


class TestGradients:
    """Central finite differences at double precision, rel. err < 1e-4."""

    def test_focal_loss_gradient(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            logits = rng.normal(0, 2, size=n)
            targets = torch.tensor(rng.integers(0, 2, size=n).astype(np.float64))

            def fn_t(t):
                return focal_loss(t, targets, 2.0, 0.25)

            def fn_np(x):
                return float(fn_t(torch.tensor(x, dtype=torch.float64)))

            analytic = torch_gradient(fn_t, logits)
            numeric = central_differences(fn_np, logits.copy())
            assert gradient_relative_error(analytic, numeric) < 1e-4

    def test_iou_loss_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 5))
            pred = rng.uniform(1.0, 20.0, size=(n, 4))
            tgt = torch.tensor(rng.uniform(1.0, 20.0, size=(n, 4)))

            def fn_t(t):
                return (-torch.log(iou_of_offsets(t, tgt).clamp(min=1e-6))).mean()

            def fn_np(x):
                return float(fn_t(torch.tensor(x, dtype=torch.float64)))

            analytic = torch_gradient(fn_t, pred)
            numeric = central_differences(fn_np, pred.copy())
            assert gradient_relative_error(analytic, numeric) < 1e-4

    def test_centerness_bce_gradient(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(2, 9))
            logits = rng.normal(0, 2, size=n)
            target = torch.tensor(rng.uniform(0, 1, size=n))

            def fn_t(t):
                return torch.nn.functional.binary_cross_entropy_with_logits(t, target)

            def fn_np(x):
                return float(fn_t(torch.tensor(x, dtype=torch.float64)))

            analytic = torch_gradient(fn_t, logits)
            numeric = central_differences(fn_np, logits.copy())
            assert gradient_relative_error(analytic, numeric) < 1e-4

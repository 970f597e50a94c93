import numpy as np
import pytest
import torch

from oracles import central_differences, gradient_relative_error, jaccard_vertex_oracle
from partseg.config import PipelineConfig
from partseg.models.refinement import (
    MiouScoreNet,
    compute_map_miou,
    fuse_instance_score,
    lovasz_miou_loss,
    refinement_loss,
)


def saturated_logits(labels: torch.Tensor, k: int, scale: float = 40.0) -> torch.Tensor:
    one_hot = torch.nn.functional.one_hot(labels.long(), k).permute(2, 0, 1)
    return (one_hot.double() * 2 - 1) * scale


class TestLovasz:
    def test_perfect_prediction_is_zero(self):
        gt = torch.tensor([[0, 1], [2, 1]])
        loss = lovasz_miou_loss(saturated_logits(gt, 4), gt)
        assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_two_pixel_hand_case(self):
        # gt = (A, A), prediction (A, B): Jaccard losses 0.5 and 1.0 -> 0.75
        gt = torch.tensor([[1, 1]])
        pred = torch.tensor([[1, 2]])
        loss = lovasz_miou_loss(saturated_logits(pred, 3), gt)
        assert float(loss) == pytest.approx(0.75, abs=1e-9)

    def test_vertex_equals_brute_force_jaccard(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.integers(2, 5))
            gt = rng.integers(0, k, size=(4, 4))
            pred = rng.integers(0, k, size=(4, 4))
            loss = lovasz_miou_loss(saturated_logits(torch.tensor(pred), k), torch.tensor(gt))
            want = jaccard_vertex_oracle(pred, gt)
            assert abs(float(loss) - want) < 1e-6

    def test_loss_within_unit_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            k = int(rng.integers(2, 5))
            logits = torch.tensor(rng.normal(size=(k, 5, 5)))
            gt = torch.tensor(rng.integers(0, k, size=(5, 5)))
            loss = float(lovasz_miou_loss(logits, gt))
            assert 0.0 <= loss <= 1.0

    def test_improving_a_margin_never_raises_loss(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            k = 3
            logits = torch.tensor(rng.normal(size=(k, 3, 3)))
            gt = torch.tensor(rng.integers(0, k, size=(3, 3)))
            base = float(lovasz_miou_loss(logits, gt))
            improved = logits.clone()
            y, x = int(rng.integers(3)), int(rng.integers(3))
            improved[gt[y, x], y, x] += 0.5  # push the true class up
            assert float(lovasz_miou_loss(improved, gt)) <= base + 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            k = int(rng.integers(2, 5))
            logits = rng.normal(0, 2, size=(k, 3, 3))
            gt = torch.tensor(rng.integers(0, k, size=(3, 3)))

            def fn_np(x):
                return float(lovasz_miou_loss(torch.tensor(x, dtype=torch.float64), gt).detach())

            t = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
            lovasz_miou_loss(t, gt).backward()
            numeric = central_differences(fn_np, logits.copy())
            assert gradient_relative_error(t.grad.numpy(), numeric) < 1e-4


class TestMapMiou:
    def test_identical_crops(self):
        crop = torch.tensor([[1, 2], [0, 1]])
        assert compute_map_miou(crop, crop) == 1.0

    def test_half_covered(self):
        gt = torch.tensor([[1, 1, 2, 2]])
        pred = torch.tensor([[1, 1, 1, 1]])
        assert compute_map_miou(pred, gt) == pytest.approx(0.25)

    def test_disjoint_same_class(self):
        gt = torch.tensor([[1, 1, 0, 0]])
        pred = torch.tensor([[0, 0, 1, 1]])
        assert compute_map_miou(pred, gt) == 0.0

    def test_all_background_defined_as_one(self):
        z = torch.zeros(3, 3, dtype=torch.long)
        assert compute_map_miou(z, z) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = torch.tensor(rng.integers(0, 4, size=(6, 6)))
            b = torch.tensor(rng.integers(0, 4, size=(6, 6)))
            assert compute_map_miou(a, b) == pytest.approx(compute_map_miou(b, a))


class TestRefinementLoss:
    def test_zero_case(self):
        cfg = PipelineConfig()
        loss = refinement_loss(torch.tensor(0.4), torch.tensor(0.4), torch.tensor(0.0), cfg)
        assert float(loss) == 0.0

    def test_hand_case(self):
        cfg = PipelineConfig()
        loss = refinement_loss(torch.tensor(0.2), torch.tensor(0.7), torch.tensor(0.5), cfg)
        assert float(loss) == pytest.approx(2 * 0.5 + 0.25, rel=1e-6)

    def test_weights_default_to_pinned_values(self):
        cfg = PipelineConfig()
        assert cfg.theta == 2.0
        assert cfg.gamma == 1.0


class TestFuseScore:
    def test_perfect(self):
        assert fuse_instance_score(1.0, 1.0) == 1.0

    def test_idempotent_on_equal_inputs(self):
        for s in (0.1, 0.33, 0.9):
            assert fuse_instance_score(s, s) == pytest.approx(s)

    def test_hand_case(self):
        assert fuse_instance_score(0.9, 0.4) == pytest.approx(0.6)

    def test_monotonicity(self):
        assert fuse_instance_score(0.8, 0.5) > fuse_instance_score(0.7, 0.5)
        assert fuse_instance_score(0.8, 0.5) > fuse_instance_score(0.8, 0.4)

    def test_ranking_invariant_to_common_rescaling(self):
        rng = np.random.default_rng(5)
        det = rng.uniform(0.1, 1.0, size=10)
        miou = rng.uniform(0.1, 1.0, size=10)
        fused = [fuse_instance_score(d, m) for d, m in zip(det, miou)]
        scaled = [fuse_instance_score(d * 0.37, m) for d, m in zip(det, miou)]
        assert np.argsort(fused).tolist() == np.argsort(scaled).tolist()


class TestScoreNet:
    @pytest.mark.parametrize("roi", [14, 32])
    def test_output_in_unit_interval(self, roi):
        cfg = PipelineConfig(channels=16, roi_size=roi)
        net = MiouScoreNet(cfg)
        logits = torch.randn(3, cfg.k_parts, 2 * roi, 2 * roi)
        feats = torch.randn(3, 16, roi, roi)
        out = net(logits, feats)
        assert out.shape == (3,)
        assert (out >= 0).all() and (out <= 1).all()

    def test_logits_are_detached(self):
        cfg = PipelineConfig(channels=16)
        net = MiouScoreNet(cfg)
        logits = torch.randn(1, cfg.k_parts, 64, 64, requires_grad=True)
        feats = torch.randn(1, 16, 32, 32, requires_grad=True)
        net(logits, feats).sum().backward()
        assert logits.grad is None
        assert feats.grad is not None

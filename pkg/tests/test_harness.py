import json
import math

import numpy as np
import pytest
import torch

from partseg.config import PipelineConfig
from partseg.data.synthetic import generate_dataset
from partseg.models.network import InstanceParsingNetwork
from partseg.training import (
    TrainingDiverged,
    augment_scene,
    load_checkpoint,
    lr_at_epoch,
    restore_network,
    sample_parse_rois,
    save_checkpoint,
    smoothed_series,
    total_loss,
    train,
)


def t(x):
    return torch.tensor(float(x))


class TestTotalLoss:
    def test_zero(self):
        assert float(total_loss(t(0), t(0), t(0))) == 0.0

    def test_sum(self):
        assert float(total_loss(t(1.0), t(2.0), t(1.25))) == pytest.approx(4.25)

    def test_refinement_off_composition(self):
        assert float(total_loss(t(1.0), t(2.0), t(0.0))) == pytest.approx(3.0)

    def test_non_finite_names_term(self):
        with pytest.raises(FloatingPointError, match="l_pred"):
            total_loss(t(1.0), t(float("nan")), t(0.0))
        with pytest.raises(FloatingPointError, match="l_refine"):
            total_loss(t(1.0), t(0.0), t(float("inf")))


class TestSchedule:
    def test_staircase(self):
        cfg = PipelineConfig(epochs=60, lr_decay_epochs=(40, 52))
        assert lr_at_epoch(cfg, 0) == cfg.base_lr
        assert lr_at_epoch(cfg, 39) == cfg.base_lr
        assert lr_at_epoch(cfg, 40) == pytest.approx(cfg.base_lr / 10)
        assert lr_at_epoch(cfg, 52) == pytest.approx(cfg.base_lr / 100)

    def test_smoothed_series(self):
        values = [5.0, 4.0, 3.0, 2.0, 1.0, 1.0]
        out = smoothed_series(values, window=5)
        assert out == [3.0, 2.2]
        assert smoothed_series([1.0, 2.0], window=5) == []


class TestAugment:
    def test_disabled_jitter_returns_scene(self):
        cfg = PipelineConfig(scale_jitter=0.0)
        scene = generate_dataset(cfg, 1, 0)[0]
        assert augment_scene(scene, np.random.default_rng(0), cfg) is scene

    def test_keeps_canvas_and_invariants(self):
        cfg = PipelineConfig(scale_jitter=0.125)
        scene = generate_dataset(cfg, 1, 1)[0]
        rng = np.random.default_rng(2)
        for _ in range(10):
            out = augment_scene(scene, rng, cfg)
            assert out.global_parsing.shape == scene.global_parsing.shape
            assert out.image.shape == scene.image.shape
            for inst in out.instances:
                rows, cols = np.nonzero(inst.parsing)
                assert inst.box.x0 == cols.min() and inst.box.x1 == cols.max() + 1
                assert inst.box.y0 == rows.min() and inst.box.y1 == rows.max() + 1


class TestRoiSampling:
    def test_includes_gt_and_caps(self):
        cfg = PipelineConfig(max_train_rois=4)
        scenes = generate_dataset(cfg, 2, 5)
        rng = np.random.default_rng(0)
        rois = sample_parse_rois(scenes, [[] for _ in scenes], rng, cfg)
        assert len(rois) <= 4
        assert all(r[0] <= rois[i + 1][0] for i, r in enumerate(rois[:-1]))

    def test_gt_boxes_present_without_cap(self):
        cfg = PipelineConfig(max_train_rois=1000, box_jitter=0.1)
        scenes = generate_dataset(cfg, 1, 6)
        rng = np.random.default_rng(0)
        rois = sample_parse_rois(scenes, [[]], rng, cfg)
        gt_boxes = {inst.box.as_tuple() for inst in scenes[0].instances}
        sampled = {r[1].as_tuple() for r in rois}
        assert gt_boxes <= sampled
        # one jittered copy per instance
        assert len(rois) == 2 * len(scenes[0].instances)


@pytest.fixture(scope="module")
def micro_run(tmp_path_factory):
    cfg = PipelineConfig(channels=16, head_convs=2, image_size=64, epochs=2,
                         lr_decay_epochs=(1,), batch_size=2, n_instances_max=2,
                         max_train_rois=4, seed=7)
    scenes = generate_dataset(cfg, 4, 11)
    out = tmp_path_factory.mktemp("run")
    result = train(cfg, scenes, out)
    return cfg, scenes, out, result


class TestTrainLoop:
    def test_history_rows_per_epoch(self, micro_run):
        cfg, _, out, result = micro_run
        assert len(result.history) == cfg.epochs
        assert (out / "loss_log.json").exists()
        with open(out / "loss_log.json") as fh:
            assert len(json.load(fh)) == cfg.epochs

    def test_lr_follows_schedule(self, micro_run):
        cfg, _, _, result = micro_run
        assert result.history[0]["lr"] == cfg.base_lr
        assert result.history[1]["lr"] == pytest.approx(cfg.base_lr / 10)

    def test_step_log_totals_are_exact_sums(self, micro_run):
        _, _, _, result = micro_run
        for row in result.step_log:
            assert row["l_total"] == row["l_det"] + row["l_pred"] + row["l_refine"]

    def test_determinism_across_runs(self, micro_run, tmp_path):
        cfg, scenes, _, result = micro_run
        rerun = train(cfg, scenes, tmp_path / "again")
        assert len(rerun.history) == len(result.history)
        for a, b in zip(rerun.history, result.history):
            assert a == b

    def test_checkpoint_roundtrip_identical_parameters(self, micro_run, tmp_path):
        cfg, _, out, result = micro_run
        first = load_checkpoint(out / "checkpoint.pt")
        net, cfg2 = restore_network(first)
        opt = torch.optim.SGD(net.parameters(), lr=0.01)
        save_checkpoint(tmp_path / "second.pt", net, opt, first["epoch"], cfg2,
                        np.random.default_rng(0))
        second = load_checkpoint(tmp_path / "second.pt")
        assert first["model"].keys() == second["model"].keys()
        for key in first["model"]:
            a, b = first["model"][key], second["model"][key]
            assert a.dtype == b.dtype
            assert torch.equal(a, b), key

    def test_checkpoint_reproduces_predictions(self, micro_run):
        from partseg.inference import predict

        cfg, scenes, out, result = micro_run
        net, cfg2 = restore_network(load_checkpoint(out / "checkpoint.pt"))
        a = predict(result.network, scenes[0].image, cfg)
        b = predict(net, scenes[0].image, cfg2)
        assert len(a.instances) == len(b.instances)
        np.testing.assert_array_equal(a.global_parsing, b.global_parsing)
        for x, y in zip(a.instances, b.instances):
            assert x.fused_score == y.fused_score


def test_divergence_aborts_with_checkpoint(tmp_path):
    cfg = PipelineConfig(channels=16, head_convs=2, image_size=64, epochs=2,
                         batch_size=2, n_instances_max=2, max_train_rois=4,
                         divergence_limit=1e-6)  # everything diverges instantly
    scenes = generate_dataset(cfg, 2, 3)
    with pytest.raises(TrainingDiverged) as err:
        train(cfg, scenes, tmp_path)
    assert err.value.checkpoint_path is not None
    assert err.value.checkpoint_path.exists()
    ckpt = load_checkpoint(err.value.checkpoint_path)
    assert ckpt["epoch"] == 0  # the pre-training snapshot survived


def test_train_requires_scenes(tmp_path):
    with pytest.raises(ValueError):
        train(PipelineConfig(), [], tmp_path)

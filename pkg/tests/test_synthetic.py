import numpy as np
import pytest

from partseg.config import PipelineConfig
from partseg.data.synthetic import generate_scene


def scenes_equal(a, b) -> bool:
    if not np.array_equal(a.image, b.image):
        return False
    if not np.array_equal(a.global_parsing, b.global_parsing):
        return False
    if a.seed != b.seed or len(a.instances) != len(b.instances):
        return False
    for ia, ib in zip(a.instances, b.instances):
        if ia.box != ib.box or ia.part_ids != ib.part_ids:
            return False
        if not np.array_equal(ia.parsing, ib.parsing):
            return False
    return True


def test_same_seed_is_bit_identical(default_cfg):
    assert scenes_equal(generate_scene(123, default_cfg), generate_scene(123, default_cfg))


def test_different_seeds_differ(default_cfg):
    assert not scenes_equal(generate_scene(0, default_cfg), generate_scene(1, default_cfg))


def test_single_instance_range():
    cfg = PipelineConfig(n_instances_min=1, n_instances_max=1)
    for seed in range(5):
        assert len(generate_scene(seed, cfg).instances) == 1


def test_rejects_bad_config():
    with pytest.raises(ValueError):
        PipelineConfig(k_parts=1)
    with pytest.raises(ValueError):
        PipelineConfig(image_size=16)


def test_image_in_unit_range(default_cfg):
    scene = generate_scene(5, default_cfg)
    assert scene.image.dtype == np.float32
    assert scene.image.min() >= 0.0
    assert scene.image.max() <= 1.0


def test_boxes_tightly_bound_instances(default_cfg):
    for seed in range(10):
        scene = generate_scene(seed, default_cfg)
        for inst in scene.instances:
            rows, cols = np.nonzero(inst.parsing)
            assert inst.box.x0 == cols.min()
            assert inst.box.y0 == rows.min()
            assert inst.box.x1 == cols.max() + 1
            assert inst.box.y1 == rows.max() + 1


def test_instances_partition_global_support(default_cfg):
    for seed in range(10):
        scene = generate_scene(seed, default_cfg)
        union = np.zeros_like(scene.global_parsing, dtype=np.int32)
        for inst in scene.instances:
            support = inst.parsing > 0
            union[support] += 1
            # instance raster agrees with the global one on its support
            np.testing.assert_array_equal(inst.parsing[support], scene.global_parsing[support])
        np.testing.assert_array_equal(union > 0, scene.global_parsing > 0)
        assert union.max() <= 1  # no pixel belongs to two instances


def test_part_ids_match_raster(default_cfg):
    scene = generate_scene(3, default_cfg)
    for inst in scene.instances:
        assert inst.part_ids == frozenset(int(v) for v in np.unique(inst.parsing) if v)


def test_part_coverage_over_corpus(default_cfg):
    """Every part id appears in at least 1% of instances over 1000 scenes."""
    counts = {p: 0 for p in range(1, default_cfg.k_parts)}
    total = 0
    for seed in range(1000):
        scene = generate_scene(seed, default_cfg)
        for inst in scene.instances:
            total += 1
            for p in inst.part_ids:
                counts[p] += 1
    assert total > 0
    for p, c in counts.items():
        assert c / total >= 0.01, f"part {p} appears in only {c}/{total} instances"

import numpy as np
import torch

from oracles import assignment_oracle
from partseg.config import FPN_LEVELS, PipelineConfig
from partseg.geometry import Box
from partseg.models.detection import assign_targets, level_locations, level_offset_ranges


def grid_locations(cfg):
    """Locations of every level for a cfg.image_size square image."""
    locs = {}
    for lvl in FPN_LEVELS:
        stride = 2 ** lvl
        n = cfg.image_size // stride
        locs[lvl] = level_locations(lvl, n, n)
    return locs


def test_no_boxes_all_background(default_cfg):
    locs = grid_locations(default_cfg)
    targets = assign_targets(locs, [[]], default_cfg)
    for lvl in FPN_LEVELS:
        assert targets.labels[lvl].sum() == 0
        assert (targets.matched_box[lvl] == -1).all()


def test_small_box_hits_only_p3(default_cfg):
    """A 48x48 box keeps max offsets <= 48 <= 64, so only P3 is positive."""
    locs = grid_locations(default_cfg)
    box = Box(40, 40, 88, 88)
    targets = assign_targets(locs, [[box]], default_cfg)
    assert targets.labels[3].sum() > 0
    for lvl in (4, 5, 6, 7):
        assert targets.labels[lvl].sum() == 0, f"P{lvl} should be empty"


def test_nested_boxes_take_min_area(default_cfg):
    locs = grid_locations(default_cfg)
    big = Box(10, 10, 74, 74)       # max offset <= 64 on inner locations
    small = Box(30, 30, 60, 60)
    targets = assign_targets(locs, [[big, small]], default_cfg)
    lvl = 3
    xy = locs[lvl]
    inside_small = ((xy[:, 0] >= 30) & (xy[:, 0] <= 60) &
                    (xy[:, 1] >= 30) & (xy[:, 1] <= 60))
    matched = targets.matched_box[lvl][0]
    # inside both and both eligible -> matched to the smaller box (index 1)
    for i in torch.nonzero(inside_small).flatten().tolist():
        off = torch.tensor([xy[i, 0] - 10, xy[i, 1] - 10, 74 - xy[i, 0], 74 - xy[i, 1]])
        if off.max() <= 64:
            assert matched[i] == 1


def test_positive_offsets_and_centerness_match_oracle(default_cfg):
    rng = np.random.default_rng(0)
    locs = grid_locations(default_cfg)
    ranges = level_offset_ranges(default_cfg)
    for _ in range(20):
        n_boxes = int(rng.integers(0, 6))
        boxes = []
        for _ in range(n_boxes):
            x0 = rng.uniform(0, 100)
            y0 = rng.uniform(0, 100)
            boxes.append(Box(x0, y0, x0 + rng.uniform(4, 120), y0 + rng.uniform(4, 120)))
        targets = assign_targets(locs, [boxes], default_cfg)
        for lvl in FPN_LEVELS:
            lo, hi = ranges[lvl]
            expected = assignment_oracle(
                [(float(x), float(y)) for x, y in locs[lvl]],
                [b.as_tuple() for b in boxes], lo, hi)
            for i, (label, idx, off, ctr) in enumerate(expected):
                assert int(targets.labels[lvl][0, i]) == label
                assert int(targets.matched_box[lvl][0, i]) == idx
                if label:
                    got = targets.offsets[lvl][0, i].tolist()
                    assert np.allclose(got, off, atol=1e-5)
                    assert abs(float(targets.centerness[lvl][0, i]) - ctr) < 1e-6

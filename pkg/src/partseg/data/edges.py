"""Boundary labels derived from a parsing raster.

A pixel is an edge pixel iff any of its 8 in-bounds neighbours carries a
different label, so both sides of every part/part and part/background
boundary are marked. Image-border pixels compare only against in-bounds
neighbours.
"""
from __future__ import annotations

import numpy as np

_SHIFTS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def extract_edge_labels(parsing: np.ndarray) -> np.ndarray:
    """Binary edge raster of ``parsing`` (uint8, 1 = edge pixel)."""
    if parsing.ndim != 2:
        raise ValueError(f"parsing raster must be 2-D, got shape {parsing.shape}")
    h, w = parsing.shape
    edge = np.zeros((h, w), dtype=bool)
    for dy, dx in _SHIFTS:
        ys = slice(max(-dy, 0), h - max(dy, 0))
        xs = slice(max(-dx, 0), w - max(dx, 0))
        ys_n = slice(max(dy, 0), h - max(-dy, 0))
        xs_n = slice(max(dx, 0), w - max(-dx, 0))
        edge[ys, xs] |= parsing[ys, xs] != parsing[ys_n, xs_n]
    return edge.astype(np.uint8)

"""Sub-pixel RoI pooling by bilinear sampling, without coordinate rounding.

Conventions, shared with the detector's location grid: feature cell (i, j)
holds the value at feature-plane point (j + 0.5, i + 0.5), i.e. image point
(stride * (j + 0.5), stride * (i + 0.5)). Each output cell averages a 2x2
grid of bilinear samples; samples outside the feature map read zero.
"""
from __future__ import annotations

import torch

SAMPLES_PER_CELL = 2  # per axis


def _bilinear(feature: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample (C, H, W) ``feature`` at continuous feature coords (u, v).

    u is the x-like coordinate (columns), v the y-like one (rows); values
    outside the map contribute zero.
    """
    c, h, w = feature.shape
    uf = u - 0.5
    vf = v - 0.5
    j0 = torch.floor(uf)
    i0 = torch.floor(vf)
    du = (uf - j0).to(feature.dtype)
    dv = (vf - i0).to(feature.dtype)
    out = torch.zeros((c,) + u.shape, dtype=feature.dtype, device=feature.device)
    for di, wv in ((0, 1 - dv), (1, dv)):
        for dj, wu in ((0, 1 - du), (1, du)):
            jj = (j0 + dj).long()
            ii = (i0 + di).long()
            valid = (jj >= 0) & (jj < w) & (ii >= 0) & (ii < h)
            jj_c = jj.clamp(0, w - 1)
            ii_c = ii.clamp(0, h - 1)
            vals = feature[:, ii_c, jj_c]
            weight = (wu * wv * valid.to(feature.dtype)).unsqueeze(0)
            out = out + vals * weight
    return out


def roi_align(feature: torch.Tensor, box, out_size: int, stride: int) -> torch.Tensor:
    """Pool one box of an image-plane region from a (C, H, W) feature map.

    ``box`` is (x0, y0, x1, y1) in image coordinates; the output is
    (C, out_size, out_size).
    """
    if feature.ndim != 3:
        raise ValueError(f"expected (C, H, W) feature, got {tuple(feature.shape)}")
    x0, y0, x1, y1 = (float(v) for v in (box.as_tuple() if hasattr(box, "as_tuple") else box))
    cell_w = (x1 - x0) / out_size
    cell_h = (y1 - y0) / out_size
    s = SAMPLES_PER_CELL
    device = feature.device
    dtype = feature.dtype
    # sample point grid: out_size cells x s sub-samples per axis
    base = (torch.arange(out_size, device=device, dtype=dtype) * cell_w).view(-1, 1)
    sub = ((torch.arange(s, device=device, dtype=dtype) + 0.5) / s * cell_w).view(1, -1)
    sample_x = (x0 + (base + sub)).reshape(-1)                     # (out_size * s,)
    base_y = (torch.arange(out_size, device=device, dtype=dtype) * cell_h).view(-1, 1)
    sub_y = ((torch.arange(s, device=device, dtype=dtype) + 0.5) / s * cell_h).view(1, -1)
    sample_y = (y0 + (base_y + sub_y)).reshape(-1)
    u = (sample_x / stride).view(1, -1).expand(out_size * s, -1)
    v = (sample_y / stride).view(-1, 1).expand(-1, out_size * s)
    sampled = _bilinear(feature, u, v)                             # (C, os*s, os*s)
    c = feature.shape[0]
    pooled = sampled.view(c, out_size, s, out_size, s).mean(dim=(2, 4))
    return pooled


def roi_align_batch(feature: torch.Tensor, boxes: torch.Tensor,
                    out_size: int, stride: int) -> torch.Tensor:
    """Pool many boxes (N, 4) from one (C, H, W) feature map -> (N, C, o, o)."""
    if boxes.numel() == 0:
        return feature.new_zeros((0, feature.shape[0], out_size, out_size))
    return torch.stack([roi_align(feature, boxes[i], out_size, stride)
                        for i in range(boxes.shape[0])])

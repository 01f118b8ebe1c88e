"""Rasterize element boxes onto the feature grid and project embeddings.

A cell belongs to a box when its center lies inside the half-open interval
[x0, x1) x [y0, y1); a box that captures no center gets the single cell
containing its own center, so tiny targets survive coarse strides.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Graph, Tensor

BBox = tuple[float, float, float, float]


def calc_overlay(bbox: BBox, h_f: int, w_f: int) -> np.ndarray:
    """Binary h_f x w_f x 1 mask of the feature cells covered by a bbox."""
    x0, y0, x1, y1 = bbox
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise ValueError(f"invalid normalized bbox {bbox}")
    if h_f < 1 or w_f < 1:
        raise ValueError(f"grid extents must be >= 1, got {h_f}x{w_f}")
    cx = (np.arange(w_f) + 0.5) / w_f
    cy = (np.arange(h_f) + 0.5) / h_f
    mask = ((cy >= y0) & (cy < y1))[:, None] & ((cx >= x0) & (cx < x1))[None, :]
    if not mask.any():
        r = min(int((y0 + y1) / 2 * h_f), h_f - 1)
        c = min(int((x0 + x1) / 2 * w_f), w_f - 1)
        mask[r, c] = True
    return mask.astype(np.float32)[..., None]


def project_elements(g: Graph, attended: Sequence[Tensor], bboxes: Sequence[BBox],
                     h_f: int, w_f: int, depth: int) -> Tensor:
    """Sum each attended embedding into the cells its box overlays.

    Overlapping boxes add their embeddings; cells outside every box stay
    exactly zero. Differentiable with respect to each attended embedding.
    """
    if len(attended) != len(bboxes):
        raise ValueError(f"got {len(attended)} embeddings for {len(bboxes)} boxes")
    field = np.zeros((h_f, w_f, depth), dtype=g.dtype)
    masks = [calc_overlay(b, h_f, w_f) for b in bboxes]
    for m, v in zip(masks, attended):
        field += m * v.data
    track = g.recording and any(v.needs_grad for v in attended)
    out = g.tensor(field, track)
    if track:
        for v in attended:
            if v.needs_grad:
                v.ensure_grad()

        def bwd():
            for m, v in zip(masks, attended):
                if v.needs_grad:
                    v.grad += (out.grad * m).sum(axis=(0, 1))

        g.record(bwd)
    return out


def tile_average_baseline(g: Graph, attended: Sequence[Tensor],
                          h_f: int, w_f: int, depth: int) -> Tensor:
    """Ablation path: tile the mean attended embedding over the whole grid."""
    if not attended:
        return g.tensor(np.zeros((h_f, w_f, depth), dtype=g.dtype))
    acc = attended[0]
    for v in attended[1:]:
        acc = g.add(acc, v)
    return g.tile_spatial(g.scale(acc, 1.0 / len(attended)), h_f, w_f)

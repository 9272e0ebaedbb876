"""Segment pooling of dense feature maps and the semantic/spatial fusion head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoders import SEMANTIC_DIM, SPATIAL_DIM, bilinear_matrix, resize_feature_map

POOLING_NORMALIZATIONS = ("mask", "image")


class DegenerateSegment(ValueError):
    def __init__(self, ids):
        ids = list(ids)
        super().__init__(f"degenerate segment: ids {ids[:10]} have no pixels")
        self.ids = ids


def _as_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.from_numpy(np.ascontiguousarray(x)), True


def _labels_tensor(labels) -> torch.Tensor:
    return torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels).long()


def segment_pool(fmap, labels, segment_count: int, normalize: str = "mask"):
    """Mean of ``fmap`` (H x W x C) over each segment -> (M x C).

    ``normalize="mask"`` divides by the segment's pixel count; ``"image"``
    divides by H*W, i.e. the average of the masked map over all positions.
    """
    if normalize not in POOLING_NORMALIZATIONS:
        raise ValueError(f"normalize must be one of {POOLING_NORMALIZATIONS}")
    t, was_np = _as_tensor(fmap)
    lab = _labels_tensor(labels)
    h, w, c = t.shape
    if tuple(lab.shape) != (h, w):
        raise ValueError(f"feature map {h}x{w} does not match labels {tuple(lab.shape)}")
    flat = lab.reshape(-1)
    sums = torch.zeros(segment_count + 1, c, dtype=t.dtype).index_add_(0, flat, t.reshape(-1, c))[1:]
    counts = torch.bincount(flat, minlength=segment_count + 1)[1 : segment_count + 1]
    if (counts == 0).any():
        raise DegenerateSegment((torch.nonzero(counts == 0).flatten() + 1).tolist())
    denom = counts.to(t.dtype).unsqueeze(1) if normalize == "mask" else float(h * w)
    out = sums / denom
    return out.numpy() if was_np else out


def _separable_sums(t_low: torch.Tensor, seg_ids: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                    out_hw: tuple[int, int], segment_count: int) -> torch.Tensor:
    """Per-segment sums of the bilinearly upsampled map over the points (ys, xs).

    Bilinear resizing is linear and separable, so each sum is a fixed weighting
    of the low-resolution cells; the full-resolution map is never built.
    """
    out_h, out_w = out_hw
    gh, gw, c = t_low.shape
    wy = bilinear_matrix(gh, out_h)
    wx = bilinear_matrix(gw, out_w)
    m1 = segment_count + 1
    rows = seg_ids * out_h + ys
    z = np.empty((m1 * out_h, gw))
    for b in range(gw):
        z[:, b] = np.bincount(rows, weights=wx[xs, b], minlength=m1 * out_h)
    cell_w = np.einsum("ya,lyb->lab", wy, z.reshape(m1, out_h, gw))[1:]
    weights = torch.from_numpy(cell_w.reshape(segment_count, gh * gw)).to(t_low.dtype)
    return weights @ t_low.reshape(gh * gw, c)


def pool_upsampled(fmap_low, labels, segment_count: int, normalize: str = "mask"):
    """Same result as ``segment_pool(resize_feature_map(fmap_low, labels.shape), ...)``
    but memory-light for coarse maps such as the 37 x 37 semantic grid."""
    t, was_np = _as_tensor(fmap_low)
    lab = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels).astype(np.int64)
    h, w = lab.shape
    ys, xs = np.divmod(np.arange(h * w), w)
    counts = np.bincount(lab.ravel(), minlength=segment_count + 1)[1:]
    if (counts == 0).any():
        raise DegenerateSegment((np.flatnonzero(counts == 0) + 1).tolist())
    sums = _separable_sums(t, lab.ravel(), ys, xs, (h, w), segment_count)
    denom = torch.from_numpy(counts).to(t.dtype).unsqueeze(1) if normalize == "mask" else float(h * w)
    out = sums / denom
    return out.numpy() if was_np else out


def _adaptive_windows(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """(source index, cell index) pairs for adaptive pooling windows.

    Cell i covers [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)), so every
    source pixel falls in at least one window.
    """
    src, cell = [], []
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        src.append(np.arange(lo, hi))
        cell.append(np.full(hi - lo, i))
    return np.concatenate(src), np.concatenate(cell)


def downscale_mask_cells(labels, segment_count: int, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool every binary segment mask to ``side x side``.

    Returns parallel arrays (segment id, flat cell index) listing the cells
    where each downscaled mask is 1.
    """
    lab = np.asarray(labels).astype(np.int64)
    h, w = lab.shape
    ry, ci = _adaptive_windows(h, side)
    rx, cj = _adaptive_windows(w, side)
    sub = lab[np.ix_(ry, rx)]
    cells = ci[:, None] * side + cj[None, :]
    keys = np.unique(sub * (side * side) + cells)
    seg_ids = keys // (side * side)
    keep = seg_ids > 0
    return seg_ids[keep], (keys % (side * side))[keep]


def segment_pool_fixed(fmap, labels, segment_count: int, side: int = 512, normalize: str = "mask"):
    """Pool at a fixed ``side x side`` resolution.

    Masks are max-pool downscaled and the feature map is bilinearly resized to
    ``side x side`` before averaging. When the labels are already
    ``side x side`` this is exactly :func:`segment_pool`.
    """
    lab = np.asarray(labels.cpu() if isinstance(labels, torch.Tensor) else labels)
    t, was_np = _as_tensor(fmap)
    if lab.shape == (side, side):
        out = segment_pool(resize_feature_map(t, (side, side)), lab, segment_count, normalize)
        return out.numpy() if was_np else out
    seg_ids, cells = downscale_mask_cells(lab, segment_count, side)
    counts = np.bincount(seg_ids, minlength=segment_count + 1)[1:]
    if (counts == 0).any():
        raise DegenerateSegment((np.flatnonzero(counts == 0) + 1).tolist())
    gh, gw, c = t.shape
    if gh * gw < side * side:
        ys, xs = np.divmod(cells, side)
        sums = _separable_sums(t, seg_ids, ys, xs, (side, side), segment_count)
    else:
        small = resize_feature_map(t, (side, side)).reshape(side * side, c)
        gathered = small[torch.from_numpy(cells)]
        sums = torch.zeros(segment_count + 1, c, dtype=t.dtype).index_add_(0, torch.from_numpy(seg_ids), gathered)[1:]
    denom = torch.from_numpy(counts).to(t.dtype).unsqueeze(1) if normalize == "mask" else float(side * side)
    out = sums / denom
    return out.numpy() if was_np else out


# -- fusion -------------------------------------------------------------------


def _mlp(c_in: int, hidden: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(c_in, hidden), nn.ReLU(), nn.Linear(hidden, c_out))


class FusionHead(nn.Module):
    """reduce: C_d -> C_u on semantic vectors; merge: [reduced, spatial] -> C_u."""

    def __init__(self, semantic_dim: int = SEMANTIC_DIM, spatial_dim: int = SPATIAL_DIM,
                 reduce_hidden: int = 512, merge_hidden: int = 256):
        super().__init__()
        self.semantic_dim = semantic_dim
        self.spatial_dim = spatial_dim
        self.reduce = _mlp(semantic_dim, reduce_hidden, spatial_dim)
        self.merge = _mlp(2 * spatial_dim, merge_hidden, spatial_dim)

    def forward(self, d: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        if d.shape[0] != u.shape[0]:
            raise ValueError(f"row counts differ: {d.shape[0]} semantic vs {u.shape[0]} spatial")
        if d.shape[0] == 0:
            return u.new_zeros((0, self.spatial_dim))
        return self.merge(torch.cat([self.reduce(d), u], dim=1))


def fuse(d, u, params: FusionHead) -> torch.Tensor:
    dt = torch.as_tensor(d)
    ut = torch.as_tensor(u)
    dtype = next(params.parameters()).dtype
    return params(dt.to(dtype), ut.to(dtype))


@dataclass
class SegmentFeatureSet:
    semantic: torch.Tensor  # M x C_d
    spatial: torch.Tensor | None  # M x C_u, None in zero-shot mode
    fused: torch.Tensor  # M x C_u (or the semantic rows in zero-shot mode)

    def __len__(self) -> int:
        return self.fused.shape[0]

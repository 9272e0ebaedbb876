"""Training objective: color-aggregated cross-entropy plus similarity consistency.

All functions operate on torch tensors and are differentiable with respect
to the similarity map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

ABSENT = -1
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    ce: float = 0.5
    dc: float = 0.2
    temperature: float = 0.1
    consistency_scale: float = 10.0

    def __post_init__(self):
        if self.ce < 0 or self.dc < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0 or self.consistency_scale <= 0:
            raise ValueError("temperature and consistency scale must be positive")


class ColorClassTable:
    """Exact-RGB color classes of a reference pool, in first-appearance order."""

    def __init__(self, pool_colors):
        colors = np.asarray(pool_colors, dtype=np.uint8).reshape(-1, 3)
        codes = _rgb_codes(colors)
        uniq, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        self.row_to_class = rank[inverse.ravel()].astype(np.int64)
        self.colors = colors[first[order]]
        self._lookup = {int(c): int(rank[i]) for i, c in enumerate(uniq)}

    def __len__(self) -> int:
        return len(self.colors)

    def class_of(self, colors) -> np.ndarray:
        """Class index per color, ``ABSENT`` where the color is not in the pool."""
        codes = _rgb_codes(np.asarray(colors, dtype=np.uint8).reshape(-1, 3))
        return np.array([self._lookup.get(int(c), ABSENT) for c in codes], dtype=np.int64)


def _rgb_codes(colors: np.ndarray) -> np.ndarray:
    c = colors.astype(np.int64)
    return (c[:, 0] << 16) | (c[:, 1] << 8) | c[:, 2]


def color_probabilities(S: torch.Tensor, row_to_class, num_classes: int, temperature: float = 0.1) -> torch.Tensor:
    """``N x C`` color distribution per target segment.

    Softmax over the pool rows of each column of ``S / T``; probabilities of
    rows sharing a color are summed.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    S = torch.as_tensor(S)
    probs = torch.softmax(S / temperature, dim=0)  # M x N
    idx = torch.as_tensor(row_to_class, dtype=torch.long)
    out = torch.zeros(num_classes, S.shape[1], dtype=S.dtype).index_add_(0, idx, probs)
    return out.T


class CrossEntropy(NamedTuple):
    loss: torch.Tensor
    all_excluded: bool
    clamped: bool


def cross_entropy_loss(p_hat: torch.Tensor, gt_classes) -> CrossEntropy:
    """Mean of ``-log p_hat[n, gt[n]]`` over segments whose class is not ``ABSENT``."""
    p_hat = torch.as_tensor(p_hat)
    gt = torch.as_tensor(np.asarray(gt_classes), dtype=torch.long)
    keep = gt != ABSENT
    if not bool(keep.any()):
        return CrossEntropy(p_hat.sum() * 0.0, True, False)
    rows = torch.nonzero(keep).flatten()
    picked = p_hat[rows, gt[rows]]
    clamped = bool((picked < LOG_CLAMP).any())
    loss = -torch.log(picked.clamp_min(LOG_CLAMP)).mean()
    return CrossEntropy(loss, False, clamped)


def consistency_loss(S: torch.Tensor, S_semantic: torch.Tensor, scale: float = 10.0) -> torch.Tensor:
    S, S_semantic = torch.as_tensor(S), torch.as_tensor(S_semantic)
    if S.shape != S_semantic.shape:
        raise ValueError(f"similarity maps differ in shape: {tuple(S.shape)} vs {tuple(S_semantic.shape)}")
    return (scale * S - scale * S_semantic.to(S.dtype)).abs().mean()


def total_loss(l_ce, l_dc, weights: LossWeights):
    return weights.ce * l_ce + weights.dc * l_dc


def step_loss(S: torch.Tensor, S_semantic: torch.Tensor, pool_colors, target_colors,
              weights: LossWeights = LossWeights()) -> dict:
    """Full objective for one (pool, target) pair."""
    table = ColorClassTable(pool_colors)
    gt = table.class_of(target_colors)
    p_hat = color_probabilities(S, table.row_to_class, len(table), weights.temperature)
    ce = cross_entropy_loss(p_hat, gt)
    dc = consistency_loss(S, S_semantic, weights.consistency_scale)
    return {
        "total": total_loss(ce.loss, dc, weights),
        "ce": ce.loss,
        "dc": dc,
        "all_excluded": ce.all_excluded,
        "clamped": ce.clamped,
        "included": int((gt != ABSENT).sum()),
    }

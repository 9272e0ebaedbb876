"""Reference pool construction, cosine similarity and argmax color propagation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .segmentation import SegmentMap, SegmentPalette

COSINE_EPS = 1e-8


class NoReferences(ValueError):
    def __init__(self):
        super().__init__("no references")


@dataclass
class ReferencePool:
    features: torch.Tensor  # M x C
    palette: np.ndarray  # M x 3 uint8
    provenance: list[tuple[int, int]]  # (reference index k, local segment id), both 1-based

    def __len__(self) -> int:
        return len(self.provenance)


@dataclass
class ColorAssignment:
    colors: np.ndarray  # N x 3 uint8
    matched_row: np.ndarray  # N int, index into the pool
    confidence: np.ndarray  # N float, winning similarity

    def __len__(self) -> int:
        return len(self.colors)

    def to_records(self, pool: ReferencePool | None = None) -> list[dict]:
        records = []
        for j in range(len(self)):
            row = int(self.matched_row[j])
            ref_k, ref_seg = pool.provenance[row] if pool is not None else (None, None)
            records.append({
                "segment_id": j + 1,
                "rgb": [int(v) for v in self.colors[j]],
                "matched_reference": ref_k,
                "matched_segment": ref_seg,
                "confidence": float(self.confidence[j]),
            })
        return records

    def save_json(self, path: str | Path, pool: ReferencePool | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_records(pool), indent=1))

    def render(self, seg: SegmentMap, line_image: np.ndarray | None = None) -> np.ndarray:
        """Flat-color rendering; line pixels copy ``line_image`` (white when absent)."""
        if len(self) != seg.segment_count:
            raise ValueError(f"{len(self)} colors for {seg.segment_count} segments")
        lut = np.concatenate([np.full((1, 3), 255, np.uint8), self.colors.astype(np.uint8)])
        out = lut[seg.labels]
        if line_image is not None:
            lines = seg.labels == 0
            out[lines] = np.asarray(line_image)[..., :3][lines]
        return out

    def save_png(self, path: str | Path, seg: SegmentMap, line_image: np.ndarray | None = None) -> None:
        Image.fromarray(self.render(seg, line_image)).save(path)


def build_reference_pool(refs) -> ReferencePool:
    """Concatenate ``(features M_k x C, palette)`` pairs in the order given.

    ``features`` may be a tensor, an array or a :class:`SegmentFeatureSet`
    (its fused rows are used).
    """
    refs = list(refs)
    if not refs:
        raise NoReferences()
    feats, colors, prov = [], [], []
    for k, (f, pal) in enumerate(refs, start=1):
        f = getattr(f, "fused", f)
        f = torch.as_tensor(f)
        pal_colors = pal.colors if isinstance(pal, SegmentPalette) else np.asarray(pal, dtype=np.uint8)
        if f.shape[0] != len(pal_colors):
            raise ValueError(f"reference {k}: {f.shape[0]} feature rows vs {len(pal_colors)} colors")
        if len(pal_colors) == 0:
            raise ValueError(f"reference {k}: empty palette")
        feats.append(f)
        colors.append(np.asarray(pal_colors, dtype=np.uint8).reshape(-1, 3))
        prov.extend((k, i) for i in range(1, f.shape[0] + 1))
    dtype = feats[0].dtype
    return ReferencePool(
        features=torch.cat([f.to(dtype) for f in feats], dim=0),
        palette=np.concatenate(colors, axis=0),
        provenance=prov,
    )


def similarity_map(f_r, f_t, eps: float = COSINE_EPS):
    """Cosine similarity ``M x N`` between pool rows and target rows."""
    was_np = isinstance(f_r, np.ndarray)
    a, b = torch.as_tensor(f_r), torch.as_tensor(f_t)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    b = b.to(a.dtype)
    num = a @ b.T
    den = a.norm(dim=1, keepdim=True) * b.norm(dim=1, keepdim=True).T + eps
    s = num / den
    return s.numpy() if was_np else s


def propagate_colors(S, pool: ReferencePool) -> ColorAssignment:
    """Per target column, copy the color of the most similar pool row (ties -> smallest row)."""
    s = S.detach().cpu().numpy() if isinstance(S, torch.Tensor) else np.asarray(S)
    if s.shape[0] != len(pool):
        raise ValueError(f"similarity map has {s.shape[0]} rows, pool has {len(pool)}")
    if s.shape[1] == 0:
        return ColorAssignment(np.zeros((0, 3), np.uint8), np.zeros(0, np.int64), np.zeros(0))
    rows = np.argmax(s, axis=0)  # first maximal index
    return ColorAssignment(
        colors=pool.palette[rows].copy(),
        matched_row=rows.astype(np.int64),
        confidence=s[rows, np.arange(s.shape[1])].astype(np.float64),
    )


def match(refs, target_features) -> tuple[ColorAssignment, ReferencePool, torch.Tensor]:
    pool = build_reference_pool(refs)
    f_t = getattr(target_features, "fused", target_features)
    S = similarity_map(pool.features.double(), torch.as_tensor(f_t).double())
    return propagate_colors(S, pool), pool, S


def colorize_zero_shot(refs, target_semantic) -> ColorAssignment:
    """Backbone-only matching: pooled semantic vectors stand in for fused features.

    ``refs`` is a sequence of ``(semantic M_k x C_d, palette)`` pairs.
    """
    assignment, _, _ = match([(getattr(d, "semantic", d), p) for d, p in refs],
                             getattr(target_semantic, "semantic", target_semantic))
    return assignment

"""Line-enclosed segment extraction and per-segment ground-truth colors.

A line drawing is an RGB image with colored lines on a near-white canvas.
Segments are the 4-connected components of canvas pixels; line pixels get
label 0 and segments are numbered 1..M in raster order of their first pixel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

DEFAULT_LINE_THRESHOLD = 10
WHITE = (255, 255, 255)

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class SegmentationError(ValueError):
    pass


@dataclass
class SegmentMap:
    labels: np.ndarray  # (H, W) int32, 0 = line
    segment_count: int
    areas: np.ndarray  # (M,) pixel counts, index i -> segment id i + 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def mask(self, segment_id: int) -> np.ndarray:
        return self.labels == segment_id

    def touches_border(self) -> np.ndarray:
        """Boolean (M,) flag: segment has at least one pixel on the image border."""
        lab = self.labels
        edge = np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]])
        flags = np.zeros(self.segment_count + 1, dtype=bool)
        flags[edge] = True
        return flags[1:]

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SegmentMap":
        labels = np.asarray(labels).astype(np.int32)
        m = int(labels.max(initial=0))
        areas = np.bincount(labels.ravel(), minlength=m + 1)[1:]
        if m and (areas == 0).any():
            missing = (np.flatnonzero(areas == 0) + 1).tolist()
            raise SegmentationError(f"segment ids without pixels: {missing[:10]}")
        return cls(labels=labels, segment_count=m, areas=areas.astype(np.int64))


@dataclass
class SegmentPalette:
    colors: np.ndarray  # (M, 3) uint8
    background_flags: np.ndarray = field(default=None)  # (M,) bool

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if self.background_flags is None:
            self.background_flags = np.zeros(len(self.colors), dtype=bool)
        self.background_flags = np.asarray(self.background_flags, dtype=bool)
        if len(self.background_flags) != len(self.colors):
            raise ValueError("background_flags length differs from colors")

    def __len__(self) -> int:
        return len(self.colors)


def canvas_mask(image: np.ndarray, line_threshold: int = DEFAULT_LINE_THRESHOLD) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] < 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    if not 0 <= line_threshold < 255:
        raise ValueError("line_threshold must lie in [0, 255)")
    return image[..., :3].min(axis=2) >= 255 - line_threshold


def extract_segments(image: np.ndarray, line_threshold: int = DEFAULT_LINE_THRESHOLD) -> SegmentMap:
    canvas = canvas_mask(image, line_threshold)
    if not canvas.any():
        raise SegmentationError("no segments")
    raw, count = ndimage.label(canvas, structure=_FOUR_CONNECTED)
    # renumber so ids follow raster order of each component's first pixel
    flat = raw.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return SegmentMap.from_labels(remap[raw])


def read_segment_colors(gt_image: np.ndarray, seg: SegmentMap) -> SegmentPalette:
    """Modal RGB per segment; ties go to the lexicographically smallest color."""
    gt = np.asarray(gt_image)[..., :3]
    if gt.shape[:2] != seg.shape:
        raise ValueError(f"gt image {gt.shape[:2]} does not match segment map {seg.shape}")
    labels = seg.labels.ravel()
    inside = labels > 0
    seg_ids = labels[inside].astype(np.int64)
    rgb = gt.reshape(-1, 3)[inside].astype(np.int64)
    code = (rgb[:, 0] << 16) | (rgb[:, 1] << 8) | rgb[:, 2]
    # sort by (segment, -count, code) after counting unique (segment, code) pairs
    key = seg_ids << 24 | code
    uniq, counts = np.unique(key, return_counts=True)
    useg = uniq >> 24
    ucode = uniq & 0xFFFFFF
    order = np.lexsort((ucode, -counts, useg))
    useg_sorted = useg[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = useg_sorted[1:] != useg_sorted[:-1]
    best = ucode[order][first]
    colors = np.zeros((seg.segment_count, 3), dtype=np.uint8)
    idx = useg_sorted[first] - 1
    colors[idx, 0] = (best >> 16) & 255
    colors[idx, 1] = (best >> 8) & 255
    colors[idx, 2] = best & 255
    return SegmentPalette(colors=colors)


def unify_line_colors(image: np.ndarray, line_threshold: int = DEFAULT_LINE_THRESHOLD) -> np.ndarray:
    """Mono transform: every line pixel becomes black, canvas pixels are left alone."""
    out = np.array(image, dtype=np.uint8, copy=True)
    lines = ~canvas_mask(out, line_threshold)
    out[lines, :3] = 0
    return out


def identify_background(
    seg: SegmentMap,
    palette: SegmentPalette | None = None,
    background_color: tuple[int, int, int] = WHITE,
    min_area_fraction: float = 0.05,
) -> set[int]:
    """Background segment ids.

    With a palette: border-touching segments whose GT color is the background
    color. Without one: border-touching segments larger than
    ``min_area_fraction`` of the image.
    """
    border = seg.touches_border()
    if palette is not None:
        is_bg = np.all(palette.colors == np.asarray(background_color, dtype=np.uint8), axis=1)
        hits = border & is_bg
    else:
        total = seg.labels.size
        hits = border & (seg.areas > min_area_fraction * total)
    return {int(i) + 1 for i in np.flatnonzero(hits)}


def palette_with_background(
    gt_image: np.ndarray, seg: SegmentMap, background_color: tuple[int, int, int] = WHITE
) -> SegmentPalette:
    palette = read_segment_colors(gt_image, seg)
    bg = identify_background(seg, palette, background_color)
    flags = np.zeros(seg.segment_count, dtype=bool)
    flags[[i - 1 for i in bg]] = True
    palette.background_flags = flags
    return palette


# -- file format: 16-bit label PNG plus JSON sidecar ------------------------


def save_segment_map(
    path: str | Path, seg: SegmentMap, palette: SegmentPalette | None = None
) -> tuple[Path, Path]:
    path = Path(path)
    if seg.segment_count > 65535:
        raise SegmentationError("too many segments for a 16-bit label map")
    Image.fromarray(seg.labels.astype(np.uint16)).save(path)
    meta = {
        "segment_count": int(seg.segment_count),
        "areas": [int(a) for a in seg.areas],
        "colors": [] if palette is None else palette.colors.astype(int).tolist(),
        "background_ids": []
        if palette is None
        else [int(i) + 1 for i in np.flatnonzero(palette.background_flags)],
    }
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(meta))
    return path, sidecar


def load_segment_map(path: str | Path) -> tuple[SegmentMap, SegmentPalette | None]:
    path = Path(path)
    with Image.open(path) as im:
        labels = np.array(im).astype(np.int32)
    seg = SegmentMap.from_labels(labels)
    palette = None
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("segment_count", seg.segment_count) != seg.segment_count:
            raise SegmentationError(f"{sidecar}: segment_count disagrees with {path.name}")
        if meta.get("colors"):
            flags = np.zeros(seg.segment_count, dtype=bool)
            for i in meta.get("background_ids", []):
                flags[i - 1] = True
            palette = SegmentPalette(colors=np.asarray(meta["colors"]), background_flags=flags)
    return seg, palette

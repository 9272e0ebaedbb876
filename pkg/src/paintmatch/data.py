"""Dataset index for the ``<split>/<character>/<clip>/{line,gt,seg}`` layout.

Design sheets live next to the clips under ``<split>/<character>/sheet/`` with
the same ``line``/``gt``/``seg`` triplet. Frames are ordered by filename.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .segmentation import (
    DEFAULT_LINE_THRESHOLD,
    WHITE,
    SegmentMap,
    SegmentPalette,
    extract_segments,
    identify_background,
    load_segment_map,
    palette_with_background,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
SHEET_DIR = "sheet"


class DatasetError(ValueError):
    pass


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


@dataclass
class FrameRecord:
    stem: str
    line_path: Path
    gt_path: Path | None = None
    seg_path: Path | None = None

    @property
    def has_gt(self) -> bool:
        return self.gt_path is not None


@dataclass
class ClipRecord:
    clip_id: str
    character: str
    split: str
    frames: list[FrameRecord]
    sheets: list[FrameRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def supervised(self) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.has_gt]


@dataclass
class DatasetIndex:
    root: Path
    clips: list[ClipRecord]
    report: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def images(self, split: str | None = None) -> list[FrameRecord]:
        """Every distinct line-art image (clip frames and sheets), in index order."""
        seen, out = set(), []
        for clip in self.clips:
            if split is not None and clip.split != split:
                continue
            for rec in clip.frames + clip.sheets:
                if rec.line_path not in seen:
                    seen.add(rec.line_path)
                    out.append(rec)
        return out

    def frame_count(self, split: str | None = None) -> int:
        return sum(len(c) for c in self.clips if split is None or c.split == split)


def _images_in(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _read_triplets(folder: Path, report: list[str]) -> list[FrameRecord]:
    lines = _images_in(folder / "line")
    gts = _images_in(folder / "gt")
    segs = {s: p for s, p in _images_in(folder / "seg").items() if p.suffix.lower() == ".png"}
    records = []
    for stem in sorted(lines):
        gt = gts.get(stem)
        seg = segs.get(stem)
        if gt is None:
            report.append(f"missing gt: {folder / 'gt' / stem}.png (frame kept, unsupervised)")
        if seg is None:
            report.append(f"missing seg: {folder / 'seg' / stem}.png (segments extracted from line art)")
        elif not seg.with_suffix(".json").exists():
            report.append(f"missing seg sidecar: {seg.with_suffix('.json')}")
        records.append(FrameRecord(stem, lines[stem], gt, seg))
    for stem in sorted(set(gts) - set(lines)):
        report.append(f"gt without line art: {gts[stem]}")
    return records


def ingest_dataset(root: str | Path) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir() or not any(root.iterdir()):
        raise DatasetError(f"empty dataset root: {root}")
    report: list[str] = []
    clips = []
    for split_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for char_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            sheets = _read_triplets(char_dir / SHEET_DIR, report) if (char_dir / SHEET_DIR).is_dir() else []
            for sheet in sheets:
                if not sheet.has_gt:
                    report.append(f"design sheet without gt colors: {sheet.line_path}")
            for clip_dir in sorted(p for p in char_dir.iterdir() if p.is_dir() and p.name != SHEET_DIR):
                frames = _read_triplets(clip_dir, report)
                if not frames:
                    report.append(f"clip without line art: {clip_dir}")
                    continue
                clips.append(ClipRecord(
                    clip_id=f"{split_dir.name}/{char_dir.name}/{clip_dir.name}",
                    character=char_dir.name,
                    split=split_dir.name,
                    frames=frames,
                    sheets=[s for s in sheets if s.has_gt],
                ))
    if not clips:
        raise DatasetError(f"no clips found under {root}")
    for line in report:
        log.warning(line)
    return DatasetIndex(root=root, clips=clips, report=report)


def sample_references(clip: ClipRecord | int, target: int, count: int, rng: np.random.Generator,
                      max_offset: int = 2, allow_zero: bool = True, valid=None) -> list[int]:
    """Draw up to ``count`` distinct frame indices within ``max_offset`` of ``target``.

    ``valid`` restricts candidates (by default: frames with ground truth).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n = clip if isinstance(clip, int) else len(clip)
    if valid is None:
        valid = range(n) if isinstance(clip, int) else clip.supervised()
    valid = set(valid)
    cands = [i for i in range(target - max_offset, target + max_offset + 1)
             if 0 <= i < n and i in valid and (allow_zero or i != target)]
    if not cands:
        raise DatasetError(f"no reference candidates for frame {target}")
    k = min(count, len(cands))
    picks = rng.choice(len(cands), size=k, replace=False)
    return sorted(cands[i] for i in picks)


@dataclass
class LoadedFrame:
    key: str
    line: np.ndarray
    seg: SegmentMap
    gt: np.ndarray | None
    palette: SegmentPalette | None
    line_path: Path | None = None

    @property
    def background_ids(self) -> set[int]:
        if self.palette is not None:
            return {int(i) + 1 for i in np.flatnonzero(self.palette.background_flags)}
        return identify_background(self.seg)


def load_frame(rec: FrameRecord, line_threshold: int = DEFAULT_LINE_THRESHOLD,
               background_color=WHITE) -> LoadedFrame:
    line = read_rgb(rec.line_path)
    palette = None
    if rec.seg_path is not None:
        seg, palette = load_segment_map(rec.seg_path)
    else:
        seg = extract_segments(line, line_threshold)
    if seg.shape != line.shape[:2]:
        raise DatasetError(f"{rec.seg_path}: segment map {seg.shape} vs line art {line.shape[:2]}")
    gt = None
    if rec.gt_path is not None:
        gt = read_rgb(rec.gt_path)
        palette = palette_with_background(gt, seg, background_color)
    return LoadedFrame(key=str(rec.line_path), line=line, seg=seg, gt=gt, palette=palette,
                       line_path=rec.line_path)

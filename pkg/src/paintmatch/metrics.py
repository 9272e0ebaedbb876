"""Segment- and pixel-level accuracy metrics and the evaluation protocols.

Metrics are percentages. Pixel metrics ignore line pixels (label 0).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .correspondence import ColorAssignment
from .data import DatasetIndex, FrameRecord, LoadedFrame, load_frame
from .model import ColorizeOptions, Colorizer, Drawing
from .segmentation import WHITE, SegmentMap, SegmentPalette

log = logging.getLogger(__name__)

METRIC_NAMES = ("Acc", "Acc-Thresh", "Pix-Acc", "Pix-F-Acc", "Pix-B-MIoU")
AREA_THRESHOLD = 10  # Acc-Thresh keeps segments with area strictly greater than this
CONSECUTIVE_REFS = ("-1", "pm1", "first")


class EvaluationError(ValueError):
    pass


def _colors_of(pred) -> np.ndarray:
    return np.asarray(pred.colors if hasattr(pred, "colors") else pred, dtype=np.uint8).reshape(-1, 3)


def _percent(count, total) -> float:
    # integer counts first, one division: results are bit-stable
    return 100.0 * int(count) / int(total)


def segment_metrics(pred, gt: SegmentPalette, seg: SegmentMap,
                    area_threshold: int = AREA_THRESHOLD) -> tuple[float, float | None]:
    """(Acc, Acc-Thresh); Acc-Thresh is None when no segment exceeds the threshold."""
    p, g = _colors_of(pred), _colors_of(gt)
    if seg.segment_count == 0:
        raise EvaluationError("no segments")
    if len(p) != seg.segment_count or len(g) != seg.segment_count:
        raise EvaluationError(f"{len(p)} predictions / {len(g)} gt colors for {seg.segment_count} segments")
    correct = np.all(p == g, axis=1)
    acc = _percent(correct.sum(), len(correct))
    big = seg.areas > area_threshold
    acc_thresh = _percent(correct[big].sum(), big.sum()) if big.any() else None
    return float(acc), None if acc_thresh is None else float(acc_thresh)


def pixel_metrics(pred_image: np.ndarray, gt_image: np.ndarray, seg: SegmentMap, background_ids,
                  background_color=WHITE) -> tuple[float, float | None, float]:
    """(Pix-Acc, Pix-F-Acc, Pix-B-MIoU) over non-line pixels.

    A pixel is predicted background iff its predicted color equals
    ``background_color``; ground-truth background is the union of
    ``background_ids`` segments. Pix-F-Acc is None with no foreground pixels;
    an empty background union counts as IoU 100.
    """
    pred = np.asarray(pred_image)[..., :3]
    gt = np.asarray(gt_image)[..., :3]
    if pred.shape != gt.shape or pred.shape[:2] != seg.shape:
        raise EvaluationError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, seg {seg.shape}")
    inside = seg.labels > 0
    if not inside.any():
        raise EvaluationError("no segment pixels")
    same = np.all(pred == gt, axis=2)
    bg_lut = np.zeros(seg.segment_count + 1, dtype=bool)
    bg_lut[list(background_ids)] = True
    gt_bg = bg_lut[seg.labels] & inside
    fg = inside & ~gt_bg
    pred_bg = np.all(pred == np.asarray(background_color, dtype=pred.dtype), axis=2) & inside
    pix_acc = _percent(same[inside].sum(), inside.sum())
    pix_f = _percent(same[fg].sum(), fg.sum()) if fg.any() else None
    union = (pred_bg | gt_bg).sum()
    miou = _percent((pred_bg & gt_bg).sum(), union) if union else 100.0
    return float(pix_acc), None if pix_f is None else float(pix_f), float(miou)


def score_frame(assignment, frame: LoadedFrame, background_color=WHITE) -> dict:
    if frame.gt is None or frame.palette is None:
        raise EvaluationError(f"{frame.key}: no ground truth")
    acc, acc_t = segment_metrics(assignment, frame.palette, frame.seg)
    colors = _colors_of(assignment)
    lut = np.concatenate([np.full((1, 3), 255, np.uint8), colors])
    rendering = lut[frame.seg.labels]
    pix, pix_f, miou = pixel_metrics(rendering, frame.gt, frame.seg, frame.background_ids, background_color)
    return dict(zip(METRIC_NAMES, (acc, acc_t, pix, pix_f, miou)))


def average_metrics(rows: list[dict]) -> dict:
    """Unweighted mean over frames; frames where a metric is undefined are skipped for it."""
    out = {}
    for name in METRIC_NAMES:
        vals = [r[name] for r in rows if r.get(name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return out


@dataclass
class EvalReport:
    protocol: dict
    frames: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def mean(self) -> dict:
        return average_metrics([f["metrics"] for f in self.frames])

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "mean": self.mean, "frame_count": len(self.frames),
                "frames": self.frames, "warnings": self.warnings}

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        head = " | ".join(f"{n:>10}" for n in METRIC_NAMES)
        m = self.mean
        vals = " | ".join(f"{m[n]:>10.2f}" if m[n] is not None else f"{'-':>10}" for n in METRIC_NAMES)
        desc = ", ".join(f"{k}={v}" for k, v in self.protocol.items())
        return f"{desc}\n{head}\n{vals}\n({len(self.frames)} frames)"


# -- post-processing of pixel-level outputs ----------------------------------


def postprocess_generated(image: np.ndarray, seg: SegmentMap, palette) -> ColorAssignment:
    """Snap a generated RGB image to segment colors.

    Resize to the segment map, replace every pixel by its nearest palette color
    (ties to the lexicographically smallest), then give each segment its most
    frequent snapped color (ties to the smallest palette color).
    """
    pal = np.asarray(_colors_of(palette))
    if len(pal) == 0:
        raise EvaluationError("empty palette")
    img = np.asarray(image)[..., :3]
    if img.shape[:2] != seg.shape:
        h, w = seg.shape
        img = np.asarray(Image.fromarray(img.astype(np.uint8)).resize((w, h), Image.BILINEAR))
    # lexicographic order makes argmin's first-hit rule the tie-break
    codes = (pal[:, 0].astype(np.int64) << 16) | (pal[:, 1].astype(np.int64) << 8) | pal[:, 2]
    _, first = np.unique(codes, return_index=True)
    pal_sorted = pal[first].astype(np.int64)
    px = img.reshape(-1, 3).astype(np.int64)
    nearest = np.empty(len(px), dtype=np.int64)
    for start in range(0, len(px), 1 << 16):
        chunk = px[start : start + (1 << 16)]
        d = ((chunk[:, None, :] - pal_sorted[None, :, :]) ** 2).sum(axis=2)
        nearest[start : start + len(chunk)] = d.argmin(axis=1)
    labels = seg.labels.ravel()
    inside = labels > 0
    n_pal = len(pal_sorted)
    counts = np.bincount(labels[inside] * n_pal + nearest[inside],
                         minlength=(seg.segment_count + 1) * n_pal).reshape(-1, n_pal)[1:]
    winner = counts.argmax(axis=1)  # first max -> smallest color
    conf = counts[np.arange(len(winner)), winner] / np.maximum(counts.sum(axis=1), 1)
    return ColorAssignment(colors=pal_sorted[winner].astype(np.uint8), matched_row=winner, confidence=conf)


# -- protocols -----------------------------------------------------------------


class _Loader:
    def __init__(self, line_threshold: int):
        self.line_threshold = line_threshold
        self._memo: dict[str, LoadedFrame] = {}

    def __call__(self, rec: FrameRecord) -> LoadedFrame:
        key = str(rec.line_path)
        if key not in self._memo:
            self._memo[key] = load_frame(rec, self.line_threshold)
        return self._memo[key]


def _drawing(frame: LoadedFrame) -> Drawing:
    return Drawing(frame.line, frame.seg, frame.palette, frame.line_path)


def _shots(sheets: list, shots) -> list:
    if shots == "max":
        return list(sheets)
    return list(sheets)[: int(shots)]


def run_keyframe_protocol(index: DatasetIndex, colorizer: Colorizer, shots=1, split: str = "test",
                          options: ColorizeOptions | None = None) -> EvalReport:
    """Colorize every test frame from the first ``shots`` design-sheet images (filename order)."""
    options = options or ColorizeOptions()
    load = _Loader(options.line_threshold)
    report = EvalReport(protocol={"name": "keyframe", "shots": shots, "split": split, **_opts(options)})
    clips = index.split(split)
    if not clips:
        raise EvaluationError(f"no clips in split {split!r}")
    for clip in clips:
        sheets = _shots(clip.sheets, shots)
        if not sheets:
            raise EvaluationError(f"{clip.clip_id}: missing design sheets")
        refs = [_drawing(load(s)) for s in sheets]
        for rec in clip.frames:
            if not rec.has_gt:
                report.warnings.append(f"{rec.line_path}: no gt, skipped")
                continue
            frame = load(rec)
            assignment, _ = colorizer.colorize(_drawing(frame), refs, options)
            report.frames.append({"clip": clip.clip_id, "frame": rec.stem,
                                  "references": [s.stem for s in sheets],
                                  "metrics": score_frame(assignment, frame)})
    return report


def consecutive_references(n_frames: int, target: int, refs: str) -> list[int] | None:
    """Frame indices used as references, or None when ``target`` is not evaluated."""
    if refs == "-1":
        return [target - 1] if target >= 1 else None
    if refs == "pm1":
        return [target - 1, target + 1] if 1 <= target < n_frames - 1 else None
    if refs == "first":
        return [0] if target >= 1 else None
    raise ValueError(f"refs must be one of {CONSECUTIVE_REFS}")


def run_consecutive_protocol(index: DatasetIndex, colorizer: Colorizer, refs: str = "-1", shots=0,
                             split: str = "test", options: ColorizeOptions | None = None) -> EvalReport:
    """Colorize frames from neighbouring ground-truth frames, optionally plus design sheets.

    ``refs``: ``-1`` previous frame; ``pm1`` previous and next frame (first
    and last frames skipped); ``first`` the clip's first frame (clip-wise).
    """
    options = options or ColorizeOptions()
    load = _Loader(options.line_threshold)
    report = EvalReport(protocol={"name": "consecutive", "refs": refs, "shots": shots, "split": split,
                                  **_opts(options)})
    clips = index.split(split)
    if not clips:
        raise EvaluationError(f"no clips in split {split!r}")
    for clip in clips:
        if len(clip) < 2:
            report.warnings.append(f"{clip.clip_id}: fewer than 2 frames, skipped")
            continue
        sheets = _shots(clip.sheets, shots) if shots else []
        if shots and not sheets:
            raise EvaluationError(f"{clip.clip_id}: missing design sheets")
        sheet_refs = [_drawing(load(s)) for s in sheets]
        for t, rec in enumerate(clip.frames):
            ids = consecutive_references(len(clip), t, refs)
            if ids is None:
                continue
            if not rec.has_gt:
                report.warnings.append(f"{rec.line_path}: no gt, skipped")
                continue
            missing = [i for i in ids if not clip.frames[i].has_gt]
            if missing:
                msg = f"{clip.clip_id}/{rec.stem}: reference frame(s) {missing} lack gt, skipped"
                log.warning(msg)
                report.warnings.append(msg)
                continue
            frame = load(rec)
            ref_drawings = [_drawing(load(clip.frames[i])) for i in ids] + sheet_refs
            assignment, _ = colorizer.colorize(_drawing(frame), ref_drawings, options)
            report.frames.append({"clip": clip.clip_id, "frame": rec.stem,
                                  "references": [clip.frames[i].stem for i in ids] + [s.stem for s in sheets],
                                  "metrics": score_frame(assignment, frame)})
    return report


def _opts(options: ColorizeOptions) -> dict:
    return {"mono": options.mono, "pooling": options.pooling, "zero_shot": options.zero_shot}

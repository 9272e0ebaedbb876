"""Procedural line-art characters for desk-scale runs and tests.

A character is a stack of flat-colored primitives (legs, body, arms, head,
hair with a shadow region, eyes, mouth). Rendering draws every visible part
in z-order onto a line-art canvas (white fill, colored outline) and onto a
ground-truth canvas (part color fill, same outline), so each line-enclosed
segment is flat-colored in the ground truth.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .segmentation import (
    SegmentMap,
    SegmentPalette,
    extract_segments,
    palette_with_background,
    save_segment_map,
)

BLACK = (0, 0, 0)

# name, kind, geometry in character units (x0, y0, x1, y1) or polygon points, z-order
_LAYOUT = [
    ("leg_l", "rect", (-14, 20, -4, 50)),
    ("leg_r", "rect", (4, 20, 14, 50)),
    ("body", "ellipse", (-18, -12, 18, 28)),
    ("belt", "rect", (-16, 12, 16, 18)),
    ("arm_l", "rect", (-30, -8, -19, 20)),
    ("arm_r", "rect", (19, -8, 30, 20)),
    ("head", "ellipse", (-16, -44, 16, -12)),
    ("hair", "poly", [(-18, -36), (0, -52), (18, -36), (12, -32), (-12, -32)]),
    ("hair_shade", "poly", [(-10, -38), (0, -46), (10, -38)]),
    ("eye_l", "ellipse", (-10, -30, -3, -23)),
    ("eye_r", "ellipse", (3, -30, 10, -23)),
    ("mouth", "rect", (-5, -19, 5, -16)),
]
PART_NAMES = [p[0] for p in _LAYOUT]
_FACE = {"eye_l", "eye_r", "mouth"}
_PAIRS = {"leg_r": "leg_l", "arm_r": "arm_l", "eye_r": "eye_l"}


@dataclass
class Character:
    fills: dict
    lines: dict

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Character":
        fills, lines = {}, {}
        used = set()
        for name in PART_NAMES:
            if name in _PAIRS:
                fills[name] = fills[_PAIRS[name]]
            else:
                while True:
                    c = tuple(int(v) for v in rng.integers(20, 236, 3))
                    if c not in used:
                        used.add(c)
                        break
                fills[name] = c
            lines[name] = BLACK
        # colored boundary lines mark shading, as in production line art
        lines["hair_shade"] = (200, 0, 0)
        lines["eye_l"] = lines["eye_r"] = (0, 0, 200)
        return cls(fills=fills, lines=lines)


@dataclass
class Pose:
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    arm_swing: float = 0.0
    face_shift: float = 0.0
    hidden: frozenset = field(default_factory=frozenset)


def _transform(points, pose: Pose, size: int, shift: tuple[float, float] = (0.0, 0.0)):
    cx = size / 2 + pose.dx
    cy = size / 2 + pose.dy + 2
    k = pose.scale * size / 112.0
    return [(cx + k * (x + shift[0]), cy + k * (y + shift[1])) for x, y in points]


def render(character: Character, pose: Pose, size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(line_art, ground_truth)`` uint8 images of shape size x size x 3."""
    line_img = Image.new("RGB", (size, size), (255, 255, 255))
    gt_img = Image.new("RGB", (size, size), (255, 255, 255))
    dl, dg = ImageDraw.Draw(line_img), ImageDraw.Draw(gt_img)
    for name, kind, geom in _LAYOUT:
        if name in pose.hidden:
            continue
        shift = (0.0, 0.0)
        if name.startswith("arm"):
            shift = (0.0, pose.arm_swing if name == "arm_l" else -pose.arm_swing)
        elif name in _FACE or name == "hair_shade":
            shift = (pose.face_shift, 0.0)
        lc = character.lines[name]
        fc = character.fills[name]
        if kind == "poly":
            pts = _transform(geom, pose, size, shift)
            for d, fill in ((dl, (255, 255, 255)), (dg, fc)):
                d.polygon(pts, fill=fill, outline=lc, width=2)
        else:
            (x0, y0), (x1, y1) = _transform([geom[:2], geom[2:]], pose, size, shift)
            box = [min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)]
            draw = "ellipse" if kind == "ellipse" else "rectangle"
            for d, fill in ((dl, (255, 255, 255)), (dg, fc)):
                getattr(d, draw)(box, fill=fill, outline=lc, width=2)
    return np.asarray(line_img).copy(), np.asarray(gt_img).copy()


@dataclass
class SyntheticFrame:
    line: np.ndarray
    gt: np.ndarray
    seg: SegmentMap
    palette: SegmentPalette
    name: str = ""


def make_frame(character: Character, pose: Pose, size: int = 128, name: str = "") -> SyntheticFrame:
    line, gt = render(character, pose, size)
    seg = extract_segments(line)
    return SyntheticFrame(line, gt, seg, palette_with_background(gt, seg), name)


def clip_poses(rng: np.random.Generator, n_frames: int, occlusion: bool = True) -> list[Pose]:
    """Smooth motion: drift, arm swing and a face turn; an arm may slip behind the body."""
    x0, y0 = rng.uniform(-6, 6, 2)
    vx, vy = rng.uniform(-1.5, 1.5, 2)
    phase = rng.uniform(0, 2 * np.pi)
    turn = rng.uniform(-0.6, 0.6)
    hide_from = int(rng.integers(n_frames // 2, n_frames + 1))
    hidden_arm = "arm_r" if rng.random() < 0.5 else "arm_l"
    poses = []
    for t in range(n_frames):
        hidden = frozenset({hidden_arm}) if occlusion and t >= hide_from else frozenset()
        poses.append(Pose(dx=x0 + vx * t, dy=y0 + vy * t, scale=1.0 + 0.01 * t,
                          arm_swing=4 * np.sin(phase + 0.5 * t), face_shift=turn * t, hidden=hidden))
    return poses


def sheet_poses(rng: np.random.Generator, n: int = 5) -> list[Pose]:
    """Design-sheet views; the first view is a side view that hides several parts."""
    views = [
        frozenset({"eye_r", "arm_r", "mouth", "belt"}),
        frozenset(),
        frozenset({"eye_l", "arm_l"}),
        frozenset({"eye_l", "eye_r", "mouth", "hair_shade"}),
        frozenset({"leg_l"}),
    ]
    poses = []
    for i in range(n):
        hidden = views[i % len(views)]
        shift = {0: -3.0, 2: 3.0}.get(i % len(views), 0.0)
        poses.append(Pose(dx=rng.uniform(-4, 4), dy=rng.uniform(-3, 3), scale=rng.uniform(0.95, 1.05),
                          arm_swing=rng.uniform(-3, 3), face_shift=shift, hidden=hidden))
    return poses


def keyframe_poses(rng: np.random.Generator, n: int) -> list[Pose]:
    """Keyframe-like targets: larger displacement and random occluded parts."""
    optional = ["arm_l", "arm_r", "eye_l", "eye_r", "mouth", "belt", "hair_shade", "leg_l", "leg_r"]
    poses = []
    for _ in range(n):
        k = int(rng.integers(0, 3))
        hidden = frozenset(rng.choice(optional, size=k, replace=False).tolist()) if k else frozenset()
        poses.append(Pose(dx=rng.uniform(-10, 10), dy=rng.uniform(-6, 6), scale=rng.uniform(0.85, 1.1),
                          arm_swing=rng.uniform(-6, 6), face_shift=rng.uniform(-3, 3), hidden=hidden))
    return poses


@dataclass
class KeyframeBenchmark:
    sheets: list[SyntheticFrame]
    targets: list[SyntheticFrame]


def keyframe_benchmark(seed: int = 0, n_characters: int = 4, targets_per_character: int = 5,
                       sheet_size: int = 5, size: int = 128) -> list[KeyframeBenchmark]:
    rng = np.random.default_rng(seed)
    out = []
    for c in range(n_characters):
        ch = Character.random(rng)
        sheets = [make_frame(ch, p, size, f"c{c}_sheet{i}") for i, p in enumerate(sheet_poses(rng, sheet_size))]
        targets = [make_frame(ch, p, size, f"c{c}_t{i}") for i, p in enumerate(keyframe_poses(rng, targets_per_character))]
        out.append(KeyframeBenchmark(sheets, targets))
    return out


def write_dataset(root: str | Path, seed: int = 0, splits=(("train", 2), ("test", 1)),
                  clips_per_character: int = 1, frames_per_clip: int = 4, sheet_size: int = 5,
                  size: int = 128, write_seg: bool = True, occlusion: bool = True) -> Path:
    """Write a dataset in the on-disk layout read by :func:`paintmatch.data.ingest_dataset`."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, n_chars in splits:
        for c in range(n_chars):
            ch = Character.random(rng)
            char_dir = root / split / f"char{c:02d}"
            groups = [(char_dir / f"clip{k:02d}", clip_poses(rng, frames_per_clip, occlusion)) for k in range(clips_per_character)]
            groups.append((char_dir / "sheet", sheet_poses(rng, sheet_size)))
            for folder, poses in groups:
                for sub in ("line", "gt", "seg"):
                    (folder / sub).mkdir(parents=True, exist_ok=True)
                for i, pose in enumerate(poses):
                    fr = make_frame(ch, pose, size)
                    stem = f"{i:04d}"
                    Image.fromarray(fr.line).save(folder / "line" / f"{stem}.png")
                    Image.fromarray(fr.gt).save(folder / "gt" / f"{stem}.png")
                    if write_seg:
                        save_segment_map(folder / "seg" / f"{stem}.png", fr.seg, fr.palette)
    (root / "synthetic.json").write_text(json.dumps({"seed": seed, "size": size}))
    return root


__all__ = [
    "Character", "Pose", "SyntheticFrame", "KeyframeBenchmark", "render", "make_frame",
    "clip_poses", "sheet_poses", "keyframe_poses", "keyframe_benchmark", "write_dataset",
]

"""File-backed cache of frozen semantic feature grids.

One ``<key>.semfeat`` file per image holding the raw ``[H_d, W_d, C_d]``
row-major float32 grid; ``manifest.json`` maps each image to its file,
shape and sha256.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .encoders import BackboneUnavailable, encode_semantic
from .segmentation import DEFAULT_LINE_THRESHOLD, unify_line_colors

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SUFFIX = ".semfeat"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_json_atomic(path: Path, payload) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    os.replace(tmp, path)


class SemanticCache:
    """Semantic features by image key; computes through ``backbone`` on a miss.

    With ``cache_dir=None`` the cache is memory-only.
    """

    def __init__(self, cache_dir: str | Path | None = None, backbone=None, root: str | Path | None = None,
                 memory_items: int = 256, line_threshold: int = DEFAULT_LINE_THRESHOLD):
        self.dir = Path(cache_dir) if cache_dir is not None else None
        self.backbone = backbone
        self.root = Path(root).resolve() if root is not None else None
        self.line_threshold = line_threshold
        self.computed = 0
        self._memory: OrderedDict[str, np.ndarray] = OrderedDict()
        self._memory_items = memory_items
        self.entries: dict[str, dict] = {}
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            mpath = self.dir / MANIFEST
            if mpath.exists():
                self.entries = json.loads(mpath.read_text()).get("entries", {})

    def key_for(self, path: str | Path | None, mono: bool = False) -> str | None:
        if path is None:
            return None
        p = Path(path).resolve()
        if self.root is not None:
            try:
                p = p.relative_to(self.root)
            except ValueError:
                pass
        key = "__".join(part for part in p.with_suffix("").parts if part != p.anchor)
        return key + ("@mono" if mono else "")

    def _file(self, key: str) -> Path:
        return self.dir / f"{key}{SUFFIX}"

    def valid(self, key: str) -> bool:
        entry = self.entries.get(key)
        if entry is None or self.dir is None:
            return False
        f = self._file(key)
        return f.exists() and _sha256(f.read_bytes()) == entry["sha256"]

    def _load(self, key: str) -> np.ndarray:
        entry = self.entries[key]
        data = self._file(key).read_bytes()
        if _sha256(data) != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {key}")
        return np.frombuffer(data, dtype="<f4").reshape(entry["shape"]).copy()

    def _store(self, key: str, grid: np.ndarray, source: str | None) -> None:
        data = np.ascontiguousarray(grid, dtype="<f4").tobytes()
        f = self._file(key)
        tmp = f.with_name(f.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, f)
        self.entries[key] = {"file": f.name, "shape": list(grid.shape), "sha256": _sha256(data), "source": source}

    def save_manifest(self) -> None:
        if self.dir is not None:
            name = getattr(self.backbone, "name", None)
            write_json_atomic(self.dir / MANIFEST, {"backbone": name, "entries": self.entries})

    def _compute(self, image: np.ndarray, mono: bool) -> np.ndarray:
        if self.backbone is None:
            raise BackboneUnavailable("feature not cached and no backbone configured")
        if mono:
            image = unify_line_colors(image, self.line_threshold)
        self.computed += 1
        return encode_semantic(image, self.backbone)

    def get(self, image: np.ndarray | None, path: str | Path | None = None, mono: bool = False,
            persist: bool = True) -> np.ndarray:
        key = self.key_for(path, mono)
        if key is not None and key in self._memory:
            self._memory.move_to_end(key)
            return self._memory[key]
        grid = None
        if key is not None and key in self.entries and self.dir is not None:
            try:
                grid = self._load(key)
            except (OSError, ValueError) as exc:
                log.warning("recomputing %s: %s", key, exc)
        if grid is None:
            if image is None:
                from .data import read_rgb

                image = read_rgb(path)
            grid = self._compute(image, mono)
            if key is not None and self.dir is not None and persist:
                self._store(key, grid, str(path))
                self.save_manifest()
        if key is not None:
            self._memory[key] = grid
            if len(self._memory) > self._memory_items:
                self._memory.popitem(last=False)
        return grid


def precompute_semantic_features(index, cache: SemanticCache, split: str | None = None,
                                 mono: bool = False) -> dict:
    """Fill the cache for every indexed image; valid entries are skipped.

    The manifest is rewritten even if a write fails part-way.
    """
    from .data import read_rgb

    try:
        for rec in index.images(split):
            key = cache.key_for(rec.line_path, mono)
            if cache.valid(key):
                continue
            grid = cache._compute(read_rgb(rec.line_path), mono)
            cache._store(key, grid, str(rec.line_path))
    finally:
        cache.save_manifest()
    return {"backbone": getattr(cache.backbone, "name", None), "entries": dict(cache.entries)}

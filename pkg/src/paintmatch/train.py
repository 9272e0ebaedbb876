"""Training loop for the spatial encoder and fusion head (semantic backbone frozen)."""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .cache import SemanticCache, write_json_atomic
from .correspondence import similarity_map
from .data import DatasetIndex, FrameRecord, load_frame, sample_references
from .encoders import encode_spatial, image_to_tensor
from .features import pool_upsampled, segment_pool
from .model import Checkpoint, Colorizer
from .objective import LossWeights, step_loss

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 2
    lr: float = 1e-4
    optimizer: str = "adam"
    train_size: int | None = 512  # None trains at native resolution
    max_offset: int = 2
    allow_zero_offset: bool = True
    refs_per_step: int = 1
    seed: int = 0
    lambda_ce: float = 0.5
    lambda_dc: float = 0.2
    temperature: float = 0.1
    consistency_scale: float = 10.0
    pooling_normalize: str = "mask"
    split: str = "train"
    deterministic: bool = True
    keep_checkpoints: int = 1
    line_threshold: int = 10
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.refs_per_step < 1:
            raise ValueError("batch_size and refs_per_step must be >= 1")
        if self.max_offset < 0:
            raise ValueError("max_offset must be >= 0")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ce, self.lambda_dc, self.temperature, self.consistency_scale)

    @property
    def arm(self) -> str:
        return "wo_consistency" if self.lambda_dc == 0 else "full"

    def to_dict(self) -> dict:
        return {**asdict(self), "arm": self.arm}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known - {"arm"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class _Prepared:
    key: str
    image: torch.Tensor  # 1 x 3 x h x w
    labels: np.ndarray
    count: int
    colors: np.ndarray
    semantic: torch.Tensor  # pooled, count x C_d
    dropped: int


def _resize_labels(labels: np.ndarray, size: int) -> np.ndarray:
    h, w = labels.shape
    ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return labels[np.ix_(ys, xs)]


class _FrameStore:
    """Loads, resizes and memoises training frames."""

    def __init__(self, cache: SemanticCache, config: TrainConfig, capacity: int = 512):
        self.cache = cache
        self.config = config
        self.capacity = capacity
        self._items: OrderedDict[str, _Prepared] = OrderedDict()

    def get(self, rec: FrameRecord) -> _Prepared:
        key = str(rec.line_path)
        if key in self._items:
            self._items.move_to_end(key)
            return self._items[key]
        frame = load_frame(rec, self.config.line_threshold)
        grid = self.cache.get(frame.line, rec.line_path)
        line, labels = frame.line, frame.seg.labels
        colors = frame.palette.colors
        size = self.config.train_size
        dropped = 0
        if size and labels.shape != (size, size):
            line = np.asarray(Image.fromarray(line).resize((size, size), Image.BILINEAR))
            small = _resize_labels(labels, size)
            present = np.unique(small[small > 0])
            dropped = frame.seg.segment_count - len(present)
            if dropped:
                log.warning("%s: %d segments vanish at %dx%d and are dropped", key, dropped, size, size)
            remap = np.zeros(frame.seg.segment_count + 1, dtype=np.int64)
            remap[present] = np.arange(1, len(present) + 1)
            labels = remap[small]
            colors = colors[present - 1]
        count = int(labels.max())
        sem = pool_upsampled(grid, labels, count, self.config.pooling_normalize)
        item = _Prepared(key, image_to_tensor(line), labels.astype(np.int64), count, colors,
                         torch.from_numpy(np.asarray(sem, dtype=np.float32)), dropped)
        self._items[key] = item
        if len(self._items) > self.capacity:
            self._items.popitem(last=False)
        return item


def _fused(model: Colorizer, p: _Prepared, normalize: str) -> torch.Tensor:
    u = segment_pool(encode_spatial(p.image, model.spatial), p.labels, p.count, normalize)
    return model.fusion(p.semantic, u)


def sample_loss(model: Colorizer, target: _Prepared, refs: list[_Prepared], config: TrainConfig) -> dict:
    norm = config.pooling_normalize
    f_t = _fused(model, target, norm)
    f_r = torch.cat([_fused(model, r, norm) for r in refs])
    d_r = torch.cat([r.semantic for r in refs])
    S = similarity_map(f_r, f_t)
    S_sem = similarity_map(d_r, target.semantic)
    pool_colors = np.concatenate([r.colors for r in refs])
    return step_loss(S, S_sem, pool_colors, target.colors, config.weights)


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}


def train(config: TrainConfig, index: DatasetIndex, cache: SemanticCache, out_dir: str | Path | None = None,
          model: Colorizer | None = None, on_step=None) -> Checkpoint:
    """Optimise the spatial encoder and fusion head on the training split.

    ``on_step(step, record, model)`` is called after every update. Returns the
    final checkpoint; with ``out_dir`` set, per-epoch checkpoints and a
    ``losses.json`` curve file are written there.
    """
    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(config.seed)
    clips = index.split(config.split)
    targets = [(ci, fi) for ci, clip in enumerate(clips) for fi in clip.supervised()]
    if not targets:
        raise ValueError(f"no supervised frames in split {config.split!r}")
    model = model or Colorizer(cache)
    model.train()
    opt = torch.optim.Adam(list(model.parameters()), lr=config.lr)
    store = _FrameStore(cache, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    curves, saved, step = [], [], 0
    ckpt = None
    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        order = rng.permutation(len(targets))
        for b in range(0, len(order), config.batch_size):
            batch = [targets[i] for i in order[b : b + config.batch_size]]
            records, totals = [], []
            for ci, fi in batch:
                clip = clips[ci]
                ref_ids = sample_references(clip, fi, config.refs_per_step, rng, config.max_offset,
                                            config.allow_zero_offset)
                tgt = store.get(clip.frames[fi])
                refs = [store.get(clip.frames[r]) for r in ref_ids]
                res = sample_loss(model, tgt, refs, config)
                totals.append(res["total"])
                records.append({"clip": clip.clip_id, "target": fi, "refs": ref_ids,
                                "ce": float(res["ce"].detach()), "dc": float(res["dc"].detach()),
                                "all_excluded": res["all_excluded"]})
            loss = torch.stack(totals).mean()
            if not math.isfinite(float(loss.detach())):
                bundle = {"step": step + 1, "epoch": epoch, "samples": records, "rng_state": _rng_state(rng)}
                if out is not None:
                    torch.save(bundle, out / f"diagnostic_step{step + 1}.pt")
                raise NonFiniteLoss(f"non-finite loss at step {step + 1}: {records}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            rec = {"step": step, "epoch": epoch, "loss": float(loss.detach()), "samples": records}
            epoch_losses.append(rec["loss"])
            if on_step is not None:
                on_step(step, rec, model)
            if config.max_steps is not None and step >= config.max_steps:
                break
        curves.append({"epoch": epoch, "losses": epoch_losses,
                       "mean": float(np.mean(epoch_losses)) if epoch_losses else None})
        spatial, fusion = model.state()
        ckpt = Checkpoint(spatial=spatial, fusion=fusion, config=config.to_dict(), epoch=epoch, step=step,
                          rng_state=_rng_state(rng), optimizer=opt.state_dict())
        if out is not None:
            path = ckpt.save(out / f"epoch_{epoch:03d}.pt")
            saved.append(path)
            while len(saved) > max(config.keep_checkpoints, 1):
                saved.pop(0).unlink(missing_ok=True)
            write_json_atomic(out / "losses.json", {"config": config.to_dict(), "epochs": curves})
        if config.max_steps is not None and step >= config.max_steps:
            break
    model.eval()
    return ckpt


def load_config_file(path: str | Path) -> dict:
    """Key-value YAML config; every TrainConfig field may appear as a key."""
    import yaml

    values = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(values, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return values


def dump_config_file(config: TrainConfig, path: str | Path) -> None:
    import yaml

    Path(path).write_text(yaml.safe_dump(asdict(config), sort_keys=False))


__all__ = ["TrainConfig", "train", "sample_loss", "NonFiniteLoss", "load_config_file", "dump_config_file"]

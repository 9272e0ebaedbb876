"""End-to-end colorizer: segment features for each drawing, pooled matching, checkpoints."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cache import SemanticCache
from .correspondence import ColorAssignment, ReferencePool, match
from .encoders import SpatialUNet, encode_spatial, image_to_tensor
from .features import FusionHead, SegmentFeatureSet, pool_upsampled, segment_pool, segment_pool_fixed
from .segmentation import DEFAULT_LINE_THRESHOLD, SegmentMap, SegmentPalette, unify_line_colors

CHECKPOINT_FORMAT = "paintmatch.checkpoint"
CHECKPOINT_VERSION = 1
POOLING_VARIANTS = ("native", "fixed512")


class CheckpointError(ValueError):
    pass


@dataclass
class Drawing:
    """A line drawing with its segments; references also carry a palette."""

    line: np.ndarray
    seg: SegmentMap
    palette: SegmentPalette | None = None
    path: str | Path | None = None  # semantic cache key source


@dataclass
class ColorizeOptions:
    mono: bool = False
    pooling: str = "native"
    fixed_side: int = 512
    zero_shot: bool = False
    normalize: str = "mask"
    line_threshold: int = DEFAULT_LINE_THRESHOLD

    def __post_init__(self):
        if self.pooling not in POOLING_VARIANTS:
            raise ValueError(f"pooling must be one of {POOLING_VARIANTS}")


@dataclass
class Checkpoint:
    spatial: dict
    fusion: dict
    config: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    optimizer: dict | None = None

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **asdict(self)}
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
        fields = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        return cls(**fields)


class Colorizer:
    """Holds the trainable spatial encoder and fusion head plus a semantic feature source."""

    def __init__(self, semantic: SemanticCache, spatial: SpatialUNet | None = None,
                 fusion: FusionHead | None = None, semantic_dim: int | None = None):
        self.semantic = semantic
        dim = semantic_dim or getattr(semantic.backbone, "dim", None) or 1024
        self.spatial = spatial if spatial is not None else SpatialUNet()
        self.fusion = fusion if fusion is not None else FusionHead(semantic_dim=dim)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path, semantic: SemanticCache) -> "Colorizer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = Checkpoint.load(ckpt)
        dim = ckpt.fusion["reduce.0.weight"].shape[1]
        model = cls(semantic, semantic_dim=dim)
        model.spatial.load_state_dict(ckpt.spatial)
        model.fusion.load_state_dict(ckpt.fusion)
        return model

    def parameters(self):
        yield from self.spatial.parameters()
        yield from self.fusion.parameters()

    def state(self) -> tuple[dict, dict]:
        return (
            {k: v.detach().clone() for k, v in self.spatial.state_dict().items()},
            {k: v.detach().clone() for k, v in self.fusion.state_dict().items()},
        )

    def eval(self) -> "Colorizer":
        self.spatial.eval()
        self.fusion.eval()
        return self

    def train(self) -> "Colorizer":
        self.spatial.train()
        self.fusion.train()
        return self

    # -- features ------------------------------------------------------------

    def semantic_rows(self, drawing: Drawing, options: ColorizeOptions) -> torch.Tensor:
        grid = self.semantic.get(drawing.line, drawing.path, mono=options.mono)
        seg = drawing.seg
        if options.pooling == "fixed512":
            d = segment_pool_fixed(grid, seg.labels, seg.segment_count, options.fixed_side, options.normalize)
        else:
            d = pool_upsampled(grid, seg.labels, seg.segment_count, options.normalize)
        return torch.from_numpy(np.asarray(d, dtype=np.float32))

    def spatial_rows(self, line: np.ndarray, seg: SegmentMap, options: ColorizeOptions) -> torch.Tensor:
        u_map = encode_spatial(image_to_tensor(line), self.spatial)
        if options.pooling == "fixed512":
            return segment_pool_fixed(u_map, seg.labels, seg.segment_count, options.fixed_side, options.normalize)
        return segment_pool(u_map, seg.labels, seg.segment_count, options.normalize)

    def features(self, drawing: Drawing, options: ColorizeOptions | None = None) -> SegmentFeatureSet:
        options = options or ColorizeOptions()
        d = self.semantic_rows(drawing, options)
        if options.zero_shot:
            return SegmentFeatureSet(semantic=d, spatial=None, fused=d)
        line = unify_line_colors(drawing.line, options.line_threshold) if options.mono else drawing.line
        u = self.spatial_rows(line, drawing.seg, options)
        return SegmentFeatureSet(semantic=d, spatial=u, fused=self.fusion(d, u))

    @torch.no_grad()
    def colorize(self, target: Drawing, references: list[Drawing],
                 options: ColorizeOptions | None = None) -> tuple[ColorAssignment, ReferencePool]:
        """Assign every target segment the color of its best match across all references."""
        options = options or ColorizeOptions()
        self.eval()
        refs = []
        for k, ref in enumerate(references, start=1):
            if ref.palette is None or len(ref.palette) == 0:
                raise ValueError(f"reference {k} has an empty palette")
            refs.append((self.features(ref, options).fused, ref.palette))
        f_t = self.features(target, options).fused
        assignment, pool, _ = match(refs, f_t)
        return assignment, pool

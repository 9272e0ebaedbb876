"""Semantic (frozen) and spatial (trainable) feature extractors.

Feature maps in the public API are ``H x W x C``. The spatial encoder is a
torch module and works channel-first internally.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SEMANTIC_INPUT_SIDE = 518
PATCH_SIZE = 14
SEMANTIC_DIM = 1024
SPATIAL_DIM = 128
UNET_WIDTHS = (32, 64, 128, 256)

_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class BackboneUnavailable(RuntimeError):
    def __init__(self, detail: str = ""):
        super().__init__("backbone unavailable" + (f": {detail}" if detail else ""))


def _resize_image(image: np.ndarray, side: int) -> torch.Tensor:
    """uint8 H x W x 3 -> float (1, 3, side, side) in [0, 1], bilinear."""
    x = torch.from_numpy(np.array(image[..., :3], dtype=np.float32)).div_(255.0)
    x = x.permute(2, 0, 1).unsqueeze(0)
    if x.shape[-2:] != (side, side):
        x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False)
    return x


# -- semantic backbones ------------------------------------------------------


class Dinov2Backbone:
    """Frozen DINOv2 ViT-L/14 loaded from a local Hugging Face checkpoint directory.

    Returns the final-layer patch tokens as a ``37 x 37 x 1024`` grid for the
    default 518 x 518 input.
    """

    name = "dinov2"

    def __init__(self, weights: str | Path, input_side: int = SEMANTIC_INPUT_SIDE, device: str = "cpu"):
        path = Path(weights) if weights else None
        if path is None or not path.exists():
            raise BackboneUnavailable(f"no weights at {weights!r}")
        try:
            from transformers import Dinov2Model

            self.model = Dinov2Model.from_pretrained(str(path)).eval().to(device)
        except Exception as exc:  # corrupt or incompatible checkpoint
            raise BackboneUnavailable(str(exc)) from exc
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.input_side = input_side
        self.patch_size = int(self.model.config.patch_size)
        self.dim = int(self.model.config.hidden_size)
        self.device = device

    @torch.no_grad()
    def __call__(self, image: np.ndarray) -> np.ndarray:
        x = _resize_image(image, self.input_side)
        mean = torch.from_numpy(_IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.from_numpy(_IMAGENET_STD).view(1, 3, 1, 1)
        x = ((x - mean) / std).to(self.device)
        tokens = self.model(pixel_values=x).last_hidden_state
        grid = self.input_side // self.patch_size
        n_special = tokens.shape[1] - grid * grid
        patches = tokens[0, n_special:, :]
        return patches.reshape(grid, grid, -1).float().cpu().numpy()


class ProceduralBackbone:
    """Weight-free deterministic stand-in for the semantic backbone.

    Each 14 px patch of the 518 x 518 input is described by its line density
    and line color at several context radii plus its position relative to the
    drawing's ink centroid; a fixed random feature map lifts this to
    ``SEMANTIC_DIM`` channels. Useful for desk-scale runs and tests where
    pretrained weights are not available.
    """

    name = "procedural"

    def __init__(self, dim: int = SEMANTIC_DIM, input_side: int = SEMANTIC_INPUT_SIDE,
                 patch_size: int = PATCH_SIZE, seed: int = 0):
        self.dim = dim
        self.input_side = input_side
        self.patch_size = patch_size
        self.context = (1, 3, 7, 15)
        n_in = 4 * len(self.context) + 4
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((n_in, dim)).astype(np.float32) * 1.5
        self.bias = rng.uniform(-np.pi, np.pi, dim).astype(np.float32)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        from scipy.ndimage import uniform_filter

        x = _resize_image(image, self.input_side)[0].numpy()  # 3 x S x S
        ink = 1.0 - x.min(axis=0)
        chans = np.stack([ink, ink * (1 - x[0]), ink * (1 - x[1]), ink * (1 - x[2])])
        grid = self.input_side // self.patch_size
        s = grid * self.patch_size
        pooled = chans[:, :s, :s].reshape(4, grid, self.patch_size, grid, self.patch_size).mean(axis=(2, 4))
        feats = [uniform_filter(pooled, size=(1, k, k), mode="constant") * 4.0 for k in self.context]
        yy, xx = np.meshgrid(np.linspace(-1, 1, grid), np.linspace(-1, 1, grid), indexing="ij")
        mass = pooled[0].sum()
        if mass > 0:
            cy = (pooled[0] * yy).sum() / mass
            cx = (pooled[0] * xx).sum() / mass
        else:
            cy = cx = 0.0
        pos = np.stack([yy, xx, yy - cy, xx - cx])
        desc = np.concatenate(feats + [pos], axis=0).reshape(-1, grid * grid).T.astype(np.float32)
        out = np.cos(desc @ self.proj + self.bias) * np.sqrt(2.0)
        return out.reshape(grid, grid, self.dim)


# -- spatial encoder -----------------------------------------------------------


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
    )


class SpatialUNet(nn.Module):
    """4-level encoder / 4-level decoder with skip connections, 128-channel output."""

    def __init__(self, in_channels: int = 3, widths=UNET_WIDTHS, out_channels: int = SPATIAL_DIM):
        super().__init__()
        self.widths = tuple(widths)
        self.encoders = nn.ModuleList()
        c = in_channels
        for w in self.widths:
            self.encoders.append(_block(c, w))
            c = w
        self.decoders = nn.ModuleList([_block(self.widths[-1], self.widths[-1])])
        self.upsamplers = nn.ModuleList()
        for lo, hi in zip(reversed(self.widths[:-1]), reversed(self.widths[1:])):
            self.upsamplers.append(nn.ConvTranspose2d(hi, lo, 2, stride=2))
            self.decoders.append(_block(2 * lo, lo))
        self.head = nn.Conv2d(self.widths[0], out_channels, 1)

    @property
    def min_side(self) -> int:
        # the coarsest level must keep at least 2 x 2 pixels for instance norm
        return 2 * self.factor

    @property
    def factor(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if min(h, w) < self.min_side:
            raise ValueError(f"input {h}x{w} is smaller than the minimum side {self.min_side}")
        f = self.factor
        ph, pw = (-h) % f, (-w) % f
        if ph or pw:
            # pad with canvas white so padding never reads as line work
            x = F.pad(x, (0, pw, 0, ph), value=1.0)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        x = self.decoders[0](skips[-1])
        for up, dec, skip in zip(self.upsamplers, self.decoders[1:], reversed(skips[:-1])):
            x = dec(torch.cat([up(x), skip], dim=1))
        return self.head(x)[..., :h, :w]


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 H x W x 3 -> (1, 3, H, W) in [-1, 1]."""
    x = torch.from_numpy(np.array(image[..., :3], dtype=np.float32))
    return (x / 127.5 - 1.0).permute(2, 0, 1).unsqueeze(0)


def encode_spatial(image: np.ndarray | torch.Tensor, params: SpatialUNet) -> torch.Tensor:
    """Spatial feature map ``H x W x 128``; differentiable w.r.t. ``params``."""
    x = image if isinstance(image, torch.Tensor) else image_to_tensor(image)
    x = x.to(next(params.parameters()).dtype)
    return params(x)[0].permute(1, 2, 0)


def encode_semantic(image: np.ndarray, backbone) -> np.ndarray:
    grid = np.asarray(backbone(image), dtype=np.float32)
    if not np.isfinite(grid).all():
        raise ValueError("semantic features contain non-finite values")
    return grid


# -- bilinear resize ----------------------------------------------------------


def resize_feature_map(fmap, size: tuple[int, int]):
    """Channel-wise bilinear resize of an ``H x W x C`` map (half-pixel centers).

    Accepts numpy arrays or torch tensors and returns the same kind.
    """
    th, tw = size
    if th < 1 or tw < 1:
        raise ValueError("target size must be positive")
    is_np = isinstance(fmap, np.ndarray)
    t = torch.from_numpy(fmap) if is_np else fmap
    if tuple(t.shape[:2]) == (th, tw):
        return fmap
    out = F.interpolate(t.permute(2, 0, 1).unsqueeze(0), size=(th, tw), mode="bilinear", align_corners=False)
    out = out[0].permute(1, 2, 0)
    return out.numpy() if is_np else out


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` matrix reproducing 1-D half-pixel bilinear resampling."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat

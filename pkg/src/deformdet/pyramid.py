"""Multi-scale feature pyramid, positional/scale-level embeddings and coordinate rescaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

STEM_STRIDES = (8, 16, 32)


@dataclass
class FeaturePyramid:
    """``L`` maps of equal channel width; ``levels[l]`` is ``[B, C, H_l, W_l]``."""

    levels: list
    strides: list

    @property
    def shapes(self):
        return [tuple(level.shape[-2:]) for level in self.levels]

    def __len__(self):
        return len(self.levels)


def level_shapes(height: int, width: int, n_levels: int) -> list:
    """Spatial sizes of the pyramid built from a ``height x width`` image."""
    return [(-(-height // s), -(-width // s)) for s in pyramid_strides(n_levels)]


def pyramid_strides(n_levels: int) -> list:
    if not 1 <= n_levels <= 4:
        raise ValueError(f"n_levels must be in 1..4, got {n_levels}")
    strides = list(STEM_STRIDES) + [64]
    # fewer levels keep the coarsest stem stages (single scale = stride 32)
    return strides[:4] if n_levels == 4 else list(STEM_STRIDES[3 - n_levels :])


def rescale_reference(p_norm, shape):
    """Map normalized ``(x, y)`` in ``[0, 1]^2`` to pixel coords of an ``(H, W)`` level."""
    p = np.asarray(p_norm, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("normalized reference must lie in [0, 1]^2")
    h, w = shape
    return p * np.array([w - 1, h - 1], dtype=np.float64)


def normalized_grid(shape) -> np.ndarray:
    """Normalized ``(x, y)`` of every pixel of an ``(H, W)`` map in row-major order, ``[H*W, 2]``.

    Inverse of :func:`rescale_reference`; a singleton axis maps to 0.5.
    """
    h, w = shape
    xs = np.arange(w) / (w - 1) if w > 1 else np.full(1, 0.5)
    ys = np.arange(h) / (h - 1) if h > 1 else np.full(1, 0.5)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def sine_encode(coords, n_feats: int, temperature: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of normalized scalars: ``[..., n]`` -> ``[..., n * n_feats]``."""
    if n_feats % 2:
        raise ValueError("n_feats must be even")
    dim_t = temperature ** (2 * (np.arange(n_feats) // 2) / n_feats)
    angles = np.asarray(coords, dtype=np.float64)[..., None] * (2 * np.pi) / dim_t
    out = np.empty(angles.shape)
    out[..., 0::2] = np.sin(angles[..., 0::2])
    out[..., 1::2] = np.cos(angles[..., 1::2])
    return out.reshape(*angles.shape[:-2], -1)


def sine_positional_embedding(height: int, width: int, channels: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed ``[C, H, W]`` encoding: first half of the channels encodes y, second half x."""
    if channels % 4:
        raise ValueError(f"channels must be a multiple of 4 for sin/cos pairs per axis, got {channels}")
    grid = normalized_grid((height, width))
    enc = sine_encode(grid[:, ::-1], channels // 2, temperature)  # (y, x) order
    return enc.T.reshape(channels, height, width)


def attach_embeddings(levels, positional, level_embed):
    """Key features ``x + pos + e_l`` per level; the raw ``levels`` are left untouched."""
    out = []
    for x, pos, e in zip(levels, positional, level_embed):
        e = e.reshape(-1, 1, 1)
        out.append(x + pos + e)
    return out


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(min(8, cout), cout), nn.ReLU())


class Stem(nn.Module):
    """Small strided CNN standing in for the ResNet C3-C5 stages (strides 8, 16, 32)."""

    def __init__(self, widths=(16, 32, 64, 64, 96)):
        super().__init__()
        w0, w1, w3, w4, w5 = widths
        self.entry = nn.Sequential(_conv(3, w0, 2), _conv(w0, w1, 2))
        self.stages = nn.ModuleList(
            [
                nn.Sequential(_conv(w1, w3, 2), _conv(w3, w3, 1)),
                nn.Sequential(_conv(w3, w4, 2), _conv(w4, w4, 1)),
                nn.Sequential(_conv(w4, w5, 2), _conv(w5, w5, 1)),
            ]
        )
        self.out_channels = (w3, w4, w5)

    def forward(self, image):
        x = self.entry(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Backbone(nn.Module):
    """Stem + 1x1 projections to ``d_model`` + stride-2 3x3 conv for the extra coarsest level."""

    def __init__(self, d_model: int, n_levels: int, stem: Stem | None = None):
        super().__init__()
        self.stem = stem or Stem()
        self.n_levels = n_levels
        self.strides = pyramid_strides(n_levels)
        used = self.stem.out_channels if n_levels == 4 else self.stem.out_channels[3 - n_levels :]
        groups = min(8, d_model)
        self.input_proj = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(c, d_model, 1), nn.GroupNorm(groups, d_model)) for c in used]
        )
        self.extra = None
        if n_levels == 4:
            c5 = self.stem.out_channels[-1]
            self.extra = nn.Sequential(nn.Conv2d(c5, d_model, 3, 2, 1), nn.GroupNorm(groups, d_model))

    def forward(self, image) -> FeaturePyramid:
        return build_pyramid(image, self)


def build_pyramid(image, backbone: Backbone) -> FeaturePyramid:
    """Run ``backbone`` on ``[B, 3, H, W]`` (or ``[3, H, W]``) images."""
    if image.dim() == 3:
        image = image[None]
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"image size {h}x{w} is not divisible by the stem stride 32")
    feats = backbone.stem(image)
    used = feats if backbone.n_levels == 4 else feats[3 - backbone.n_levels :]
    levels = [proj(f) for proj, f in zip(backbone.input_proj, used)]
    if backbone.extra is not None:
        levels.append(backbone.extra(feats[-1]))
    return FeaturePyramid(levels=levels, strides=list(backbone.strides))


def positional_tensors(shapes, channels: int, dtype=torch.float32) -> list:
    return [torch.as_tensor(sine_positional_embedding(h, w, channels), dtype=dtype) for h, w in shapes]

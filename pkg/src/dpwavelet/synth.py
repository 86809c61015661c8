"""Deterministic toy corpora: geometric shapes on gradient backgrounds.

The condition id of an image is its class, which fixes the shape and its
tone. Public and private splits use disjoint style parameters (background
orientation and brightness, shape scale) so a model pretrained on one has
something to adapt to on the other.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np

SHAPES = ("disk", "square", "triangle", "cross")


@dataclass(frozen=True)
class Style:
    name: str
    gradient_axis: int  # 0: top-to-bottom, 1: left-to-right
    background: Tuple[float, float]
    radius: Tuple[float, float]  # fraction of image size
    bright: float
    dark: float
    texture: float


STYLES = {
    "public": Style("public", 1, (0.15, 0.45), (0.22, 0.30), 0.90, 0.02, 0.03),
    "private": Style("private", 0, (0.85, 0.50), (0.30, 0.40), 0.98, 0.10, 0.03),
}

_PALETTE = np.array(
    [[1.0, 0.2, 0.2], [0.2, 1.0, 0.3], [0.3, 0.4, 1.0], [1.0, 0.9, 0.2]]
)


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = y - cy, x - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def class_layout(cls: int) -> Tuple[str, bool, int]:
    shape = SHAPES[cls % len(SHAPES)]
    bright = (cls // len(SHAPES)) % 2 == 0
    return shape, bright, cls % len(_PALETTE)


def render(cls: int, style: Style, rng: np.random.Generator, size: int = 16, channels: int = 1) -> np.ndarray:
    """One ``(size, size, channels)`` image in [0, 1]."""
    lo, hi = style.background
    ramp = np.linspace(lo, hi, size)
    bg = ramp[:, None] * np.ones((1, size)) if style.gradient_axis == 0 else np.ones((size, 1)) * ramp[None, :]
    shape, bright, hue = class_layout(cls)
    r = size * rng.uniform(*style.radius)
    cy = size / 2 + rng.uniform(-1.5, 1.5)
    cx = size / 2 + rng.uniform(-1.5, 1.5)
    mask = _shape_mask(shape, size, cy, cx, r)
    tone = style.bright if bright else style.dark
    if channels == 1:
        img = np.where(mask, tone, bg)[:, :, None]
    else:
        color = _PALETTE[hue] * tone if bright else _PALETTE[hue] * 0.25 + tone
        img = np.where(mask[:, :, None], np.clip(color, 0, 1)[None, None, :], bg[:, :, None] * np.ones(3))
    img = img + style.texture * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def make_corpus(style: str, n_classes: int, per_class: int, seed: int, size: int = 16, channels: int = 1):
    """Images and condition ids, deterministic in ``seed``; class-major order."""
    st = STYLES[style]
    images: List[np.ndarray] = []
    conds: List[int] = []
    for c in range(n_classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, c, i]))
            images.append(render(c, st, rng, size, channels))
            conds.append(c)
    return images, conds


def style_params(style: str) -> dict:
    return asdict(STYLES[style])

"""Orthonormal 2D Haar wavelet transform.

Planes are arrays whose last two axes are (rows, cols); any leading axes
(channels, batch) are transformed independently. Images are ``(H, W, C)``
float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigurationError, DimensionError

BANDS = ("LH", "HL", "HH")


def _check_even(plane: np.ndarray) -> None:
    if plane.ndim < 2:
        raise DimensionError(f"expected at least 2 axes, got shape {plane.shape}")
    rows, cols = plane.shape[-2:]
    if rows % 2:
        raise DimensionError(f"row axis has odd length {rows}")
    if cols % 2:
        raise DimensionError(f"column axis has odd length {cols}")


def dwt2_level(plane):
    """One level of the 2D Haar analysis filter bank.

    For every non-overlapping 2x2 block ``[[a, b], [c, d]]`` returns
    ``LL=(a+b+c+d)/2``, ``LH=(a+b-c-d)/2``, ``HL=(a-b+c-d)/2`` and
    ``HH=(a-b-c+d)/2``, each at half the spatial extent.
    """
    plane = np.asarray(plane, dtype=np.float64)
    _check_even(plane)
    a = plane[..., 0::2, 0::2]
    b = plane[..., 0::2, 1::2]
    c = plane[..., 1::2, 0::2]
    d = plane[..., 1::2, 1::2]
    s_top, d_top = a + b, a - b
    s_bot, d_bot = c + d, c - d
    ll = (s_top + s_bot) / 2
    lh = (s_top - s_bot) / 2
    hl = (d_top + d_bot) / 2
    hh = (d_top - d_bot) / 2
    return ll, lh, hl, hh


def idwt2_level(ll, lh, hl, hh):
    """Exact inverse of :func:`dwt2_level`."""
    ll, lh, hl, hh = (np.asarray(x, dtype=np.float64) for x in (ll, lh, hl, hh))
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise DimensionError(
            f"subband shapes differ: {ll.shape}, {lh.shape}, {hl.shape}, {hh.shape}"
        )
    if ll.ndim < 2:
        raise DimensionError(f"expected at least 2 axes, got shape {ll.shape}")
    p, m = ll + lh, ll - lh
    r, s = hl + hh, hl - hh
    out = np.empty(ll.shape[:-2] + (2 * ll.shape[-2], 2 * ll.shape[-1]))
    out[..., 0::2, 0::2] = (p + r) / 2
    out[..., 0::2, 1::2] = (p - r) / 2
    out[..., 1::2, 0::2] = (m + s) / 2
    out[..., 1::2, 1::2] = (m - s) / 2
    return out


@dataclass(frozen=True)
class SubbandPyramid:
    """Multiscale Haar coefficients of one image.

    ``approx`` has shape ``(C, H/2^J, W/2^J)``. ``details[j]`` is the
    ``(LH, HL, HH)`` triple at scale ``j``, with ``j = 0`` the coarsest,
    each of shape ``(C, H/2^(J-j), W/2^(J-j))``.
    """

    approx: np.ndarray
    details: Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...]

    @property
    def depth(self) -> int:
        return len(self.details)

    @property
    def channels(self) -> int:
        return self.approx.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        h, w = self.approx.shape[-2:]
        f = 2 ** self.depth
        return (h * f, w * f, self.channels)

    def planes(self) -> Dict[str, np.ndarray]:
        """All planes keyed ``LL`` then ``LH0, HL0, HH0, LH1, ...``."""
        out = {"LL": self.approx}
        for j, triple in enumerate(self.details):
            for band, plane in zip(BANDS, triple):
                out[f"{band}{j}"] = plane
        return out

    def with_details_zeroed(self, keep: int) -> "SubbandPyramid":
        details = tuple(
            triple if j < keep else tuple(np.zeros_like(p) for p in triple)
            for j, triple in enumerate(self.details)
        )
        return SubbandPyramid(self.approx, details)

    def scaled(self, alpha: float) -> "SubbandPyramid":
        return SubbandPyramid(
            alpha * self.approx,
            tuple(tuple(alpha * p for p in t) for t in self.details),
        )


def as_image(image) -> np.ndarray:
    """Coerce to a float64 ``(H, W, C)`` array, adding a channel axis to 2D input."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimensionError(f"image must be (H, W) or (H, W, C), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite samples")
    return arr


def required_divisor(depth: int) -> int:
    return 2 ** (depth + 1)


def decompose(image, depth: int) -> SubbandPyramid:
    """Apply :func:`dwt2_level` ``depth`` times to the running approximation."""
    if depth < 1:
        raise ConfigurationError(f"depth must be >= 1, got {depth}")
    img = as_image(image)
    h, w, _ = img.shape
    div = required_divisor(depth)
    if h % div or w % div:
        raise ConfigurationError(
            f"image size {h}x{w} must be divisible by {div} for depth {depth}"
        )
    cur = np.moveaxis(img, -1, 0)
    finest_first: List[tuple] = []
    for _ in range(depth):
        cur, lh, hl, hh = dwt2_level(cur)
        finest_first.append((lh, hl, hh))
    return SubbandPyramid(cur, tuple(reversed(finest_first)))


def _validate(pyr: SubbandPyramid) -> None:
    c, h, w = pyr.approx.shape
    for j, triple in enumerate(pyr.details):
        if len(triple) != 3:
            raise DimensionError(f"scale {j} has {len(triple)} detail planes, expected 3")
        expect = (c, h * 2 ** j, w * 2 ** j)
        for band, plane in zip(BANDS, triple):
            if plane.shape != expect:
                raise DimensionError(
                    f"{band}{j} has shape {plane.shape}, expected {expect}"
                )


def reconstruct(pyramid: SubbandPyramid, clamp: bool = False) -> np.ndarray:
    """Invert :func:`decompose`. ``clamp`` clips to the display range [0, 1]."""
    if pyramid.approx.ndim != 3:
        raise DimensionError(f"approx plane must be (C, h, w), got {pyramid.approx.shape}")
    _validate(pyramid)
    cur = pyramid.approx
    for lh, hl, hh in pyramid.details:
        cur = idwt2_level(cur, lh, hl, hh)
    img = np.moveaxis(cur, 0, -1)
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return np.ascontiguousarray(img)


def partial_reconstruct(pyramid: SubbandPyramid, k: int, clamp: bool = False) -> np.ndarray:
    """Full-resolution image from the approximation plus detail scales ``0..k-1``."""
    if not 0 <= k <= pyramid.depth:
        raise ValueError(f"k must lie in [0, {pyramid.depth}], got {k}")
    return reconstruct(pyramid.with_details_zeroed(k), clamp=clamp)


def plane_energies(pyramid: SubbandPyramid) -> Dict[str, float]:
    return {name: float(np.sum(p * p)) for name, p in pyramid.planes().items()}


def energy_profile(pyramid: SubbandPyramid) -> Dict[str, float]:
    """Fraction of total squared-coefficient energy held by each plane.

    An all-zero pyramid maps to all-zero fractions.
    """
    energies = plane_energies(pyramid)
    total = sum(energies.values())
    if total == 0.0:
        return {k: 0.0 for k in energies}
    return {k: v / total for k, v in energies.items()}


def psnr(reference, estimate, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise DimensionError(f"shape mismatch {ref.shape} vs {est.shape}")
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)

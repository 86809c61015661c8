"""Desk-scale image-set metrics: spectral Frechet distance and PSNR summaries."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import StatisticsError
from .wavelet import decompose, partial_reconstruct, psnr


def subband_features(images: Sequence[np.ndarray], depth: int) -> np.ndarray:
    """Per-image vector of mean squared coefficient per (plane, channel)."""
    rows = []
    for img in images:
        pyr = decompose(img, depth)
        feats = []
        for plane in pyr.planes().values():
            feats.extend(np.mean(plane * plane, axis=(1, 2)))
        rows.append(feats)
    return np.asarray(rows, dtype=np.float64)


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared Frechet distance between two Gaussians."""
    diff = mu1 - mu2
    covmean, _ = linalg.sqrtm(cov1 @ cov2, disp=False)
    covmean = np.real(covmean)
    d = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))
    return max(d, 0.0)


def spectral_frechet_distance(real: Sequence[np.ndarray], generated: Sequence[np.ndarray], depth: int) -> float:
    if len(real) < 2 or len(generated) < 2:
        raise StatisticsError("need at least two images on each side")
    a = subband_features(real, depth)
    b = subband_features(generated, depth)
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def coarse_image(image: np.ndarray, depth: int) -> np.ndarray:
    """Approximation-only reconstruction at full resolution."""
    return partial_reconstruct(decompose(image, depth), 0)


PSNR_CAP = 100.0


def mean_psnr(refs: Sequence[np.ndarray], ests: Sequence[np.ndarray]) -> float:
    """Mean PSNR over pairs, with identical pairs counted as ``PSNR_CAP`` dB."""
    vals = [min(psnr(r, e), PSNR_CAP) for r, e in zip(refs, ests)]
    return float(np.mean(vals))

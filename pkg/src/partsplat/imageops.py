"""Image-space helpers shared by the loss and metric code."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, ValidationError

_SSIM_SIGMA = 1.5
_SSIM_TRUNCATE = 3.5  # radius int(3.5 * 1.5 + 0.5) = 5 -> 11x11 window
_SSIM_PAD = 5


def ssim(image_a: np.ndarray, image_b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5) on
    images in [0, 1]; borders inside the window radius are cropped before
    averaging.  Multi-channel inputs average the per-channel scores."""
    a = np.asarray(image_a, dtype=float)
    b = np.asarray(image_b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValidationError(f"expected 2-D or 3-D images, got shape {a.shape}")
    if min(a.shape[0], a.shape[1]) <= 2 * _SSIM_PAD:
        raise ValidationError("image smaller than the SSIM window")

    c1 = k1 * k1
    c2 = k2 * k2

    def blur(im):
        # channel axis untouched
        return ndimage.gaussian_filter(im, (_SSIM_SIGMA, _SSIM_SIGMA, 0.0), truncate=_SSIM_TRUNCATE)

    ux, uy = blur(a), blur(b)
    uxx, uyy, uxy = blur(a * a), blur(b * b), blur(a * b)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    s_map = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    return float(s_map[_SSIM_PAD:-_SSIM_PAD, _SSIM_PAD:-_SSIM_PAD].mean())


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on a [0, 1] dynamic range; +inf for
    identical images."""
    a = np.asarray(image_a, dtype=float)
    b = np.asarray(image_b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))

"""Unsupervised saliency prior used to seed the historical map bank.

The estimator is the spectral-residual method: salient structure is what
remains of the log-amplitude spectrum after removing its local average.
Maps produced offline by any other estimator can be loaded with
:func:`load_external_saliency`.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .grid import gaussian_blur, load_grid, normalize_max

MIN_SIZE = 8
SALIENCY_SIGMA = 2.5


def to_gray(image) -> np.ndarray:
    """Collapse an ``(H, W, C)`` image by channel mean; 2-D input passes through."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def spectral_residual_saliency(image) -> np.ndarray:
    """Saliency map in [0, 1] with the same shape as ``image``."""
    img = to_gray(image)
    if img.ndim != 2 or min(img.shape) < MIN_SIZE:
        raise ParameterError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    span = float(img.max() - img.min())
    if span <= 1e-12 * max(1.0, float(np.abs(img).max())):
        return np.zeros(img.shape, dtype=np.float32)

    spectrum = np.fft.fft2(img - img.mean())
    spectrum[0, 0] = 0.0
    amplitude = np.abs(spectrum)
    phase = np.angle(spectrum)
    # floor relative to the spectrum so a constant offset cannot change it
    floor = 1e-9 * amplitude.max()
    log_amp = np.log(amplitude + floor)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=3, mode="wrap")
    recon = np.exp(residual + 1j * phase)
    recon[0, 0] = 0.0
    energy = np.abs(np.fft.ifft2(recon)) ** 2
    return normalize_max(gaussian_blur(energy, SALIENCY_SIGMA))


def load_external_saliency(path) -> np.ndarray:
    """Load a saliency map written elsewhere (``.c2dg`` or PGM), rescaled to [0, 1]."""
    return normalize_max(load_grid(path))

"""Synthetic Gabor filter banks for first-layer initialization.

The bank is a deterministic function of its config: for each (sigma,
frequency, angle) triple a complex Gabor kernel is evaluated on an integer
grid sized by the 3-sigma envelope, the real part is resized down to
``kernel_resize`` if larger, and the result is center-cropped to
``kernel_crop``. Filters are grayscale; the conv1 overlay repeats them
across input channels and rescales the whole tensor to match a reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GaborConfig:
    n_angles: int = 16
    sigmas: tuple[float, ...] = (2.0,)
    frequencies: tuple[float, ...] = (0.08, 0.16, 0.25, 0.32)
    kernel_resize: int = 10
    kernel_crop: int = 7

    def __post_init__(self):
        if self.n_angles < 1 or not self.sigmas or not self.frequencies:
            raise ValueError("bank needs at least one angle, sigma and frequency")
        if self.kernel_crop < 1 or self.kernel_resize < self.kernel_crop:
            raise ValueError("need kernel_resize >= kernel_crop >= 1")

    @property
    def n_filters(self) -> int:
        return len(self.sigmas) * len(self.frequencies) * self.n_angles


def gabor_kernel_raw(frequency, theta=0.0, sigma_x=1.0, sigma_y=1.0,
                     offset=0.0, n_stds=3.0) -> np.ndarray:
    """Complex Gabor kernel on an integer grid covering n_stds envelopes.

    Grid half-extent along each axis is the ceiling of the rotated n_stds
    bounding box (at least 1), so the array shape is odd and the kernel is
    centered. The value at the center is cos(offset) / (2*pi*sigma_x*sigma_y)
    for the real part.
    """
    ct, st = math.cos(theta), math.sin(theta)
    x0 = math.ceil(max(abs(n_stds * sigma_x * ct), abs(n_stds * sigma_y * st), 1.0))
    y0 = math.ceil(max(abs(n_stds * sigma_y * ct), abs(n_stds * sigma_x * st), 1.0))
    y, x = np.mgrid[-y0 : y0 + 1, -x0 : x0 + 1].astype(np.float64)
    rotx = x * ct + y * st
    roty = -x * st + y * ct
    g = np.exp(-0.5 * (rotx**2 / sigma_x**2 + roty**2 / sigma_y**2))
    g /= 2.0 * np.pi * sigma_x * sigma_y
    return g * np.exp(1j * (2.0 * np.pi * frequency * rotx + offset))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centered sampling, no anti-aliasing.

    Output pixel (r, c) samples input coordinate ((r + 0.5) * H/out_h - 0.5,
    ...), clamped to the valid range, so a symmetric image stays symmetric.
    """
    h, w = img.shape
    img = np.asarray(img, dtype=np.float64)

    def axis_weights(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    rlo, rhi, rf = axis_weights(h, out_h)
    clo, chi, cf = axis_weights(w, out_w)
    top = img[rlo][:, clo] * (1 - cf) + img[rlo][:, chi] * cf
    bot = img[rhi][:, clo] * (1 - cf) + img[rhi][:, chi] * cf
    return top * (1 - rf[:, None]) + bot * rf[:, None]


def center_crop(kernel: np.ndarray, size: int) -> np.ndarray:
    """Center crop with the smaller margin leading when the delta is odd."""
    delta = kernel.shape[0] - size
    if delta < 0:
        raise ValueError(f"cannot crop {kernel.shape[0]} up to {size}")
    if delta == 0:
        return kernel
    lead = delta // 2
    trail = delta - lead
    return kernel[lead:-trail, lead:-trail]


def gabor_bank(config: GaborConfig = GaborConfig()) -> np.ndarray:
    """(n_filters, crop, crop) float64 bank; deterministic, no RNG involved.

    Iteration order is sigmas, then frequencies, then angles, with
    theta_k = k / n_angles * pi.
    """
    filters = []
    for sigma in config.sigmas:
        for frequency in config.frequencies:
            for k in range(config.n_angles):
                theta = k / config.n_angles * np.pi
                kernel = np.real(
                    gabor_kernel_raw(frequency, theta=theta, sigma_x=sigma, sigma_y=sigma)
                )
                if kernel.shape[0] > config.kernel_resize:
                    kernel = resize_bilinear(kernel, config.kernel_resize, config.kernel_resize)
                elif kernel.shape[0] < config.kernel_crop:
                    raise ValueError(
                        f"gabor envelope {kernel.shape[0]} smaller than crop "
                        f"{config.kernel_crop}; raise sigma or lower kernel_crop"
                    )
                filters.append(center_crop(kernel, config.kernel_crop))
    return np.stack(filters)


def scale_to_match(bank: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Rescale the whole bank by one global factor so its std matches
    ``reference``'s std. Raises on a constant bank (nothing to scale)."""
    bank_std = float(np.std(bank))
    if bank_std == 0.0:
        raise ValueError("bank has zero variance; cannot scale-match")
    return bank * (float(np.std(reference)) / bank_std)

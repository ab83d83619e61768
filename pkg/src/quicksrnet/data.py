"""Synthetic RGB images for desk-scale experiments.

Each image is a smooth colour gradient overlaid with antialiased random
rectangles, discs, stripes and thin lines, plus a band of power-law
texture. Flat regions alone make nearest-neighbour close to L1-optimal, so
the texture is what gives a learned upscaler something to beat bicubic on.
"""

from __future__ import annotations

import numpy as np

SUPERSAMPLE = 4


def _coords(size: int):
    n = size * SUPERSAMPLE
    t = (np.arange(n) + 0.5) / n
    return np.meshgrid(t, t, indexing="ij")


def power_law_texture(rng: np.random.Generator, size: int, alpha: float = 2.5) -> np.ndarray:
    """Zero-mean, unit-variance (3, size, size) field with power spectrum ~ 1/f^alpha.

    Generated on a doubled canvas and cropped so the periodic FFT seams fall
    outside the image. Colour channels are partially correlated.
    """
    n = 2 * size
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.rfftfreq(n)[None, :]
    freq = np.hypot(fy, fx)
    freq[0, 0] = 1.0
    amp = freq ** (-alpha / 2)
    amp[0, 0] = 0.0
    shape = (3, n, n // 2 + 1)
    coeffs = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * amp
    field = np.fft.irfft2(coeffs, s=(n, n))[:, :size, :size]
    mix = rng.random((3, 3)) + 1.5 * np.eye(3)
    field = np.einsum("ij,jhw->ihw", mix, field)
    return (field - field.mean()) / field.std()


def synthetic_image(
    rng: np.random.Generator,
    size: int = 192,
    n_shapes: int = 6,
    texture: float = 0.15,
    alpha: float = 2.5,
) -> np.ndarray:
    """A (3, size, size) float32 image in [0, 1]."""
    yy, xx = _coords(size)
    c0, c1 = rng.random(3), rng.random(3)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp

    for _ in range(n_shapes):
        color = rng.random(3)[:, None, None]
        kind = rng.integers(0, 4)
        if kind == 0:
            y0, x0 = rng.uniform(0, 0.8, 2)
            h, w = rng.uniform(0.08, 0.4, 2)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == 1:
            cy, cx = rng.uniform(0.1, 0.9, 2)
            r = rng.uniform(0.04, 0.25)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        elif kind == 2:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(0.05, 0.2)
            phase = np.cos(theta) * xx + np.sin(theta) * yy
            band = rng.uniform(0.2, 0.6)
            cy, cx = rng.uniform(0.2, 0.8, 2)
            r = rng.uniform(0.15, 0.35)
            mask = (np.mod(phase / period, 1.0) < band) & (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
        else:
            theta = rng.uniform(0, np.pi)
            width = rng.uniform(0.005, 0.03)
            cy, cx = rng.uniform(0.1, 0.9, 2)
            dist = np.abs(-np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy))
            mask = dist < width
        img = np.where(mask[None], color, img)

    s = SUPERSAMPLE
    img = np.clip(img.reshape(3, size, s, size, s).mean(axis=(2, 4)), 0.0, 1.0)
    if texture:
        img = img + texture * power_law_texture(rng, size, alpha)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthetic_dataset(n: int, size: int = 192, seed: int = 0) -> list[np.ndarray]:
    return [synthetic_image(np.random.default_rng([seed, i]), size) for i in range(n)]

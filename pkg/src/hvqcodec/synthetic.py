"""Synthetic training corpus: periodic Gaussian random fields with tunable smoothness."""
from __future__ import annotations

import numpy as np


def gaussian_random_field(shape: tuple[int, int], corr_length: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance periodic field with a Gaussian covariance of width ``corr_length`` pixels."""
    h, w = shape
    noise = rng.standard_normal((h, w))
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    k2 = (ky ** 2 + kx ** 2) * (2 * np.pi) ** 2
    spectrum = np.exp(-0.25 * k2 * corr_length ** 2)
    out = np.fft.ifft2(np.fft.fft2(noise) * spectrum).real
    out -= out.mean()
    return out / out.std()


def land_mask(shape: tuple[int, int], rng: np.random.Generator, land_fraction: float = 0.25,
              corr_length: float = 24.0) -> np.ndarray:
    """Blobby uint8 mask (1 = valid) covering roughly ``1 - land_fraction`` of the grid."""
    blobs = gaussian_random_field(shape, corr_length, rng)
    cut = np.quantile(blobs, land_fraction)
    return (blobs >= cut).astype(np.uint8)


def make_corpus(count: int, shape: tuple[int, int] = (256, 256), corr_length: float = 12.0, seed: int = 0,
                mean: float = 15.0, std: float = 8.0, land_fraction: float = 0.0,
                fill_value: float = -9.96921e36) -> list[tuple[np.ndarray, np.ndarray]]:
    """``count`` (field, mask) pairs in physical units, float32, missing cells set to ``fill_value``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        f = (mean + std * gaussian_random_field(shape, corr_length, rng)).astype(np.float32)
        if land_fraction > 0:
            m = land_mask(shape, rng, land_fraction)
            f[m == 0] = np.float32(fill_value)
        else:
            m = np.ones(shape, dtype=np.uint8)
        out.append((f, m))
    return out

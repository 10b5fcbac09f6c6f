"""Synthetic low/normal-light pairs for smoke tests and toy training runs."""

from __future__ import annotations

import numpy as np

from .image_io import PairedSample


def make_scene(rng: np.random.Generator, height: int = 64, width: int = 64) -> np.ndarray:
    """Smooth colored background, a few hard-edged patches and mild texture."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.zeros((height, width, 3))
    for _ in range(4):
        cy, cx = rng.random(2)
        s = 0.15 + 0.3 * rng.random()
        img += rng.random(3) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s**2))[..., None]
    img = img / img.max()
    for _ in range(3):
        r0, c0 = rng.integers(0, height // 2), rng.integers(0, width // 2)
        r1, c1 = r0 + rng.integers(height // 6, height // 2), c0 + rng.integers(width // 6, width // 2)
        img[r0:r1, c0:c1] = 0.5 * img[r0:r1, c0:c1] + 0.5 * rng.random(3)
    freq = 4 + 8 * rng.random(2)
    img += 0.05 * (np.sin(2 * np.pi * freq[0] * xx) * np.sin(2 * np.pi * freq[1] * yy))[..., None]
    return np.clip(0.08 + 0.84 * img, 0.0, 1.0)


def darken(img: np.ndarray, rng: np.random.Generator, gain: float = 0.12, gamma: float = 1.3,
           noise_sigma: float = 0.0) -> np.ndarray:
    low = gain * np.power(img, gamma)
    if noise_sigma:
        low = low + rng.normal(0.0, noise_sigma, size=low.shape)
    return np.clip(low, 0.0, 1.0)


def toy_pairs(n: int, seed: int = 0, size: int = 64, noise_sigma: float = 0.0, **kwargs):
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n):
        high = make_scene(rng, size, size)
        pairs.append(PairedSample(darken(high, rng, noise_sigma=noise_sigma, **kwargs), high, f"toy{k:03d}"))
    return pairs

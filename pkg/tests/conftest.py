"""Shared synthetic-data helpers for the test suite."""

import numpy as np
import pytest
from scipy import ndimage

from srres.imaging import DegradationSpec, SamplePair, degrade


def smooth_image(seed: int, channels: int = 3, size: int = 32, blur: float = 2.0) -> np.ndarray:
    """Band-limited random image in [0, 1]."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.random((channels, size, size)), (0, blur, blur))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo + 1e-12)


def cartoon_image(seed: int, size: int = 64, levels: int = 3, smooth: float = 4.0,
                  edge_weight: float = 0.9) -> np.ndarray:
    """Piecewise-constant regions with smooth shading: sharp edges plus gradients."""
    rng = np.random.default_rng(seed)
    base = ndimage.gaussian_filter(rng.random((size, size)), smooth)
    base = (base - base.min()) / (base.max() - base.min() + 1e-12)
    regions = np.floor(base * levels) / levels
    shade = ndimage.gaussian_filter(rng.random((3, size, size)), (0, 3.0, 3.0))
    return np.clip(regions[None] * edge_weight + shade * (1.0 - edge_weight), 0.0, 1.0)


def smoke_pairs(n: int = 4, size: int = 64, scale: int = 2, sigma: float = 6 / 255,
                seed: int = 20) -> list:
    """Edge-rich synthetic training pairs under the forward observation model."""
    pairs = []
    for i in range(n):
        hr = cartoon_image(seed + i, size=size)
        lr = degrade(hr, DegradationSpec(scale=scale, noise_sigma=sigma, seed=100 + i))
        pairs.append(SamplePair(lr=lr, hr=hr))
    return pairs


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)

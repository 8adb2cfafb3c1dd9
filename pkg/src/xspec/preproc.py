"""Difference-of-Gaussians filtering and fixed-grid patch extraction."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

NORMALIZE_NONE = "none"
NORMALIZE_STANDARDIZE = "zero_mean_unit_var"


@dataclass(frozen=True)
class DoGConfig:
    sigma0: float = 1.0
    sigma1: float = 2.0
    radius: int = 6

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ValueError("DoG sigmas must be positive")
        if not self.sigma0 < self.sigma1:
            raise ValueError(f"need sigma0 < sigma1, got {self.sigma0} >= {self.sigma1}")
        if self.radius < math.ceil(3 * self.sigma1):
            raise ValueError(f"radius {self.radius} < ceil(3*sigma1) = {math.ceil(3 * self.sigma1)}")


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int = 40
    stride: int = 10

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch size and stride must be positive")

    def count(self, height, width):
        if self.patch_size > min(height, width):
            return 0
        return ((height - self.patch_size) // self.stride + 1) * ((width - self.patch_size) // self.stride + 1)

    def offsets(self, height, width):
        if self.patch_size > min(height, width):
            raise ValueError(f"{height}x{width} image is smaller than a {self.patch_size}-pixel patch")
        rows = range(0, height - self.patch_size + 1, self.stride)
        cols = range(0, width - self.patch_size + 1, self.stride)
        return [(r, c) for r in rows for c in cols]


def gaussian_kernel(sigma, radius, normalize=True):
    """Sampled 2-D Gaussian on integer offsets -radius..radius.

    With ``normalize`` the kernel is rescaled to sum to 1; otherwise entries
    carry the 1/sqrt(2*pi*sigma^2) prefactor.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if int(radius) != radius or radius < 1:
        raise ValueError("radius must be a positive integer")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    if normalize:
        return k / k.sum()
    return k / math.sqrt(2.0 * math.pi * sigma ** 2)


def _gaussian_1d(sigma, radius):
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def dog_kernel(cfg):
    return gaussian_kernel(cfg.sigma0, cfg.radius) - gaussian_kernel(cfg.sigma1, cfg.radius)


def _smooth(img, sigma, radius):
    # a unit-sum 2-D Gaussian is the outer product of two unit-sum 1-D ones
    g = _gaussian_1d(sigma, radius)
    out = ndimage.correlate1d(img, g, axis=0, mode="mirror")
    return ndimage.correlate1d(out, g, axis=1, mode="mirror")


def dog_filter(img, cfg=DoGConfig()):
    """Band-pass ``img`` with the difference of two unit-sum Gaussians.

    Borders use reflect padding (edge sample not repeated).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image has non-finite values")
    return _smooth(img, cfg.sigma0, cfg.radius) - _smooth(img, cfg.sigma1, cfg.radius)


def extract_patches(img, grid=PatchGrid()):
    """Row-major list of (row, col, patch) on the stride grid; copies, no resampling."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    p = grid.patch_size
    return [(r, c, img[r:r + p, c:c + p].copy()) for r, c in grid.offsets(h, w)]


def standardize(patch, eps=1e-12):
    """Per-channel zero mean / unit variance of an (H, W, C) patch."""
    mean = patch.mean(axis=(0, 1), keepdims=True)
    std = patch.std(axis=(0, 1), keepdims=True)
    return (patch - mean) / np.maximum(std, eps)


def preprocess_stack(channels, cfg=DoGConfig(), grid=PatchGrid(), normalize=NORMALIZE_NONE):
    """DoG-filter every channel, then cut co-located (row, col, P x P x C) patches."""
    if normalize not in (NORMALIZE_NONE, NORMALIZE_STANDARDIZE):
        raise ValueError(f"unknown normalization {normalize!r}")
    channels = [np.asarray(c, dtype=np.float64) for c in channels]
    if not channels:
        raise ValueError("no channels given")
    if len({c.shape for c in channels}) != 1:
        raise ValueError("channels must share one shape")
    stacked = np.stack([dog_filter(c, cfg) for c in channels], axis=-1)
    out = extract_patches(stacked, grid)
    if normalize == NORMALIZE_STANDARDIZE:
        out = [(r, c, standardize(p)) for r, c, p in out]
    return out

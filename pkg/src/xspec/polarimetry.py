"""Stokes parameters and degree of linear polarization from polarizer intensities."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

DIFFERENCE = "difference"
AS_WRITTEN = "as_written"
CONVENTIONS = (DIFFERENCE, AS_WRITTEN)


@dataclass
class IntensityMeasurements:
    """Polarizer-filtered intensity images (linear units, >= 0).

    ``i_right``/``i_left`` are the circular-analyzer channels; passive LWIR
    capture normally leaves them out.
    """

    i0: np.ndarray
    i90: np.ndarray
    i45: np.ndarray
    i_neg45: np.ndarray
    i_right: Optional[np.ndarray] = None
    i_left: Optional[np.ndarray] = None

    def channels(self):
        out = {"i0": self.i0, "i90": self.i90, "i45": self.i45, "i_neg45": self.i_neg45}
        if self.i_right is not None:
            out["i_right"] = self.i_right
        if self.i_left is not None:
            out["i_left"] = self.i_left
        return out


@dataclass
class StokesImage:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    dolp: np.ndarray

    def linear_stack(self):
        """(H, W, 3) stack of S0, S1, S2: the polarimetric network input."""
        return np.stack([self.s0, self.s1, self.s2], axis=-1)


def _validated(m):
    chans = {k: np.asarray(v, dtype=np.float64) for k, v in m.channels().items()}
    shapes = {v.shape for v in chans.values()}
    if len(shapes) != 1:
        raise ValueError(f"intensity channel shapes differ: {sorted(shapes)}")
    (shape,) = shapes
    if len(shape) != 2:
        raise ValueError(f"intensity channels must be 2-D, got shape {shape}")
    for name, v in chans.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"channel {name} has non-finite values")
        if np.any(v < 0):
            raise ValueError(f"channel {name} has negative intensities")
    if ("i_right" in chans) != ("i_left" in chans):
        raise ValueError("circular channels must be given as a pair")
    return chans


def stokes_from_intensities(m, convention=DIFFERENCE, epsilon=1e-12):
    """Stokes image (with DoLP) from intensity measurements.

    ``difference`` is the physical convention S2 = I45 - I-45, S3 = IR - IL.
    ``as_written`` uses sums for S2 and S3; it is kept only for comparison,
    since it reports DoLP > 0 for unpolarized light.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown Stokes convention {convention!r}")
    c = _validated(m)
    s0 = c["i0"] + c["i90"]
    s1 = c["i0"] - c["i90"]
    if convention == DIFFERENCE:
        s2 = c["i45"] - c["i_neg45"]
    else:
        s2 = c["i45"] + c["i_neg45"]
    if "i_right" in c:
        if convention == DIFFERENCE:
            s3 = c["i_right"] - c["i_left"]
        else:
            s3 = c["i_right"] + c["i_left"]
    else:
        s3 = np.zeros_like(s0)
    return StokesImage(s0, s1, s2, s3, dolp_from_components(s0, s1, s2, epsilon))


def dolp_from_components(s0, s1, s2, epsilon=1e-12):
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    s0 = np.asarray(s0, dtype=np.float64)
    if np.any(s0 < 0):
        raise ValueError("S0 must be nonnegative")
    return np.hypot(s1, s2) / np.maximum(s0, epsilon)


def dolp(s, epsilon=1e-12):
    return dolp_from_components(s.s0, s.s1, s.s2, epsilon)


def aop(s):
    """Angle of linear polarization in radians, in (-pi/2, pi/2]."""
    return 0.5 * np.arctan2(s.s2, s.s1)

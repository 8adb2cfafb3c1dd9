"""Synthetic paired visible / polarimetric datasets with known identities.

Each subject owns a three-channel latent texture: band-limited random fields
whose spectra (a few oriented frequency bumps) and contrasts are drawn per
subject. The visible image shows all three latent channels summed plus a
fine identity detail layer. The polarimetric capture maps the latent
channels through a fixed invertible 3x3 mix to (S0, S1, S2) and is stored as
the four linear-polarizer intensities. S0 is dominated by the first latent
channel, so the polarization channels add identity information that S0
alone lacks. Expressions warp the latent texture smoothly. Range blur is
applied to the thermal capture only (the visible camera is assumed to
resolve the face at every range); noise is added to both modalities. The
``identity`` map is a degenerate check: the visible image is S0 itself.
"""

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .io import write_pgm
from .polarimetry import IntensityMeasurements

RANGES = ("R1", "R2", "R3")
CONDITIONS = ("baseline", "expression")
CROSS_MODAL_MAPS = ("linear_mix", "nonlinear_warp", "identity")
VIS_CHANNEL = "vis"
POL_CHANNELS = ("i0", "i90", "i45", "i_neg45")

# rows: S0, S1, S2; columns: latent channels
_MIX = np.array([
    [1.0, 0.25, 0.25],
    [0.15, 1.0, -0.2],
    [0.15, 0.2, 1.0],
])


@dataclass
class SynthConfig:
    n_subjects: int = 60
    images_per_condition: tuple = (4, 12)  # (baseline, expression) per range
    image_size: int = 60
    ranges: tuple = RANGES
    blur_per_range: tuple = (0.0, 0.8, 1.6)
    noise_std: float = 0.01
    cross_modal_map: str = "linear_mix"
    seed: int = 0
    bumps_per_channel: int = 2
    freq_range: tuple = (0.07, 0.25)
    bump_width: float = 0.025
    contrast: float = 0.12
    detail: float = 0.02
    warp_px: float = 1.5
    pol_strength: float = 0.35

    def __post_init__(self):
        self.images_per_condition = tuple(int(v) for v in self.images_per_condition)
        self.ranges = tuple(self.ranges)
        self.blur_per_range = tuple(float(b) for b in self.blur_per_range)
        self.freq_range = tuple(float(f) for f in self.freq_range)
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if len(self.images_per_condition) != 2 or min(self.images_per_condition) < 0 \
                or sum(self.images_per_condition) == 0:
            raise ValueError("images_per_condition must be two nonnegative counts, not both zero")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        if not self.ranges or any(r not in RANGES for r in self.ranges) or len(set(self.ranges)) != len(self.ranges):
            raise ValueError(f"ranges must be distinct members of {RANGES}")
        if len(self.blur_per_range) != len(self.ranges):
            raise ValueError("blur_per_range needs one value per range")
        if any(b < 0 for b in self.blur_per_range):
            raise ValueError("blur must be nonnegative")
        if any(b2 <= b1 for b1, b2 in zip(self.blur_per_range, self.blur_per_range[1:])):
            raise ValueError("blur must strictly increase from range to range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.cross_modal_map not in CROSS_MODAL_MAPS:
            raise ValueError(f"cross_modal_map must be one of {CROSS_MODAL_MAPS}")
        if not 0 < self.freq_range[0] < self.freq_range[1] <= 0.5:
            raise ValueError("freq_range must satisfy 0 < lo < hi <= 0.5")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class SynthImage:
    subject_id: str
    modality: str  # "visible" or "polarimetric"
    range_id: str
    condition: str
    index: int
    channels: dict = field(repr=False)

    @property
    def image_id(self):
        return f"{self.subject_id}/{self.modality}/{self.range_id}/{self.condition}_{self.index:02d}"


@dataclass
class SynthDataset:
    config: SynthConfig
    images: list

    def subjects(self):
        return sorted({im.subject_id for im in self.images})


def subject_id(k):
    return f"S{k:03d}"


def _band_limited_field(rng, n, freqs, angles, width):
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    env = np.zeros((n, n))
    for f, a in zip(freqs, angles):
        cx, cy = f * np.cos(a), f * np.sin(a)
        env += np.exp(-((fx - cx) ** 2 + (fy - cy) ** 2) / (2 * width ** 2))
        env += np.exp(-((fx + cx) ** 2 + (fy + cy) ** 2) / (2 * width ** 2))
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    field_ = np.fft.ifft2(env * noise).real
    return field_ / field_.std()


def _subject_latent(cfg, k):
    rng = np.random.default_rng([cfg.seed, 1, k])
    n = cfg.image_size
    lat = np.empty((3, n, n))
    for c in range(3):
        freqs = rng.uniform(*cfg.freq_range, size=cfg.bumps_per_channel)
        angles = rng.uniform(0, np.pi, size=cfg.bumps_per_channel)
        amp = rng.uniform(0.5, 1.5)
        lat[c] = amp * _band_limited_field(rng, n, freqs, angles, cfg.bump_width)
    detail = _band_limited_field(rng, n, [0.35], [rng.uniform(0, np.pi)], 0.06)
    return lat, detail


def _smooth_warp(rng, n, amplitude):
    """Displacement field (2, n, n) of smooth low-frequency noise."""
    disp = ndimage.gaussian_filter(rng.standard_normal((2, n, n)), sigma=(0, n / 8, n / 8), mode="wrap")
    disp /= max(np.abs(disp).max(), 1e-12)
    return amplitude * disp


def _apply_warp(img, disp):
    n = img.shape[-1]
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    coords = [yy + disp[0], xx + disp[1]]
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="grid-wrap")
    return np.stack([ndimage.map_coordinates(c, coords, order=1, mode="grid-wrap") for c in img])


def _blur(img, sigma):
    if sigma <= 0:
        return img
    axes = (0, sigma, sigma) if img.ndim == 3 else sigma
    return ndimage.gaussian_filter(img, axes, mode="wrap")


def _stokes_from_latent(cfg, lat, vis):
    if cfg.cross_modal_map == "identity":
        s0 = vis
        s1 = cfg.pol_strength * cfg.contrast * lat[1]
        s2 = cfg.pol_strength * cfg.contrast * lat[2]
    else:
        m = np.tensordot(_MIX, lat, axes=1)
        if cfg.cross_modal_map == "nonlinear_warp":
            m = np.tanh(0.8 * m) / 0.8
        s0 = 0.5 + cfg.contrast * m[0]
        s1 = cfg.pol_strength * cfg.contrast * m[1]
        s2 = cfg.pol_strength * cfg.contrast * m[2]
        s0 = np.clip(s0, 0.02, 0.98)
    mag = np.hypot(s1, s2)
    cap = 0.95 * np.minimum(s0, 1.0 - s0)  # keeps DoLP < 1 and intensities in [0, 1]
    scale = np.where(mag > cap, cap / np.maximum(mag, 1e-12), 1.0)
    return s0, s1 * scale, s2 * scale


def intensities_from_stokes(s0, s1, s2):
    """Linear-polarizer intensities reproducing (S0, S1, S2) in the difference convention."""
    return IntensityMeasurements(i0=(s0 + s1) / 2, i90=(s0 - s1) / 2, i45=(s0 + s2) / 2, i_neg45=(s0 - s2) / 2)


def _render_subject(cfg, k):
    lat0, detail = _subject_latent(cfg, k)
    sid = subject_id(k)
    n = cfg.image_size
    out = []
    n_base, n_expr = cfg.images_per_condition
    rng = np.random.default_rng([cfg.seed, 2, k])
    for r_idx, rid in enumerate(cfg.ranges):
        for cond, count in zip(CONDITIONS, (n_base, n_expr)):
            for idx in range(count):
                if cond == "expression":
                    disp = _smooth_warp(rng, n, cfg.warp_px)
                    lat = _apply_warp(lat0, disp)
                    det = _apply_warp(detail, disp)
                else:
                    lat, det = lat0, detail
                vis = 0.5 + cfg.contrast * lat.sum(axis=0) / np.sqrt(3) + cfg.detail * det
                vis = np.clip(vis, 0.0, 1.0)
                s0, s1, s2 = _stokes_from_latent(cfg, lat, vis)
                # range blur degrades the low-resolution thermal capture only
                sigma = cfg.blur_per_range[r_idx]
                s0, s1, s2 = (_blur(c, sigma) for c in (s0, s1, s2))
                if cfg.cross_modal_map == "identity":
                    vis = s0  # degenerate map: one shared capture
                meas = intensities_from_stokes(s0, s1, s2)
                if cfg.noise_std > 0:
                    vis = vis + cfg.noise_std * rng.standard_normal(vis.shape)
                pol_ch = {}
                for name in POL_CHANNELS:
                    ch = getattr(meas, name)
                    if cfg.noise_std > 0:
                        ch = ch + cfg.noise_std / 2 * rng.standard_normal(ch.shape)
                    pol_ch[name] = np.clip(ch, 0.0, 1.0)
                out.append(SynthImage(sid, "visible", rid, cond, idx, {VIS_CHANNEL: np.clip(vis, 0.0, 1.0)}))
                out.append(SynthImage(sid, "polarimetric", rid, cond, idx, pol_ch))
    return out


def generate_dataset(cfg):
    """Render every subject; deterministic in ``cfg``."""
    images = []
    for k in range(cfg.n_subjects):
        images.extend(_render_subject(cfg, k))
    return SynthDataset(cfg, images)


def write_dataset(ds, root):
    """PGM files under <root>/<subject>/<modality>/<range>/ plus manifest.csv."""
    rows = []
    for im in ds.images:
        d = os.path.join(root, im.subject_id, im.modality, im.range_id)
        os.makedirs(d, exist_ok=True)
        for ch, arr in im.channels.items():
            stem = f"{im.condition}_{im.index:02d}" if ch == VIS_CHANNEL else f"{im.condition}_{im.index:02d}_{ch}"
            rel = os.path.join(im.subject_id, im.modality, im.range_id, stem + ".pgm")
            write_pgm(os.path.join(root, rel), arr)
            rows.append([im.subject_id, im.modality, im.range_id, im.condition, rel, im.image_id, ch])
    with open(os.path.join(root, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "modality", "range", "condition", "path", "image_id", "channel"])
        w.writerows(rows)
    return os.path.join(root, "manifest.csv")


def generate_polarized_intensities(dolp_target, aop, s0, shape):
    """Intensities whose Stokes image has total intensity ``s0``, the given DoLP and angle."""
    if not 0.0 <= dolp_target <= 1.0:
        raise ValueError("dolp_target must lie in [0, 1]")
    if not s0 > 0:
        raise ValueError("s0 must be positive")
    s0_img = np.full(shape, float(s0))
    s1 = s0_img * dolp_target * np.cos(2 * aop)
    s2 = s0_img * dolp_target * np.sin(2 * aop)
    return intensities_from_stokes(s0_img, s1, s2)

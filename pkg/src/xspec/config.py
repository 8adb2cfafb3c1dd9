"""Flat run configuration shared by every CLI command.

A run configuration is one JSON object of key -> value. Keys not listed in
``DEFAULTS`` are rejected. Files are merged over the defaults, then command
line flags over the file; the merged result is echoed next to every output.
"""

import json
import os

from . import polarimetry, preproc
from .dataset import INPUT_MODES, PreprocessConfig
from .evaluation import AGG_MEAN, AGG_PATCH_VOTE
from .net import GLOBAL_AVG, GLOBAL_MAX, PRNG_ID
from .synth import CROSS_MODAL_MAPS, RANGES, SynthConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid, unknown or inconsistent configuration values."""


DEFAULTS = {
    # synth
    "n_subjects": 60,
    "images_baseline": 4,
    "images_expression": 12,
    "image_size": 60,
    "ranges": list(RANGES),
    "blur_per_range": [0.0, 0.8, 1.6],
    "noise_std": 0.01,
    "cross_modal_map": "linear_mix",
    "synth_seed": 0,
    "bumps_per_channel": 2,
    "freq_range": [0.07, 0.25],
    "bump_width": 0.025,
    "contrast": 0.12,
    "detail": 0.02,
    "warp_px": 1.5,
    "pol_strength": 0.35,
    # preprocess
    "sigma0": 1.0,
    "sigma1": 2.0,
    "dog_radius": 6,
    "patch": 40,
    "stride": 10,
    "convention": polarimetry.DIFFERENCE,
    "normalize": preproc.NORMALIZE_NONE,
    "tensor_precision": "f64",
    # network
    "blocks": [[16, 16], [32, 32], [64]],
    "global_pool": GLOBAL_AVG,
    "init_seed": 0,
    "pol_from_vis": True,
    "checkpoint_precision": "f64",
    # training
    "input": "polarimetric",
    "margin": 1.0,
    "distance_epsilon": 1e-12,
    "lr": 0.01,
    "momentum": 0.9,
    "epochs": 10,
    "batch": 64,
    "seed": 0,
    "ratio": 1.0,
    "same_range": False,
    "resample_per_epoch": False,
    "max_pairs_per_epoch": 0,
    "freeze_except_last": None,
    # evaluation
    "trials": 100,
    "train_subjects": 25,
    "eval_seed": 0,
    "finetune_epochs": 5,
    "aggregation": AGG_MEAN,
}

_CHOICES = {
    "cross_modal_map": CROSS_MODAL_MAPS,
    "convention": (polarimetry.DIFFERENCE, polarimetry.AS_WRITTEN),
    "normalize": (preproc.NORMALIZE_NONE, preproc.NORMALIZE_STANDARDIZE),
    "tensor_precision": ("f32", "f64"),
    "checkpoint_precision": ("f32", "f64"),
    "global_pool": (GLOBAL_AVG, GLOBAL_MAX),
    "input": INPUT_MODES,
    "aggregation": (AGG_MEAN, AGG_PATCH_VOTE),
}

_POSITIVE_INT = ("n_subjects", "image_size", "bumps_per_channel", "dog_radius", "patch", "stride", "batch", "trials")
_NONNEG_INT = ("images_baseline", "images_expression", "epochs", "max_pairs_per_epoch", "finetune_epochs",
               "train_subjects")
_SEEDS = ("synth_seed", "init_seed", "seed", "eval_seed")


def _check_type(key, value):
    default = DEFAULTS[key]
    if key == "freeze_except_last":
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = isinstance(value, list)
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__ if default is not None else 'int or null'}, "
                          f"got {value!r}")


def validate(cfg):
    """Raise ConfigError unless ``cfg`` is a complete, valid configuration."""
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in cfg.items():
        _check_type(key, value)
    for key, allowed in _CHOICES.items():
        if cfg[key] not in allowed:
            raise ConfigError(f"{key}: must be one of {list(allowed)}, got {cfg[key]!r}")
    for key in _POSITIVE_INT:
        if cfg[key] < 1:
            raise ConfigError(f"{key}: must be a positive integer, got {cfg[key]}")
    for key in _NONNEG_INT:
        if cfg[key] < 0:
            raise ConfigError(f"{key}: must be nonnegative, got {cfg[key]}")
    for key in _SEEDS:
        if not 0 <= cfg[key] < 2 ** 64:
            raise ConfigError(f"{key}: must be a 64-bit unsigned integer")
    if cfg["train_subjects"] < 1:
        raise ConfigError("train_subjects: each trial needs at least one training subject")
    if cfg["freeze_except_last"] is not None and cfg["freeze_except_last"] < 0:
        raise ConfigError("freeze_except_last: must be nonnegative or null")
    blocks = cfg["blocks"]
    if not blocks or not all(isinstance(b, list) and b and all(isinstance(w, int) and w > 0 for w in b)
                             for b in blocks):
        raise ConfigError("blocks: expected a nonempty list of nonempty lists of positive widths")
    if not cfg["margin"] > 0 or not cfg["distance_epsilon"] > 0 or not cfg["ratio"] > 0:
        raise ConfigError("margin, distance_epsilon and ratio must be positive")
    if cfg["lr"] < 0 or not 0 <= cfg["momentum"] < 1:
        raise ConfigError("lr must be nonnegative and momentum in [0, 1)")
    # delegate the remaining domain checks to the component configs
    for build in (synth_config, preprocess_config, train_config):
        try:
            build(cfg)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def load(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    cfg = dict(DEFAULTS)
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path}: config file not found")
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        doc = doc.get("config", doc) if set(doc) <= {"config", "prng", "command", "backend"} else doc
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return validate(cfg)


def synth_config(cfg):
    return SynthConfig(
        n_subjects=cfg["n_subjects"],
        images_per_condition=(cfg["images_baseline"], cfg["images_expression"]),
        image_size=cfg["image_size"], ranges=tuple(cfg["ranges"]), blur_per_range=tuple(cfg["blur_per_range"]),
        noise_std=cfg["noise_std"], cross_modal_map=cfg["cross_modal_map"], seed=cfg["synth_seed"],
        bumps_per_channel=cfg["bumps_per_channel"], freq_range=tuple(cfg["freq_range"]),
        bump_width=cfg["bump_width"], contrast=cfg["contrast"], detail=cfg["detail"], warp_px=cfg["warp_px"],
        pol_strength=cfg["pol_strength"])


def preprocess_config(cfg):
    return PreprocessConfig(
        dog=preproc.DoGConfig(cfg["sigma0"], cfg["sigma1"], cfg["dog_radius"]),
        grid=preproc.PatchGrid(cfg["patch"], cfg["stride"]),
        normalize=cfg["normalize"], convention=cfg["convention"])


def train_config(cfg, epochs=None):
    return TrainConfig(
        epochs=cfg["epochs"] if epochs is None else epochs, batch_size=cfg["batch"], lr=cfg["lr"],
        momentum=cfg["momentum"], margin=cfg["margin"], distance_epsilon=cfg["distance_epsilon"],
        seed=cfg["seed"], ratio=cfg["ratio"], same_range=cfg["same_range"],
        resample_per_epoch=cfg["resample_per_epoch"], max_pairs_per_epoch=cfg["max_pairs_per_epoch"])


def blocks(cfg):
    return tuple(tuple(b) for b in cfg["blocks"])


def resolved_document(cfg, command, backend):
    """The echoed configuration: every key plus the PRNG algorithm per seed."""
    return {
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "prng": {"algorithm": PRNG_ID, "seeds": {k: cfg[k] for k in _SEEDS}},
        "backend": backend,
    }


def write_resolved(path, cfg, command, backend):
    with open(path, "w") as fh:
        json.dump(resolved_document(cfg, command, backend), fh, indent=2, sort_keys=True)
        fh.write("\n")

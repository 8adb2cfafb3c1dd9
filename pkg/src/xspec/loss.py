"""Contrastive coupling loss between visible and polarimetric embeddings.

Label convention: y = 0 for a genuine pair (same subject), y = 1 for an
impostor pair.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 1.0
    distance_epsilon: float = 1e-12

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if not self.distance_epsilon > 0:
            raise ValueError("distance_epsilon must be positive")


def _pair(z1, z2):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ValueError(f"embedding shapes differ: {z1.shape} vs {z2.shape}")
    return z1, z2


def _label(y):
    if y not in (0, 1):
        raise ValueError(f"y_cont must be 0 or 1, got {y!r}")
    return int(y)


def pair_distance(z1, z2):
    z1, z2 = _pair(z1, z2)
    return float(np.sqrt(np.sum((z1 - z2) ** 2)))


def contrastive_loss(z1, z2, y_cont, cfg=ContrastiveConfig()):
    d = pair_distance(z1, z2)
    if _label(y_cont) == 0:
        return 0.5 * d * d
    return 0.5 * max(0.0, cfg.margin - d) ** 2


def contrastive_grad(z1, z2, y_cont, cfg=ContrastiveConfig()):
    """(d loss / d z1, d loss / d z2).

    At D = 0 the impostor hinge is singular; the zero subgradient is used
    whenever D < ``cfg.distance_epsilon``.
    """
    z1, z2 = _pair(z1, z2)
    diff = z1 - z2
    if _label(y_cont) == 0:
        return diff.copy(), -diff
    d = float(np.sqrt(np.sum(diff ** 2)))
    if d >= cfg.margin or d < cfg.distance_epsilon:
        return np.zeros_like(diff), np.zeros_like(diff)
    g = -(cfg.margin - d) / d * diff
    return g, -g


def batch_loss(pairs, cfg=ContrastiveConfig()):
    """Mean contrastive loss over an iterable of (z1, z2, y_cont)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty batch")
    return float(np.mean([contrastive_loss(a, b, y, cfg) for a, b, y in pairs]))


def batch_terms(z1, z2, y, cfg=ContrastiveConfig()):
    """Vectorized per-pair terms for (B, D) embedding batches.

    Returns (losses, distances, grad_z1, grad_z2) where the gradients are of
    the *mean* loss over the batch.
    """
    z1, z2 = _pair(z1, z2)
    y = np.asarray(y)
    if z1.ndim != 2 or y.shape != (z1.shape[0],):
        raise ValueError("expected (B, D) embeddings and B labels")
    if z1.shape[0] == 0:
        raise ValueError("empty batch")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    diff = z1 - z2
    d = np.sqrt(np.sum(diff * diff, axis=1))
    imp = y == 1
    hinge = np.maximum(cfg.margin - d, 0.0)
    losses = np.where(imp, 0.5 * hinge * hinge, 0.5 * d * d)
    active = imp & (d < cfg.margin) & (d >= cfg.distance_epsilon)
    scale = np.where(imp, 0.0, 1.0)
    safe_d = np.where(active, d, 1.0)
    scale = np.where(active, -(cfg.margin - d) / safe_d, scale)
    g1 = scale[:, None] * diff / z1.shape[0]
    return losses, d, g1, -g1

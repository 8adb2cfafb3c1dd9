"""Contrastive training of the coupled towers.

Frozen leading layers never change during a stage, so their output is
computed once per stage and reused by every step ("prefix caching"). Within
a minibatch each distinct patch is embedded once, however many pairs use it.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .loss import ContrastiveConfig, batch_terms
from .net import forward_nchw, backward, sgd_step
from .pairgen import GENUINE, IMPOSTOR, VISIBLE, POLARIMETRIC, generate_pair_indices

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    margin: float = 1.0
    distance_epsilon: float = 1e-12
    seed: int = 0
    ratio: float = 1.0
    same_range: bool = False
    resample_per_epoch: bool = False
    max_pairs_per_epoch: int = 0  # 0: use every generated pair

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochStats:
    stage: str
    epoch: int
    mean_loss: float
    genuine_distance: float
    impostor_distance: float
    n_pairs: int


def _nchw(patches):
    return np.ascontiguousarray(np.asarray(patches, dtype=np.float64).transpose(0, 3, 1, 2))


def _prefix(net, x, chunk=256):
    """Outputs of the frozen leading layers for every patch."""
    start = net.first_trainable()
    if start == 0:
        return x, 0
    outs = [forward_nchw(net, x[i:i + chunk], 0, start)[0] for i in range(0, len(x), chunk)]
    return np.concatenate(outs), start


def embed_patches(net, patches, chunk=256):
    """(N, D) embeddings for an (N, H, W, C) patch array."""
    x = _nchw(patches)
    if len(x) == 0:
        return np.zeros((0, net.embedding_dim))
    return np.concatenate([forward_nchw(net, x[i:i + chunk])[0] for i in range(0, len(x), chunk)])


class PairSource:
    """Pairs over fixed visible/polarimetric patch arrays, optionally regenerated per epoch."""

    def __init__(self, vis_subjects, vis_keys, pol_subjects, pol_keys, ratio=1.0):
        self.args = (vis_subjects, vis_keys, pol_subjects, pol_keys)
        self.ratio = ratio
        self._fixed = None

    def pairs(self, seed, epoch, resample):
        if resample:
            return generate_pair_indices(*self.args, seed=[seed, epoch], ratio=self.ratio)
        if self._fixed is None:
            self._fixed = generate_pair_indices(*self.args, seed=seed, ratio=self.ratio)
        return self._fixed


def train_coupled(model, vis_patches, pol_patches, pair_source, cfg, stage="train", callback=None):
    """Train ``model`` in place on pairs indexing the two patch arrays."""
    closs = ContrastiveConfig(cfg.margin, cfg.distance_epsilon)
    model.velocity = {}
    feats_v, start_v = _prefix(model.vis_net, _nchw(vis_patches))
    feats_p, start_p = _prefix(model.pol_net, _nchw(pol_patches))
    stats = []
    for epoch in range(1, cfg.epochs + 1):
        vi, pj, y = pair_source.pairs(cfg.seed, epoch, cfg.resample_per_epoch)
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(y))
        if cfg.max_pairs_per_epoch:
            order = order[:cfg.max_pairs_per_epoch]
        loss_sum = gen_sum = imp_sum = 0.0
        n_gen = n_imp = 0
        for b0 in range(0, len(order), cfg.batch_size):
            sel = order[b0:b0 + cfg.batch_size]
            bv, bp, by = vi[sel], pj[sel], y[sel]
            uv, inv_v = np.unique(bv, return_inverse=True)
            up, inv_p = np.unique(bp, return_inverse=True)
            zv, cache_v = forward_nchw(model.vis_net, feats_v[uv], start_v, keep_cache=True)
            zp, cache_p = forward_nchw(model.pol_net, feats_p[up], start_p, keep_cache=True)
            losses, dist, g1, g2 = batch_terms(zv[inv_v], zp[inv_p], by, closs)
            loss_sum += losses.sum()
            gen_sum += dist[by == GENUINE].sum()
            imp_sum += dist[by == IMPOSTOR].sum()
            n_gen += int(np.sum(by == GENUINE))
            n_imp += int(np.sum(by == IMPOSTOR))
            gzv = np.zeros_like(zv)
            gzp = np.zeros_like(zp)
            np.add.at(gzv, inv_v, g1)
            np.add.at(gzp, inv_p, g2)
            grads_v, _ = backward(model.vis_net, cache_v, gzv)
            grads_p, _ = backward(model.pol_net, cache_p, gzp)
            sgd_step(model, {"vis": grads_v, "pol": grads_p}, cfg.lr, cfg.momentum)
        n = n_gen + n_imp
        st = EpochStats(stage, epoch, float(loss_sum / max(n, 1)), float(gen_sum / max(n_gen, 1)),
                        float(imp_sum / max(n_imp, 1)), n)
        stats.append(st)
        log.info("%s epoch %d: loss %.6f genuine %.4f impostor %.4f", stage, epoch, st.mean_loss,
                 st.genuine_distance, st.impostor_distance)
        if callback is not None:
            callback(st)
    return stats


def pair_source_for(dataset, subject_ids, same_range=False, ratio=1.0):
    """Patch arrays and a PairSource over the given subjects of a PatchDataset."""
    vis_imgs = dataset.select(subject_ids, VISIBLE)
    pol_imgs = dataset.select(subject_ids, POLARIMETRIC)
    pv, sv, posv, rv, _ = dataset.stack(vis_imgs)
    pp, sp, posp, rp, _ = dataset.stack(pol_imgs)
    if same_range:
        kv, kp = list(zip(posv, rv)), list(zip(posp, rp))
    else:
        kv, kp = posv, posp
    return pv, pp, PairSource(sv, kv, sp, kp, ratio)


def train_on_dataset(model, dataset, subject_ids, cfg, stage="train", freeze_except_last=None, callback=None):
    """One training stage on the subjects' patches; returns per-epoch stats."""
    if freeze_except_last is not None:
        model.vis_net.freeze_except_last(freeze_except_last)
        model.pol_net.freeze_except_last(freeze_except_last)
    pv, pp, src = pair_source_for(dataset, subject_ids, cfg.same_range, cfg.ratio)
    return train_coupled(model, pv, pp, src, cfg, stage, callback)

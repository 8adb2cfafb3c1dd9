"""Genuine / impostor cross-modal patch pairs and subject splits."""

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

VISIBLE = "visible"
POLARIMETRIC = "polarimetric"
THERMAL_S0 = "thermal_s0"
PROBE_MODALITIES = (POLARIMETRIC, THERMAL_S0)
GENUINE, IMPOSTOR = 0, 1


@dataclass
class PatchRecord:
    subject_id: Any
    modality: str
    condition: str
    range_id: str
    grid_pos: tuple
    patch: Optional[np.ndarray] = None
    image_id: str = ""


@dataclass
class PatchPair:
    vis: PatchRecord
    pol: PatchRecord
    y_cont: int


def _order_key(s):
    return (str(type(s).__name__), str(s))


def generate_pair_indices(vis_subjects, vis_keys, pol_subjects, pol_keys, seed, ratio=1.0):
    """Index-level pair generation.

    ``*_keys`` are hashable co-location keys (grid position, optionally with
    range); pairs only form between equal keys. Returns int arrays
    (vis_index, pol_index, y_cont) in a seeded shuffled order. Every genuine
    pair is kept; impostors are drawn uniformly without replacement until
    there are round(ratio * n_genuine) of them.
    """
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    subjects = set(vis_subjects) | set(pol_subjects)
    if len(subjects) < 2:
        raise ValueError("need at least 2 subjects to form impostor pairs")

    groups = defaultdict(lambda: (defaultdict(list), defaultdict(list)))
    for i, (s, k) in enumerate(zip(vis_subjects, vis_keys)):
        groups[k][0][s].append(i)
    for j, (s, k) in enumerate(zip(pol_subjects, pol_keys)):
        groups[k][1][s].append(j)

    gen_v, gen_p = [], []
    blocks = []  # per group: impostor enumeration tables
    for key in sorted(groups, key=_order_key):
        vmap, pmap = groups[key]
        subs = sorted(set(vmap) | set(pmap), key=_order_key)
        for s in subs:
            for i in vmap.get(s, ()):
                for j in pmap.get(s, ()):
                    gen_v.append(i)
                    gen_p.append(j)
        pol_sorted, bounds, pos = [], {}, 0
        for s in subs:
            js = pmap.get(s, [])
            pol_sorted.extend(js)
            bounds[s] = (pos, pos + len(js))
            pos += len(js)
        vis_rows, counts, excl = [], [], []
        for s in subs:
            a, b = bounds[s]
            for i in vmap.get(s, ()):
                vis_rows.append(i)
                counts.append(pos - (b - a))
                excl.append((a, b))
        if vis_rows:
            blocks.append((np.array(vis_rows), np.cumsum([0] + counts), np.array(excl).reshape(-1, 2),
                           np.array(pol_sorted, dtype=np.int64)))
    n_gen = len(gen_v)
    if n_gen == 0:
        raise ValueError("no co-located cross-modal patches of the same subject")

    n_imp = int(round(ratio * n_gen))
    sizes = np.array([blk[1][-1] for blk in blocks], dtype=np.int64)
    pool = int(sizes.sum())
    if n_imp > pool:
        raise ValueError(f"impostor pool has {pool} pairs, {n_imp} requested")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(pool, size=n_imp, replace=False)) if n_imp else np.zeros(0, np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    imp_v = np.empty(n_imp, dtype=np.int64)
    imp_p = np.empty(n_imp, dtype=np.int64)
    for b, (vis_rows, cum, excl, pol_sorted) in enumerate(blocks):
        lo, hi = np.searchsorted(picks, [starts[b], starts[b + 1]])
        if lo == hi:
            continue
        q = picks[lo:hi] - starts[b]
        row = np.searchsorted(cum, q, side="right") - 1
        jj = q - cum[row]
        a, bnd = excl[row, 0], excl[row, 1]
        jj = np.where(jj < a, jj, jj + (bnd - a))
        imp_v[lo:hi] = vis_rows[row]
        imp_p[lo:hi] = pol_sorted[jj]

    vi = np.concatenate([np.array(gen_v, dtype=np.int64), imp_v])
    pj = np.concatenate([np.array(gen_p, dtype=np.int64), imp_p])
    y = np.concatenate([np.full(n_gen, GENUINE), np.full(n_imp, IMPOSTOR)]).astype(np.int64)
    order = rng.permutation(len(y))
    return vi[order], pj[order], y[order]


def _key(rec, same_range):
    return (tuple(rec.grid_pos), rec.range_id) if same_range else tuple(rec.grid_pos)


def generate_pairs(records, seed, ratio=1.0, same_range=False):
    """Balanced genuine/impostor PatchPairs from a mixed-modality record list.

    ``same_range`` restricts pairs to patches captured at the same range.
    """
    vis = [r for r in records if r.modality == VISIBLE]
    pol = [r for r in records if r.modality in PROBE_MODALITIES]
    if not vis or not pol:
        raise ValueError("records must contain visible and polarimetric patches")
    vi, pj, y = generate_pair_indices(
        [r.subject_id for r in vis], [_key(r, same_range) for r in vis],
        [r.subject_id for r in pol], [_key(r, same_range) for r in pol],
        seed, ratio)
    return [PatchPair(vis[i], pol[j], int(t)) for i, j, t in zip(vi, pj, y)]


def split_subjects(subject_ids, n_train, seed):
    """Seeded disjoint (train, test) partition of the distinct subject ids."""
    ids = sorted(set(subject_ids), key=_order_key)
    if not 0 <= n_train < len(ids):
        raise ValueError(f"n_train must lie in [0, {len(ids)}), got {n_train}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    train = sorted((ids[k] for k in perm[:n_train]), key=_order_key)
    test = sorted((ids[k] for k in perm[n_train:]), key=_order_key)
    return train, test


def write_pairs_csv(pairs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vis_path", "pol_path", "row", "col", "y_cont"])
        for p in pairs:
            w.writerow([p.vis.image_id, p.pol.image_id, p.vis.grid_pos[0], p.vis.grid_pos[1], p.y_cont])


def read_pairs_csv(path):
    with open(path, newline="") as fh:
        return [(r["vis_path"], r["pol_path"], int(r["row"]), int(r["col"]), int(r["y_cont"]))
                for r in csv.DictReader(fh)]

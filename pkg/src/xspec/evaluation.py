"""Gallery/probe identification, CMC curves and the repeated-split protocol."""

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .pairgen import POLARIMETRIC, VISIBLE, split_subjects
from .train import embed_patches

log = logging.getLogger(__name__)

AGG_MEAN = "mean"
AGG_PATCH_VOTE = "patch_vote"

# Strata reported alongside the overall rate: (label, range, condition)
STRATA = (
    ("Overall", None, None),
    ("Expressions", "R1", "expression"),
    ("Range 1 Baseline", "R1", "baseline"),
    ("Range 2 Baseline", "R2", "baseline"),
    ("Range 3 Baseline", "R3", "baseline"),
)


@dataclass
class EmbeddingRecord:
    subject_id: Any
    modality: str
    image_id: str
    embedding: np.ndarray
    range_id: str = ""
    condition: str = ""
    patch_embeddings: Any = field(default=None, repr=False)
    positions: Any = field(default=None, repr=False)


@dataclass
class CmcCurve:
    """rates[k - 1] is the rank-k identification rate, k = 1..gallery_size."""

    rates: np.ndarray
    gallery_size: int

    def rank(self, k):
        return float(self.rates[k - 1])

    @property
    def rank1(self):
        return float(self.rates[0])


def _order_key(s):
    return (str(type(s).__name__), str(s))


def image_embedding(patch_embeddings):
    arr = np.asarray(patch_embeddings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a nonempty list of equal-length patch embeddings")
    return arr.mean(axis=0)


def _gallery_arrays(gallery):
    if not gallery:
        raise ValueError("empty gallery")
    subjects = [g.subject_id for g in gallery]
    if len(set(subjects)) != len(subjects):
        raise ValueError("gallery subjects must be unique")
    order = sorted(range(len(gallery)), key=lambda i: _order_key(subjects[i]))
    emb = np.stack([np.asarray(gallery[i].embedding, dtype=np.float64) for i in order])
    return [subjects[i] for i in order], emb


def _distances(probe_emb, gallery_emb):
    if probe_emb.shape[-1] != gallery_emb.shape[-1]:
        raise ValueError("probe and gallery embedding dimensions differ")
    diff = probe_emb[..., None, :] - gallery_emb
    return np.sqrt(np.sum(diff * diff, axis=-1))


def identify(probe, gallery):
    """Gallery subjects by ascending distance to the probe (ties: subject id)."""
    subjects, emb = _gallery_arrays(gallery)
    d = _distances(np.asarray(probe.embedding, dtype=np.float64), emb)
    # subjects are already in tie-break order, so a stable sort suffices
    return [subjects[i] for i in np.argsort(d, kind="stable")]


def _vote_scores(probe, subjects, gallery_by_subject):
    """Per-subject vote counts from per-patch nearest neighbours at matching positions."""
    votes = np.zeros(len(subjects))
    for pos, pe in zip(probe.positions, probe.patch_embeddings):
        cand = np.stack([gallery_by_subject[s][pos] for s in subjects])
        votes[int(np.argmin(_distances(pe, cand)))] += 1
    return votes


def true_ranks(probes, gallery, aggregation=AGG_MEAN):
    """1-based rank of each probe's own subject in its gallery ordering."""
    subjects, emb = _gallery_arrays(gallery)
    index = {s: i for i, s in enumerate(subjects)}
    for p in probes:
        if p.subject_id not in index:
            raise ValueError(f"probe subject {p.subject_id!r} is not in the gallery")
    if not probes:
        return np.zeros(0, dtype=int)
    pe = np.stack([np.asarray(p.embedding, dtype=np.float64) for p in probes])
    d = _distances(pe, emb)
    truth = np.array([index[p.subject_id] for p in probes])
    if aggregation == AGG_MEAN:
        dt = d[np.arange(len(probes)), truth][:, None]
        cols = np.arange(len(subjects))[None, :]
        better = (d < dt) | ((d == dt) & (cols < truth[:, None]))
        return better.sum(axis=1) + 1
    if aggregation == AGG_PATCH_VOTE:
        gal = {g.subject_id: dict(zip(map(tuple, g.positions), g.patch_embeddings)) for g in gallery}
        ranks = []
        for k, p in enumerate(probes):
            votes = _vote_scores(p, subjects, gal)
            order = np.lexsort((np.arange(len(subjects)), d[k], -votes))
            ranks.append(int(np.nonzero(order == truth[k])[0][0]) + 1)
        return np.array(ranks)
    raise ValueError(f"unknown aggregation {aggregation!r}")


def cmc(probes, gallery, aggregation=AGG_MEAN):
    ranks = true_ranks(probes, gallery, aggregation)
    g = len(gallery)
    if len(ranks) == 0:
        raise ValueError("no probes")
    rates = np.array([np.mean(ranks <= k) for k in range(1, g + 1)])
    return CmcCurve(rates, g)


# ----------------------------------------------------------------------------
# embedding images


def embed_images(net, dataset, images):
    """Image-level EmbeddingRecords (mean of patch embeddings)."""
    if not images:
        return []
    patches, _, _, _, rows = dataset.stack(images)
    z = embed_patches(net, patches)
    out = []
    for k, im in enumerate(images):
        pz = z[rows == k]
        out.append(EmbeddingRecord(im.subject_id, im.modality, im.image_id, image_embedding(pz),
                                   im.range_id, im.condition, pz, [tuple(p) for p in im.positions]))
    return out


def build_gallery(records):
    """One visible entry per subject: the mean over its baseline images."""
    by_subject = {}
    for r in records:
        if r.modality == VISIBLE and r.condition == "baseline":
            by_subject.setdefault(r.subject_id, []).append(r)
    gallery = []
    for s in sorted(by_subject, key=_order_key):
        recs = by_subject[s]
        emb = np.mean([r.embedding for r in recs], axis=0)
        positions = recs[0].positions
        patch_emb = np.mean([r.patch_embeddings for r in recs], axis=0)
        gallery.append(EmbeddingRecord(s, VISIBLE, f"{s}/gallery", emb, "", "baseline", patch_emb, positions))
    return gallery


# ----------------------------------------------------------------------------
# protocol


@dataclass
class TrialProtocol:
    n_train: int = 25
    n_trials: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be positive")
        if self.n_train < 0:
            raise ValueError("n_train must be nonnegative")

    def trial_seeds(self):
        """(split_seed, train_seed) per trial, derived from the master seed."""
        out = []
        for child in np.random.SeedSequence(self.seed).spawn(self.n_trials):
            a, b = child.generate_state(2, np.uint64)
            out.append((int(a), int(b)))
        return out


@dataclass
class TrialsResult:
    mean_cmc: CmcCurve
    rank1: list
    strata: dict  # label -> per-trial rank-1 (nan when the stratum is empty)
    curves: list
    n_probes: list

    def summary(self):
        r1 = np.array(self.rank1)
        strata = {}
        for label, vals in self.strata.items():
            v = np.array(vals, dtype=float)
            strata[label] = None if np.all(np.isnan(v)) else float(np.nanmean(v))
        return {"rank1_mean": float(r1.mean()), "rank1_std": float(r1.std()),
                "rank1_per_trial": [float(v) for v in r1], "strata_rank1_mean": strata,
                "gallery_size": self.mean_cmc.gallery_size, "n_trials": len(r1)}


def evaluate_model(model, dataset, test_ids, aggregation=AGG_MEAN):
    """(CmcCurve, {stratum: rank-1}, n_probes) for one trained model on test subjects."""
    vis = embed_images(model.vis_net, dataset, dataset.select(test_ids, VISIBLE))
    pol = embed_images(model.pol_net, dataset, dataset.select(test_ids, POLARIMETRIC))
    gallery = build_gallery(vis)
    ranks = true_ranks(pol, gallery, aggregation)
    g = len(gallery)
    curve = CmcCurve(np.array([np.mean(ranks <= k) for k in range(1, g + 1)]), g)
    strata = {}
    for label, rid, cond in STRATA:
        mask = np.array([(rid is None or p.range_id == rid) and (cond is None or p.condition == cond) for p in pol])
        strata[label] = float(np.mean(ranks[mask] == 1)) if mask.any() else float("nan")
    return curve, strata, len(pol)


def run_trials(dataset, protocol, train_fn, aggregation=AGG_MEAN):
    """Repeated random subject splits: train on one side, identify the other.

    ``train_fn(train_ids, seed)`` returns a trained CoupledModel.
    """
    subjects = dataset.subjects()
    if not protocol.n_train < len(subjects):
        raise ValueError(f"n_train={protocol.n_train} leaves no test subjects out of {len(subjects)}")
    curves, rank1, n_probes = [], [], []
    strata = {label: [] for label, _, _ in STRATA}
    for t, (split_seed, train_seed) in enumerate(protocol.trial_seeds()):
        train_ids, test_ids = split_subjects(subjects, protocol.n_train, split_seed)
        model = train_fn(train_ids, train_seed)
        curve, st, n = evaluate_model(model, dataset, test_ids, aggregation)
        curves.append(curve)
        rank1.append(curve.rank1)
        n_probes.append(n)
        for label, v in st.items():
            strata[label].append(v)
        log.info("trial %d/%d: rank-1 %.4f", t + 1, protocol.n_trials, curve.rank1)
    mean_rates = np.mean([c.rates for c in curves], axis=0)
    return TrialsResult(CmcCurve(mean_rates, curves[0].gallery_size), rank1, strata, curves, n_probes)


# ----------------------------------------------------------------------------
# reports


def export_embeddings(records, path):
    """CSV: subject_id, modality, image_id, e0..e{D-1}; floats at 17 significant digits."""
    dim = len(records[0].embedding) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "modality", "image_id"] + [f"e{i}" for i in range(dim)])
        for r in records:
            if len(r.embedding) != dim:
                raise ValueError("embedding dimensions differ between records")
            w.writerow([r.subject_id, r.modality, r.image_id] + [format(float(v), ".17g") for v in r.embedding])


def read_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        vec = np.array([float(v) for k, v in r.items() if k.startswith("e") and k[1:].isdigit()])
        out.append(EmbeddingRecord(r["subject_id"], r["modality"], r["image_id"], vec))
    return out


def write_cmc_csv(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "rate"])
        for k, v in enumerate(curve.rates, start=1):
            w.writerow([k, format(float(v), ".17g")])


def write_summary_json(result, path, extra=None):
    doc = result.summary()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def format_table(results):
    """Plain-text Rank-1 table; ``results`` maps probe label -> TrialsResult."""
    labels = list(results)
    lines = ["Rank-1 identification rate (mean over trials)",
             f"{'Scenario':<20}" + "".join(f"{lab:>14}" for lab in labels)]
    for stratum, _, _ in STRATA:
        cells = []
        for lab in labels:
            v = results[lab].summary()["strata_rank1_mean"][stratum]
            cells.append(f"{'n/a' if v is None else format(v, '.4f'):>14}")
        lines.append(f"{stratum:<20}" + "".join(cells))
    return "\n".join(lines) + "\n"

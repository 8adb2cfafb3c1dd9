"""Preprocessed patch datasets shared by training, embedding and evaluation."""

import csv
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import io, polarimetry, preproc
from .pairgen import POLARIMETRIC, VISIBLE

INPUT_POLARIMETRIC = "polarimetric"
INPUT_THERMAL = "thermal"
INPUT_MODES = (INPUT_POLARIMETRIC, INPUT_THERMAL)

PATCH_INDEX = "patches.csv"
_POL_NAMES = ("i0", "i90", "i45", "i_neg45", "i_right", "i_left")


@dataclass
class PatchImage:
    image_id: str
    subject_id: str
    modality: str
    range_id: str
    condition: str
    positions: list
    patches: np.ndarray = field(repr=False)  # (n, P, P, C)
    source: str = ""


@dataclass
class PreprocessConfig:
    dog: preproc.DoGConfig = field(default_factory=preproc.DoGConfig)
    grid: preproc.PatchGrid = field(default_factory=preproc.PatchGrid)
    normalize: str = preproc.NORMALIZE_NONE
    convention: str = polarimetry.DIFFERENCE


def preprocess_visible(img, cfg):
    return preproc.preprocess_stack([img], cfg.dog, cfg.grid, cfg.normalize)


def preprocess_polarimetric(channels, cfg):
    meas = polarimetry.IntensityMeasurements(
        channels["i0"], channels["i90"], channels["i45"], channels["i_neg45"],
        channels.get("i_right"), channels.get("i_left"))
    st = polarimetry.stokes_from_intensities(meas, cfg.convention)
    return preproc.preprocess_stack([st.s0, st.s1, st.s2], cfg.dog, cfg.grid, cfg.normalize)


def _to_image(meta, patch_list, source=""):
    positions = [(r, c) for r, c, _ in patch_list]
    arr = np.stack([p for _, _, p in patch_list])
    return PatchImage(meta["image_id"], meta["subject_id"], meta["modality"], meta["range_id"],
                      meta["condition"], positions, arr, source)


class PatchDataset:
    """Patch tensors for every image, with a switchable probe input mode.

    In ``thermal`` mode polarimetric patches are presented as (S0, S0, S0),
    i.e. the conventional thermal intensity replicated into the three
    polarimetric input channels.
    """

    def __init__(self, images, input_mode=INPUT_POLARIMETRIC):
        if input_mode not in INPUT_MODES:
            raise ValueError(f"input mode must be one of {INPUT_MODES}")
        self.images = list(images)
        self.input_mode = input_mode

    def with_input(self, mode):
        return PatchDataset(self.images, mode)

    def subjects(self):
        return sorted({im.subject_id for im in self.images})

    def select(self, subject_ids=None, modality=None):
        keep = set(subject_ids) if subject_ids is not None else None
        return [im for im in self.images
                if (keep is None or im.subject_id in keep) and (modality is None or im.modality == modality)]

    def image_patches(self, im):
        if im.modality == POLARIMETRIC and self.input_mode == INPUT_THERMAL:
            return np.repeat(im.patches[..., :1], 3, axis=-1)
        return im.patches

    def stack(self, images):
        """(patches, subjects, positions, ranges, image_row) for a list of images."""
        if not images:
            raise ValueError("no images selected")
        patches = np.concatenate([self.image_patches(im) for im in images])
        subjects, positions, ranges, rows = [], [], [], []
        for k, im in enumerate(images):
            for pos in im.positions:
                subjects.append(im.subject_id)
                positions.append(tuple(pos))
                ranges.append(im.range_id)
                rows.append(k)
        return patches, subjects, positions, ranges, np.array(rows)

    @classmethod
    def from_synth(cls, ds, cfg=None, input_mode=INPUT_POLARIMETRIC):
        cfg = cfg or PreprocessConfig()
        images = []
        for im in ds.images:
            meta = {"image_id": im.image_id, "subject_id": im.subject_id, "modality": im.modality,
                    "range_id": im.range_id, "condition": im.condition}
            if im.modality == VISIBLE:
                plist = preprocess_visible(im.channels["vis"], cfg)
            else:
                plist = preprocess_polarimetric(im.channels, cfg)
            images.append(_to_image(meta, plist))
        return cls(images, input_mode)

    @classmethod
    def from_manifest(cls, root, cfg=None, input_mode=INPUT_POLARIMETRIC):
        """Preprocess the PGM images listed in ``<root>/manifest.csv``.

        Rows without ``image_id``/``channel`` columns fall back to the file
        layout: polarimetric files end in ``_<channel>.pgm``.
        """
        cfg = cfg or PreprocessConfig()
        path = os.path.join(root, "manifest.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path}: no manifest")
        groups, order = {}, []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"subject_id", "modality", "range", "condition", "path"} - set(reader.fieldnames or ())
            if missing:
                raise io.FormatError(f"{path}: missing columns {sorted(missing)}")
            for row in reader:
                stem = os.path.splitext(row["path"])[0]
                channel = row.get("channel") or ""
                if not channel:
                    channel = "vis"
                    if row["modality"] != VISIBLE:
                        for name in _POL_NAMES:
                            if stem.endswith("_" + name):
                                channel, stem = name, stem[:-len(name) - 1]
                                break
                image_id = row.get("image_id") or stem.replace(os.sep, "/")
                if image_id not in groups:
                    order.append(image_id)
                    groups[image_id] = (row, {})
                groups[image_id][1][channel] = io.read_pgm(os.path.join(root, row["path"]))
        images = []
        for image_id in order:
            row, chans = groups[image_id]
            meta = {"image_id": image_id, "subject_id": row["subject_id"], "modality": row["modality"],
                    "range_id": row["range"], "condition": row["condition"]}
            if row["modality"] == VISIBLE:
                if "vis" not in chans:
                    raise io.FormatError(f"{image_id}: visible image without a vis channel")
                plist = preprocess_visible(chans["vis"], cfg)
            elif row["modality"] == POLARIMETRIC:
                absent = [c for c in _POL_NAMES[:4] if c not in chans]
                if absent:
                    raise io.FormatError(f"{image_id}: missing polarizer channels {absent}")
                plist = preprocess_polarimetric(chans, cfg)
            else:
                raise io.FormatError(f"{image_id}: unknown modality {row['modality']!r}")
            images.append(_to_image(meta, plist, row["path"]))
        if not images:
            raise io.FormatError(f"{path}: manifest lists no images")
        return cls(images, input_mode)

    @classmethod
    def load(cls, root, input_mode=INPUT_POLARIMETRIC):
        """Read a directory written by ``save`` (``xspec preprocess``)."""
        path = os.path.join(root, PATCH_INDEX)
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path}: no patch index (run `xspec preprocess` first)")
        by_image = defaultdict(list)
        order = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["image_id"] not in by_image:
                    order.append(row["image_id"])
                by_image[row["image_id"]].append(row)
        images = []
        for image_id in order:
            rows = by_image[image_id]
            r0 = rows[0]
            arr = io.read_tensor(os.path.join(root, r0["tensor"]))
            if arr.shape[0] != len(rows):
                raise ValueError(f"{r0['tensor']}: {arr.shape[0]} patches, index lists {len(rows)}")
            positions = [(int(r["row"]), int(r["col"])) for r in sorted(rows, key=lambda r: int(r["patch"]))]
            images.append(PatchImage(image_id, r0["subject_id"], r0["modality"], r0["range"], r0["condition"],
                                     positions, arr, r0["source"]))
        return cls(images, input_mode)

    def save(self, root, precision="f64"):
        os.makedirs(os.path.join(root, "patches"), exist_ok=True)
        with open(os.path.join(root, PATCH_INDEX), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "subject_id", "modality", "range", "condition", "source",
                        "tensor", "patch", "row", "col"])
            for im in self.images:
                rel = os.path.join("patches", im.image_id.replace("/", "__") + ".xspt")
                io.write_tensor(os.path.join(root, rel), im.patches, precision)
                for k, (r, c) in enumerate(im.positions):
                    w.writerow([im.image_id, im.subject_id, im.modality, im.range_id, im.condition,
                                im.source, rel, k, r, c])

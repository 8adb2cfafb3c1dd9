"""Command line entry point: ``xspec <command> ...``.

Every failure ends with exit status != 0 and a single JSON line on stderr:
``{"error": <kind>, "exit_code": <n>, "message": <text>}``.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import _kernels, config
from .config import ConfigError
from .dataset import PatchDataset
from .evaluation import (
    TrialProtocol,
    embed_images,
    export_embeddings,
    format_table,
    run_trials,
    write_cmc_csv,
    write_summary_json,
)
from .io import FormatError
from .net import build_coupled, load_checkpoint, save_checkpoint
from .pairgen import POLARIMETRIC, VISIBLE, generate_pairs, PatchRecord, write_pairs_csv
from .synth import generate_dataset, write_dataset
from .train import train_on_dataset

log = logging.getLogger("xspec")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_SHAPE = 6
EXIT_DATA = 7

RESOLVED_CONFIG = "resolved_config.json"


class UsageError(Exception):
    pass


class ShapeError(ValueError):
    """Checkpoint and data disagree on patch size or channel layout."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config(p):
    p.add_argument("--config", help="flat JSON config file (flags override its values)")


def build_parser():
    parser = _Parser(prog="xspec", description="Coupled cross-spectrum embedding pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", dest="synth_seed", type=int)
    p.add_argument("--subjects", dest="n_subjects", type=int)

    p = sub.add_parser("preprocess", help="Stokes + DoG + patches over a manifest")
    _add_config(p)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma0", type=float)
    p.add_argument("--sigma1", type=float)
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--convention", help="difference or as_written")
    p.add_argument("--normalize", help="none or zero_mean_unit_var")

    p = sub.add_parser("pairs", help="write a balanced pair list")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--same-range", dest="same_range", action="store_const", const=True)

    p = sub.add_parser("train", help="train or fine-tune a coupled model")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--input", help="polarimetric or thermal")
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--freeze-except-last", dest="freeze_except_last", type=int)
    p.add_argument("--same-range", dest="same_range", action="store_const", const=True)
    p.add_argument("--resample-per-epoch", dest="resample_per_epoch", action="store_const", const=True)

    p = sub.add_parser("embed", help="image-level embeddings as CSV")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input", help="polarimetric or thermal")

    p = sub.add_parser("eval-cmc", help="repeated-split identification with CMC reports")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--trials", type=int)
    p.add_argument("--train-subjects", dest="train_subjects", type=int)
    p.add_argument("--seed", dest="eval_seed", type=int)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--freeze-except-last", dest="freeze_except_last", type=int)
    p.add_argument("--input", help="polarimetric or thermal")
    p.add_argument("--patch-vote", dest="aggregation", action="store_const", const="patch_vote")
    return parser


_NON_CONFIG = {"command", "config", "out", "in_dir", "data", "init", "ckpt", "verbose"}


def _resolve(args):
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    return config.load(args.config, overrides)


def _backend():
    return _kernels.backend_name()


def _load_data(path, cfg):
    return PatchDataset.load(path, input_mode=cfg["input"])


def _check_compatible(model, data):
    im = data.images[0]
    vis = next((i for i in data.images if i.modality == VISIBLE), None)
    pol = next((i for i in data.images if i.modality == POLARIMETRIC), None)
    if vis is None or pol is None:
        raise ShapeError("data must contain visible and polarimetric patches")
    for net, sample, name in ((model.vis_net, vis, "visible"), (model.pol_net, pol, "polarimetric")):
        c = data.image_patches(sample).shape[-1]
        if c != net.in_channels:
            raise ShapeError(f"{name} patches have {c} channels, checkpoint tower expects {net.in_channels}")
    size = im.patches.shape[1]
    n_pools = sum(1 for s in model.vis_net.layers if s.kind == "maxpool2")
    if size < 2 ** n_pools:
        raise ShapeError(f"{size}x{size} patches are too small for {n_pools} pooling stages")


def _load_ckpt(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: checkpoint not found")
    return load_checkpoint(path)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    ds = generate_dataset(config.synth_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    write_dataset(ds, args.out)
    config.write_resolved(os.path.join(args.out, RESOLVED_CONFIG), cfg, "synth", _backend())
    log.info("wrote %d images to %s", len(ds.images), args.out)


def cmd_preprocess(args, cfg):
    data = PatchDataset.from_manifest(args.in_dir, config.preprocess_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    data.save(args.out, cfg["tensor_precision"])
    config.write_resolved(os.path.join(args.out, RESOLVED_CONFIG), cfg, "preprocess", _backend())
    log.info("preprocessed %d images into %s", len(data.images), args.out)


def cmd_pairs(args, cfg):
    data = _load_data(args.data, cfg)
    records = []
    for im in data.images:
        for pos in im.positions:
            records.append(PatchRecord(im.subject_id, im.modality, im.condition, im.range_id, tuple(pos),
                                       image_id=im.image_id))
    pairs = generate_pairs(records, cfg["seed"], cfg["ratio"], cfg["same_range"])
    _ensure_parent(args.out)
    write_pairs_csv(pairs, args.out)
    config.write_resolved(_sidecar(args.out, "config.json"), cfg, "pairs", _backend())


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _sidecar(path, suffix):
    stem = os.path.splitext(path)[0]
    return f"{stem}.{suffix}"


def cmd_train(args, cfg):
    data = _load_data(args.data, cfg)
    if args.init:
        model = _load_ckpt(args.init)
    else:
        model = build_coupled(config.blocks(cfg), cfg["global_pool"], cfg["init_seed"],
                              pol_from_vis=cfg["pol_from_vis"])
    _check_compatible(model, data)
    _ensure_parent(args.out)
    log_path = _sidecar(args.out, "log.csv")
    rows = []
    stats = train_on_dataset(model, data, data.subjects(), config.train_config(cfg), stage="train",
                             freeze_except_last=cfg["freeze_except_last"],
                             callback=lambda s: log.info("epoch %d loss %.6f", s.epoch, s.mean_loss))
    for s in stats:
        rows.append([s.stage, s.epoch] + [format(v, ".17g") for v in (s.mean_loss, s.genuine_distance,
                                                                  s.impostor_distance)] + [s.n_pairs])
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "mean_loss", "genuine_distance", "impostor_distance", "n_pairs"])
        w.writerows(rows)
    history = list(model.meta.get("history", []))
    history.append({"command": "train", "input": cfg["input"], "epochs": cfg["epochs"],
                    "freeze_except_last": cfg["freeze_except_last"], "seed": cfg["seed"]})
    model.meta = {"history": history, "input": cfg["input"],
                  "patch": cfg["patch"], "normalize": cfg["normalize"]}
    save_checkpoint(model, args.out, cfg["checkpoint_precision"])
    config.write_resolved(_sidecar(args.out, "config.json"), cfg, "train", _backend())


def cmd_embed(args, cfg):
    model = _load_ckpt(args.ckpt)
    data = _load_data(args.data, cfg)
    _check_compatible(model, data)
    records = embed_images(model.vis_net, data, data.select(None, VISIBLE))
    records += embed_images(model.pol_net, data, data.select(None, POLARIMETRIC))
    _ensure_parent(args.out)
    export_embeddings(records, args.out)
    config.write_resolved(_sidecar(args.out, "config.json"), cfg, "embed", _backend())


def cmd_eval_cmc(args, cfg):
    model = _load_ckpt(args.ckpt)
    data = _load_data(args.data, cfg)
    _check_compatible(model, data)
    n_subjects = len(data.subjects())
    if not cfg["train_subjects"] < n_subjects:
        raise ConfigError(f"train_subjects={cfg['train_subjects']} leaves no test subjects out of {n_subjects}")
    protocol = TrialProtocol(cfg["train_subjects"], cfg["trials"], cfg["eval_seed"])
    freeze = cfg["freeze_except_last"]
    if freeze is None:
        freeze = 3
    ft_epochs = cfg["finetune_epochs"]

    def train_fn(train_ids, seed):
        m = model.copy()
        if ft_epochs > 0:
            tcfg = config.train_config(cfg, epochs=ft_epochs)
            tcfg.seed = seed
            train_on_dataset(m, data, train_ids, tcfg, stage="finetune", freeze_except_last=freeze)
        return m

    result = run_trials(data, protocol, train_fn, cfg["aggregation"])
    os.makedirs(args.out, exist_ok=True)
    write_cmc_csv(result.mean_cmc, os.path.join(args.out, "cmc.csv"))
    write_summary_json(result, os.path.join(args.out, "summary.json"),
                       extra={"input": cfg["input"], "prng": {"algorithm": "numpy.PCG64",
                                                              "eval_seed": cfg["eval_seed"]}})
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write(format_table({cfg["input"]: result}))
    config.write_resolved(os.path.join(args.out, RESOLVED_CONFIG), cfg, "eval-cmc", _backend())
    log.info("rank-1 mean %.4f over %d trials", float(np.mean(result.rank1)), len(result.rank1))


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pairs": cmd_pairs,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval-cmc": cmd_eval_cmc,
}


def _fail(kind, code, message):
    line = json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        _kernels.num_threads()
    except ValueError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    try:
        cfg = _resolve(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail("missing_file", EXIT_MISSING, exc)
    except FormatError as exc:
        return _fail("format", EXIT_FORMAT, exc)
    except ShapeError as exc:
        return _fail("shape", EXIT_SHAPE, exc)
    except ValueError as exc:
        return _fail("data", EXIT_DATA, exc)
    except OSError as exc:
        return _fail("io", EXIT_MISSING, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

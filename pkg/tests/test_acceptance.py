"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``. Criterion 6 trains real
models and takes about twenty minutes on one core.
"""

import json
import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from conftest import fd_net_check, rel_err, small_net  # noqa: E402
from xspec import cli  # noqa: E402
from xspec.dataset import PatchDataset, PreprocessConfig  # noqa: E402
from xspec.loss import ContrastiveConfig, contrastive_grad, contrastive_loss  # noqa: E402
from xspec.net import build_coupled, load_checkpoint  # noqa: E402
from xspec.polarimetry import IntensityMeasurements, dolp, stokes_from_intensities  # noqa: E402
from xspec.preproc import DoGConfig, PatchGrid, dog_filter, extract_patches, gaussian_kernel  # noqa: E402
from xspec.synth import SynthConfig, generate_dataset, generate_polarized_intensities  # noqa: E402
from xspec.train import TrainConfig, train_on_dataset  # noqa: E402

RESULTS = {}

# tolerances
GRAD_REL_TOL = 1e-5
GRAD_INSTANCES = 20
DOLP_TOL = 1e-10
DOG_ZERO_TOL = 1e-12
LOSS_DROP = 0.5
RANK1_TARGET = 0.80
N_TRIALS = 10
N_TRAIN, N_TEST = 25, 35

# the easy synthetic regime used by the end-to-end criterion
E2E_CONFIG = {
    "n_subjects": N_TRAIN + N_TEST, "images_baseline": 2, "images_expression": 1, "image_size": 50,
    "blur_per_range": [0.0, 0.9, 1.25], "noise_std": 0.01, "warp_px": 0.5, "cross_modal_map": "linear_mix",
    "synth_seed": 1,
    "normalize": "zero_mean_unit_var", "blocks": [[8, 8], [16, 16], [32]], "lr": 0.001, "batch": 64,
    "max_pairs_per_epoch": 2048, "resample_per_epoch": True, "epochs": 30,
    "trials": N_TRIALS, "train_subjects": N_TRAIN, "eval_seed": 0, "finetune_epochs": 5,
    "freeze_except_last": 3,
}
PRETRAIN_SUBJECTS, PRETRAIN_SEED, PRETRAIN_EPOCHS = 200, 100, 50


def record(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def _main(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"xspec {argv[0]} exited with {code}"


# ----------------------------------------------------------------------------


def test_1_gradient_suite():
    t0 = time.time()
    worst = 0.0
    for seed in range(GRAD_INSTANCES):
        for pool in ("avg", "max"):
            net = small_net(seed, pool)
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((6, 7, 2))
            worst = max(worst, fd_net_check(net, x, rng.standard_normal(net.embedding_dim)))
    cfg = ContrastiveConfig(margin=1.0)
    h = 1e-6
    for seed in range(GRAD_INSTANCES):
        rng = np.random.default_rng(1000 + seed)
        z1 = rng.standard_normal(6)
        u = rng.standard_normal(6)
        z2 = z1 + rng.uniform(0.05, 0.95) * u / np.linalg.norm(u)
        for y in (0, 1):
            g1, g2 = contrastive_grad(z1, z2, y, cfg)
            for z, g, first in ((z1, g1, True), (z2, g2, False)):
                num = np.zeros_like(z)
                for j in range(z.size):
                    e = np.zeros_like(z)
                    e[j] = h
                    a, b = (z1 + e, z2) if first else (z1, z2 + e)
                    c, d = (z1 - e, z2) if first else (z1, z2 - e)
                    num[j] = (contrastive_loss(a, b, y, cfg) - contrastive_loss(c, d, y, cfg)) / (2 * h)
                worst = max(worst, float(rel_err(g, num).max()))
    elapsed = time.time() - t0
    ok = worst < GRAD_REL_TOL and elapsed < 60
    record(1, ok, f"max relative error {worst:.2e} (< {GRAD_REL_TOL:g}) over {GRAD_INSTANCES} seeded nets x 2 pools "
                  f"and {GRAD_INSTANCES} loss instances x 2 branches; {elapsed:.1f}s")
    assert ok


def test_2_polarimetry_suite():
    rng = np.random.default_rng(2)
    worst_scale = worst_rt = 0.0
    unpolarized_ok = True
    for _ in range(100):
        m = IntensityMeasurements(*rng.uniform(0.01, 1.0, (4, 5, 5)))
        c = rng.uniform(1e-3, 1e3)
        scaled = IntensityMeasurements(*(c * v for v in (m.i0, m.i90, m.i45, m.i_neg45)))
        worst_scale = max(worst_scale, np.abs(dolp(stokes_from_intensities(scaled))
                                              - dolp(stokes_from_intensities(m))).max())
        a, b = rng.uniform(0, 1, (2, 5, 5))
        unpolarized_ok &= bool(np.all(stokes_from_intensities(IntensityMeasurements(a, a, b, b)).dolp == 0))
        d = rng.uniform(0, 1)
        gen = generate_polarized_intensities(d, rng.uniform(-np.pi, np.pi), rng.uniform(0.01, 10), (3, 3))
        worst_rt = max(worst_rt, np.abs(dolp(stokes_from_intensities(gen)) - d).max())
    ok = worst_scale < DOLP_TOL and worst_rt < DOLP_TOL and unpolarized_ok
    record(2, ok, f"100 cases: scale invariance err {worst_scale:.1e}, unpolarized DoLP==0 {unpolarized_ok}, "
                  f"round-trip err {worst_rt:.1e} (< {DOLP_TOL:g})")
    assert ok


def test_3_preproc_suite():
    cfg = DoGConfig()
    const_err = max(np.abs(dog_filter(np.full((33, 47), v), cfg)).max() for v in (0.0, 0.5, 7.0, -3.0))
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    r = cfg.radius
    kdiff = gaussian_kernel(cfg.sigma0, r) - gaussian_kernel(cfg.sigma1, r)
    impulse_err = np.abs(dog_filter(img, cfg)[20 - r:21 + r, 20 - r:21 + r] - kdiff).max()
    rng = np.random.default_rng(3)
    tiles_ok = True
    for _ in range(50):
        p, s = int(rng.integers(1, 20)), int(rng.integers(1, 12))
        h, w = int(rng.integers(p, 80)), int(rng.integers(p, 80))
        brute = [(i, j) for i in range(0, h - p + 1, s) for j in range(0, w - p + 1, s)]
        got = [(i, j) for i, j, _ in extract_patches(np.zeros((h, w)), PatchGrid(p, s))]
        closed = ((h - p) // s + 1) * ((w - p) // s + 1)
        tiles_ok &= got == brute and len(got) == closed
    ok = const_err < DOG_ZERO_TOL and impulse_err < 1e-15 and tiles_ok
    record(3, ok, f"constant-image DoG max {const_err:.1e} (< {DOG_ZERO_TOL:g}), impulse err {impulse_err:.1e}, "
                  f"50 patch tuples match closed form and brute tiling: {tiles_ok}")
    assert ok


def test_4_loss_examples():
    cfg = ContrastiveConfig(margin=1.0)
    at = lambda d: (np.zeros(3), np.array([d, 0.0, 0.0]))  # noqa: E731
    got = [contrastive_loss(np.ones(3), np.ones(3), 0, cfg), contrastive_loss(*at(0.5), 0, cfg),
           contrastive_loss(*at(2.0), 1, cfg), contrastive_loss(*at(0.25), 1, cfg)]
    ok = got == [0.0, 0.125, 0.0, 0.28125]
    record(4, ok, f"losses {got} == [0, 0.125, 0, 0.28125]")
    assert ok


def _dynamics_run():
    ds = generate_dataset(SynthConfig(n_subjects=20, images_per_condition=(1, 1), image_size=50,
                                      blur_per_range=(0.0, 0.5, 1.0), noise_std=0.005, cross_modal_map="linear_mix",
                                      seed=5))
    data = PatchDataset.from_synth(ds, PreprocessConfig(normalize="zero_mean_unit_var"))
    model = build_coupled(((8, 8), (16, 16), (32,)), seed=0)
    cfg = TrainConfig(epochs=12, batch_size=64, lr=0.001, max_pairs_per_epoch=768, seed=0)
    return train_on_dataset(model, data, data.subjects(), cfg), model


def test_5_training_dynamics():
    t0 = time.time()
    stats, model = _dynamics_run()
    stats2, model2 = _dynamics_run()
    elapsed = time.time() - t0
    first, last = stats[0], stats[-1]
    drop = 1 - last.mean_loss / first.mean_loss
    same = [s.mean_loss for s in stats] == [s.mean_loss for s in stats2] and all(
        a.tobytes() == b.tobytes() for a, b in zip(model.pol_net.weights, model2.pol_net.weights) if a is not None)
    ok = last.genuine_distance < last.impostor_distance and drop >= LOSS_DROP and same and len(stats) <= 30
    record(5, ok, f"{len(stats)} epochs: genuine {last.genuine_distance:.3f} < impostor {last.impostor_distance:.3f}, "
                  f"loss {first.mean_loss:.4f} -> {last.mean_loss:.4f} (drop {drop:.0%} >= {LOSS_DROP:.0%}), "
                  f"deterministic {same}; {elapsed / 2:.0f}s per run")
    assert ok


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Pretrain per input mode, then the repeated-split protocol, via the CLI."""
    root = tmp_path_factory.mktemp("e2e")
    main_cfg = root / "main.json"
    main_cfg.write_text(json.dumps(E2E_CONFIG))
    pre_cfg = root / "pretrain.json"
    pre_cfg.write_text(json.dumps(dict(E2E_CONFIG, n_subjects=PRETRAIN_SUBJECTS, synth_seed=PRETRAIN_SEED,
                                       epochs=PRETRAIN_EPOCHS, freeze_except_last=None)))
    for name, cfg in (("main", main_cfg), ("pre", pre_cfg)):
        _main("synth", "--config", cfg, "--out", root / f"{name}_raw")
        _main("preprocess", "--config", cfg, "--in", root / f"{name}_raw", "--out", root / f"{name}_prep")
    out = {}
    for mode in ("polarimetric", "thermal"):
        ckpt = root / f"pre_{mode}.xspc"
        _main("train", "--config", pre_cfg, "--data", root / "pre_prep", "--out", ckpt, "--input", mode)
        _main("eval-cmc", "--config", main_cfg, "--ckpt", ckpt, "--data", root / "main_prep",
              "--out", root / f"rep_{mode}", "--input", mode)
        out[mode] = json.loads((root / f"rep_{mode}" / "summary.json").read_text())
        out[mode]["cmc"] = [float(line.split(",")[1]) for line in
                            (root / f"rep_{mode}" / "cmc.csv").read_text().splitlines()[1:]]
    untrained_cfg = root / "untrained.json"
    untrained_cfg.write_text(json.dumps(dict(E2E_CONFIG, pol_from_vis=False, epochs=0, finetune_epochs=0)))
    _main("train", "--config", untrained_cfg, "--data", root / "pre_prep", "--out", root / "untrained.xspc")
    _main("eval-cmc", "--config", untrained_cfg, "--ckpt", root / "untrained.xspc", "--data", root / "main_prep",
          "--out", root / "rep_untrained")
    out["untrained"] = json.loads((root / "rep_untrained" / "summary.json").read_text())
    out["n_probes"] = N_TEST * 3 * (E2E_CONFIG["images_baseline"] + E2E_CONFIG["images_expression"])
    return out


@pytest.mark.slow
def test_6_end_to_end_identification(e2e):
    pol, th, un = e2e["polarimetric"], e2e["thermal"], e2e["untrained"]
    n = N_TRIALS * e2e["n_probes"]
    chance = 1 / N_TEST
    sigma = math.sqrt(chance * (1 - chance) / n)
    a = pol["rank1_mean"] >= RANK1_TARGET and abs(un["rank1_mean"] - chance) <= 3 * sigma
    curve = pol["cmc"]
    b = len(curve) == N_TEST and all(y >= x for x, y in zip(curve, curve[1:])) and curve[-1] == 1.0
    s = pol["strata_rank1_mean"]
    r1, r2, r3 = s["Range 1 Baseline"], s["Range 2 Baseline"], s["Range 3 Baseline"]
    c = r1 >= r2 >= r3
    d = pol["rank1_mean"] >= th["rank1_mean"]
    ok = a and b and c and d and pol["n_trials"] == N_TRIALS
    record(6, ok, f"(a) rank-1 {pol['rank1_mean']:.4f} >= {RANK1_TARGET} [{a}], untrained {un['rank1_mean']:.4f} vs "
                  f"chance {chance:.4f} +/- {3 * sigma:.4f}; (b) CMC monotone, 1.0 at rank {len(curve)} [{b}]; "
                  f"(c) R1 {r1:.4f} >= R2 {r2:.4f} >= R3 {r3:.4f} [{c}]; "
                  f"(d) polarimetric {pol['rank1_mean']:.4f} >= thermal {th['rank1_mean']:.4f} [{d}]; "
                  f"{N_TRIALS} trials, {N_TRAIN}/{N_TEST} split")
    assert ok


TINY = {"n_subjects": 5, "images_baseline": 1, "images_expression": 1, "image_size": 30, "patch": 20, "stride": 10,
        "blocks": [[4, 4], [6, 6], [8]], "epochs": 2, "batch": 32, "normalize": "zero_mean_unit_var", "lr": 0.002,
        "trials": 2, "train_subjects": 2, "finetune_epochs": 1}


def test_7_freezing_contract(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    _main("synth", "--config", cfg, "--out", tmp_path / "raw")
    _main("preprocess", "--config", cfg, "--in", tmp_path / "raw", "--out", tmp_path / "prep")
    _main("train", "--config", cfg, "--data", tmp_path / "prep", "--out", tmp_path / "pre.xspc")
    _main("train", "--config", cfg, "--data", tmp_path / "prep", "--init", tmp_path / "pre.xspc",
          "--freeze-except-last", 3, "--out", tmp_path / "ft.xspc")
    a, b = load_checkpoint(tmp_path / "pre.xspc"), load_checkpoint(tmp_path / "ft.xspc")
    frozen_same, trained_changed = True, True
    for ta, tb in ((a.vis_net, b.vis_net), (a.pol_net, b.pol_net)):
        convs = ta.conv_indices
        for i in convs[:-3]:
            frozen_same &= ta.weights[i].tobytes() == tb.weights[i].tobytes()
            frozen_same &= ta.biases[i].tobytes() == tb.biases[i].tobytes()
        trained_changed &= any(ta.weights[i].tobytes() != tb.weights[i].tobytes() for i in convs[-3:])
    ok = frozen_same and trained_changed
    record(7, ok, f"--freeze-except-last 3 on a {len(a.vis_net.conv_indices)}-conv tower: first "
                  f"{len(a.vis_net.conv_indices) - 3} convs bit-identical per tower [{frozen_same}], "
                  f"last 3 updated [{trained_changed}]")
    assert ok


def _pipeline(root, cfg):
    _main("synth", "--config", cfg, "--out", root / "raw")
    _main("preprocess", "--config", root / "raw" / cli.RESOLVED_CONFIG, "--in", root / "raw", "--out", root / "prep")
    _main("train", "--config", cfg, "--data", root / "prep", "--out", root / "model.xspc")
    _main("embed", "--config", cfg, "--ckpt", root / "model.xspc", "--data", root / "prep", "--out", root / "emb.csv")
    _main("eval-cmc", "--config", cfg, "--ckpt", root / "model.xspc", "--data", root / "prep", "--out", root / "rep")
    names = ["rep/cmc.csv", "rep/summary.json", "rep/table.txt", "emb.csv", "model.log.csv", "model.xspc"]
    return {n: (root / n).read_bytes() for n in names}


def test_8_reproducibility(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    (tmp_path / "a").mkdir()
    first = _pipeline(tmp_path / "a", cfg)
    # the second run starts from the configuration echoed by the first
    resolved = json.loads((tmp_path / "a" / "rep" / cli.RESOLVED_CONFIG).read_text())["config"]
    cfg2 = tmp_path / "resolved.json"
    cfg2.write_text(json.dumps(resolved))
    (tmp_path / "b").mkdir()
    second = _pipeline(tmp_path / "b", cfg2)
    diff = [n for n in first if first[n] != second[n]]
    ok = not diff
    record(8, ok, f"two pipeline runs, second from the echoed resolved config: {len(first)} report files "
                  f"byte-identical" + (f"; differing: {diff}" if diff else ""))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))

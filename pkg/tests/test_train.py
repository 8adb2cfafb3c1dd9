import numpy as np
import pytest

from xspec.dataset import INPUT_THERMAL, PatchDataset, PreprocessConfig
from xspec.net import build_coupled
from xspec.preproc import PatchGrid
from xspec.synth import SynthConfig, generate_dataset
from xspec.train import TrainConfig, embed_patches, train_on_dataset

BLOCKS = ((4,), (6,), (8,))


@pytest.fixture(scope="module")
def tiny():
    ds = generate_dataset(SynthConfig(n_subjects=4, images_per_condition=(1, 0), image_size=24,
                                      ranges=("R1",), blur_per_range=(0.0,)))
    cfg = PreprocessConfig(grid=PatchGrid(16, 8), normalize="zero_mean_unit_var")
    return PatchDataset.from_synth(ds, cfg)


def _params(model):
    return [w.tobytes() + b.tobytes() for net in (model.vis_net, model.pol_net)
            for w, b in zip(net.weights, net.biases) if w is not None]


def test_training_is_deterministic(tiny):
    runs = []
    for _ in range(2):
        m = build_coupled(BLOCKS, seed=0)
        stats = train_on_dataset(m, tiny, tiny.subjects(), TrainConfig(epochs=2, batch_size=8, lr=0.01))
        runs.append((_params(m), [s.mean_loss for s in stats]))
    assert runs[0] == runs[1]


def test_freezing_keeps_prefix_bit_identical(tiny):
    m = build_coupled(BLOCKS, seed=1)
    before = _params(m)
    train_on_dataset(m, tiny, tiny.subjects(), TrainConfig(epochs=2, batch_size=8, lr=0.05), freeze_except_last=1)
    after = _params(m)
    n = len(BLOCKS)
    # per tower: only the last conv changes
    for tower in range(2):
        for k in range(n):
            same = before[tower * n + k] == after[tower * n + k]
            assert same == (k < n - 1)


def test_stats_and_callback(tiny):
    m = build_coupled(BLOCKS, seed=2)
    seen = []
    stats = train_on_dataset(m, tiny, tiny.subjects(), TrainConfig(epochs=3, batch_size=16, lr=0.01),
                             stage="pretrain", callback=seen.append)
    assert [s.epoch for s in stats] == [1, 2, 3] and seen == stats
    assert all(s.stage == "pretrain" and s.n_pairs > 0 and s.mean_loss >= 0 for s in stats)


def test_resample_per_epoch_changes_pairs(tiny):
    a = build_coupled(BLOCKS, seed=3)
    b = a.copy()
    train_on_dataset(a, tiny, tiny.subjects(), TrainConfig(epochs=2, batch_size=8, lr=0.01))
    train_on_dataset(b, tiny, tiny.subjects(), TrainConfig(epochs=2, batch_size=8, lr=0.01, resample_per_epoch=True))
    assert _params(a) != _params(b)


def test_max_pairs_and_thermal_mode(tiny):
    m = build_coupled(BLOCKS, seed=4)
    stats = train_on_dataset(m, tiny.with_input(INPUT_THERMAL), tiny.subjects(),
                             TrainConfig(epochs=1, batch_size=4, max_pairs_per_epoch=10))
    assert stats[0].n_pairs == 10
    im = tiny.select(None, "polarimetric")[0]
    p = tiny.with_input(INPUT_THERMAL).image_patches(im)
    np.testing.assert_array_equal(p[..., 1], p[..., 0])


def test_embed_patches_matches_single_forward(tiny):
    from xspec.net import forward

    m = build_coupled(BLOCKS, seed=5)
    patches, *_ = tiny.stack(tiny.select(None, "visible"))
    z = embed_patches(m.vis_net, patches, chunk=3)
    np.testing.assert_allclose(z[4], forward(m.vis_net, patches[4]), atol=1e-14)


def test_dataset_save_load_round_trip(tiny, tmp_path):
    tiny.save(tmp_path)
    back = PatchDataset.load(tmp_path)
    assert [im.image_id for im in back.images] == [im.image_id for im in tiny.images]
    for a, b in zip(tiny.images, back.images):
        assert a.patches.tobytes() == b.patches.tobytes()
        assert a.positions == b.positions


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)

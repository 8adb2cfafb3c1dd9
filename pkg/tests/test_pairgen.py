import numpy as np
import pytest

from xspec.pairgen import (
    GENUINE,
    IMPOSTOR,
    POLARIMETRIC,
    VISIBLE,
    PatchRecord,
    generate_pair_indices,
    generate_pairs,
    read_pairs_csv,
    split_subjects,
    write_pairs_csv,
)


def _records(n_subjects, positions, images=1, ranges=("R1",)):
    out = []
    for s in range(n_subjects):
        for rng_id in ranges:
            for k in range(images):
                for pos in positions:
                    for mod in (VISIBLE, POLARIMETRIC):
                        out.append(PatchRecord(f"S{s:02d}", mod, "baseline", rng_id, pos,
                                               image_id=f"S{s:02d}/{mod}/{rng_id}/{k}"))
    return out


def _signature(pairs):
    return [(p.vis.image_id, p.pol.image_id, p.vis.grid_pos, p.y_cont) for p in pairs]


def test_two_subjects_one_patch():
    pairs = generate_pairs(_records(2, [(0, 0)]), seed=0)
    assert len(pairs) == 4
    assert sum(p.y_cont == GENUINE for p in pairs) == 2
    assert {(p.vis.subject_id, p.pol.subject_id) for p in pairs if p.y_cont == IMPOSTOR} == {("S00", "S01"), ("S01", "S00")}


def test_one_subject_is_an_error():
    with pytest.raises(ValueError):
        generate_pairs(_records(1, [(0, 0)]), seed=0)


def test_no_colocated_patches_is_an_error():
    recs = [PatchRecord("A", VISIBLE, "baseline", "R1", (0, 0)), PatchRecord("A", POLARIMETRIC, "baseline", "R1", (0, 10)),
            PatchRecord("B", VISIBLE, "baseline", "R1", (0, 0))]
    with pytest.raises(ValueError):
        generate_pairs(recs, seed=0)
    with pytest.raises(ValueError):
        generate_pairs([r for r in recs if r.modality == VISIBLE], seed=0)


def test_full_scan_invariants_and_balance():
    recs = _records(6, [(0, 0), (0, 10), (10, 0)], images=2, ranges=("R1", "R2"))
    pairs = generate_pairs(recs, seed=3)
    gen = [p for p in pairs if p.y_cont == GENUINE]
    imp = [p for p in pairs if p.y_cont == IMPOSTOR]
    # every same-subject co-located cross-modal combination appears once
    assert len(gen) == 6 * 3 * (2 * 2) ** 2
    assert len(imp) == len(gen)
    for p in pairs:
        assert p.vis.modality == VISIBLE and p.pol.modality == POLARIMETRIC
        assert p.vis.grid_pos == p.pol.grid_pos
        assert (p.vis.subject_id == p.pol.subject_id) == (p.y_cont == GENUINE)
    assert len(set(_signature(imp))) == len(imp)  # without replacement


def test_same_seed_identical_different_seed_differs():
    recs = _records(5, [(0, 0), (0, 10)], images=2)
    a = _signature(generate_pairs(recs, seed=11))
    assert a == _signature(generate_pairs(recs, seed=11))
    assert a != _signature(generate_pairs(recs, seed=12))


def test_ratio_and_pool_limit():
    recs = _records(4, [(0, 0)])
    assert sum(p.y_cont for p in generate_pairs(recs, 0, ratio=2.0)) == 8
    assert len(generate_pairs(recs, 0, ratio=3.0)) == 4 + 12
    with pytest.raises(ValueError):
        generate_pairs(recs, 0, ratio=3.5)
    with pytest.raises(ValueError):
        generate_pairs(recs, 0, ratio=0)


def test_same_range_restriction():
    recs = _records(4, [(0, 0)], ranges=("R1", "R2", "R3"))
    for p in generate_pairs(recs, seed=0, same_range=True):
        assert p.vis.range_id == p.pol.range_id
    mixed = generate_pairs(recs, seed=0, ratio=3.0)
    assert any(p.vis.range_id != p.pol.range_id for p in mixed)


def test_impostor_sampling_is_uniform():
    # 3 subjects, 1 patch: pool has 6 impostors, 3 are drawn per call
    vs = ["a", "b", "c"]
    keys = [0, 0, 0]
    counts = {}
    n = 3000
    for seed in range(n):
        vi, pj, y = generate_pair_indices(vs, keys, vs, keys, seed)
        for i, j in zip(vi[y == 1], pj[y == 1]):
            counts[(i, j)] = counts.get((i, j), 0) + 1
    assert len(counts) == 6
    expected = n * 3 / 6
    # chi-square with 5 dof; 20.5 is the 0.999 quantile
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 20.5


def test_split_subjects():
    ids = [f"S{k:03d}" for k in range(60)]
    tr, te = split_subjects(ids, 25, seed=0)
    assert len(tr) == 25 and len(te) == 35
    assert not set(tr) & set(te) and set(tr) | set(te) == set(ids)
    assert (tr, te) == split_subjects(list(reversed(ids)), 25, seed=0)
    assert tr != split_subjects(ids, 25, seed=1)[0]
    assert split_subjects(ids, 0, 0) == ([], sorted(ids))
    with pytest.raises(ValueError):
        split_subjects(ids, 60, 0)


def test_pairs_never_cross_split():
    recs = _records(8, [(0, 0), (0, 10)])
    tr, _ = split_subjects({r.subject_id for r in recs}, 4, seed=2)
    pairs = generate_pairs([r for r in recs if r.subject_id in tr], seed=0)
    assert all(p.vis.subject_id in tr and p.pol.subject_id in tr for p in pairs)


def test_pairs_csv_round_trip(tmp_path):
    pairs = generate_pairs(_records(3, [(0, 10)]), seed=0)
    path = tmp_path / "pairs.csv"
    write_pairs_csv(pairs, path)
    assert path.read_text().splitlines()[0] == "vis_path,pol_path,row,col,y_cont"
    assert read_pairs_csv(path) == [(p.vis.image_id, p.pol.image_id, 0, 10, p.y_cont) for p in pairs]

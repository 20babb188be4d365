import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segforge.core import (
    DEFAULT_CIW,
    ClassDistribution,
    DatasetError,
    Sample,
    class_distribution,
    derive_seed,
    load_ciw,
    load_dataset,
    normalize_ciw,
    read_mask,
    save_dataset,
    split_dataset,
    write_image,
    write_mask,
)


def _sample(sid, labels, size=4):
    mask = np.zeros((size, size), np.uint8)
    for i, c in enumerate(labels):
        mask[i % size, i // size] = c
    return Sample(np.zeros((size, size, 3), np.uint8), mask, sid)


def _dataset(n):
    return [_sample(f"id{i:03d}", [1 + i % 3]) for i in range(n)]


# -- class distribution ------------------------------------------------------

def test_class_distribution_hand_enumeration():
    ds = [_sample("a", [1]), _sample("b", [1, 2]), _sample("c", [2])]
    assert class_distribution(ds).counts == {1: 2, 2: 2}


def test_all_background_sample_counts_nothing():
    dist = class_distribution([_sample("a", [])], num_classes=8)
    assert dist.total == 0
    assert all(v == 0 for v in dist.counts.values())


def test_table_counts_give_class_shares():
    counts = {1: 2981, 2: 1171, 3: 406, 4: 385, 5: 3235, 6: 78, 7: 3991, 8: 105}
    shares = {1: 24.13, 2: 9.48, 3: 3.29, 4: 3.12, 5: 26.19, 6: 0.63, 7: 32.31, 8: 0.85}
    dist = ClassDistribution(counts)
    assert dist.total == 12352
    assert {c: round(100 * p, 2) for c, p in dist.proportions().items()} == shares


@given(st.permutations(list(range(6))))
def test_distribution_ignores_order(perm):
    ds = [_sample(f"s{i}", [1 + i % 3, 1 + (i * 2) % 4]) for i in range(6)]
    shuffled = [ds[i] for i in perm]
    assert class_distribution(shuffled).counts == class_distribution(ds).counts


# -- split -------------------------------------------------------------------

def test_split_sizes_exact_fractions():
    tr, va, te = split_dataset(_dataset(100), seed=42)
    assert (len(tr), len(va), len(te)) == (70, 15, 15)


def test_split_remainder_goes_to_train():
    tr, va, te = split_dataset(_dataset(10))
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_deterministic():
    a = split_dataset(_dataset(37), seed=7)
    b = split_dataset(_dataset(37), seed=7)
    assert [[s.id for s in p] for p in a] == [[s.id for s in p] for p in b]


@settings(max_examples=40)
@given(st.integers(1, 80), st.integers(0, 2**32))
def test_split_is_a_partition(n, seed):
    ds = _dataset(n)
    parts = split_dataset(ds, seed=seed)
    ids = [s.id for p in parts for s in p]
    assert sorted(ids) == sorted(s.id for s in ds)
    assert len(set(ids)) == n


def test_split_rejects_bad_input():
    with pytest.raises(DatasetError):
        split_dataset([])
    with pytest.raises(ValueError):
        split_dataset(_dataset(3), (0.5, 0.3, 0.3))


# -- class importance weights ------------------------------------------------

def test_normalize_ciw_examples():
    assert normalize_ciw({1: 2.0, 2: 1.0}) == {1: 1.0, 2: 0.5}
    assert normalize_ciw(DEFAULT_CIW) == DEFAULT_CIW
    assert normalize_ciw({1: 3.0, 2: 3.0, 3: 3.0}) == {1: 1.0, 2: 1.0, 3: 1.0}


def test_default_ciw_table_values():
    assert DEFAULT_CIW == {1: 1.0, 2: 1.0, 3: 1.0, 4: 0.1622, 5: 0.71, 6: 0.3518, 7: 0.6419, 8: 0.5419}


@given(st.dictionaries(st.integers(1, 8), st.floats(1e-3, 1e3), min_size=1))
def test_normalize_ciw_idempotent(raw):
    once = normalize_ciw(raw)
    assert max(once.values()) == 1.0
    assert normalize_ciw(once) == pytest.approx(once, rel=1e-15)


def test_normalize_ciw_rejects_non_positive():
    with pytest.raises(ValueError):
        normalize_ciw({1: 1.0, 2: 0.0})


def test_load_ciw_formats(tmp_path):
    (tmp_path / "a.json").write_text('{"1": 4, "2": 2}')
    (tmp_path / "b.json").write_text('{"weights": {"3": 1.0}}')
    assert load_ciw(tmp_path / "a.json") == {1: 1.0, 2: 0.5}
    assert load_ciw(tmp_path / "b.json") == {3: 1.0}


# -- samples and I/O ---------------------------------------------------------

def test_sample_dimension_mismatch():
    with pytest.raises(DatasetError, match="dimension mismatch"):
        Sample(np.zeros((4, 5, 3), np.uint8), np.zeros((4, 4), np.uint8), "x")


def test_load_dataset_roundtrip(tmp_path):
    ds = [_sample(f"p{i}", [i + 1]) for i in range(4)]
    ds[1] = ds[1].replace(image=np.arange(48, dtype=np.uint8).reshape(4, 4, 3))
    save_dataset(tmp_path, ds)
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == ["p0", "p1", "p2", "p3"]
    for a, b in zip(ds, loaded):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
    assert (tmp_path / "manifest.txt").read_text().split() == ["p0", "p1", "p2", "p3"]


def test_load_dataset_missing_mask(tmp_path):
    write_image(tmp_path / "lonely.png", np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(DatasetError, match="missing mask"):
        load_dataset(tmp_path)


def test_load_dataset_label_out_of_range(tmp_path):
    write_image(tmp_path / "x.png", np.zeros((4, 4, 3), np.uint8))
    write_mask(tmp_path / "x_mask.png", np.full((4, 4), 9, np.uint8))
    with pytest.raises(DatasetError, match="label out of range"):
        load_dataset(tmp_path, num_classes=8)


def test_load_dataset_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")


def test_mask_roundtrip_literal_labels(tmp_path):
    m = np.arange(9, dtype=np.uint8).reshape(3, 3)
    write_mask(tmp_path / "m.png", m)
    assert np.array_equal(read_mask(tmp_path / "m.png"), m)


def test_derive_seed_stable_and_distinct():
    assert derive_seed(42, "episode", 0) == derive_seed(42, "episode", 0)
    assert derive_seed(42, "episode", 0) != derive_seed(42, "episode", 1)
    assert derive_seed(42, "a") != derive_seed(43, "a")

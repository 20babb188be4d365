import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segforge.core import Sample
from segforge.dli import (
    InjectionConfig,
    count_batch_classes,
    cut_paste,
    dilate_mask,
    harvest_defect_free,
    inject_batch,
    poisson_clone,
    select_minority_class,
)

S = 24


def _free(sid, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(rng.integers(60, 120, (S, S, 3), dtype=np.uint8), np.zeros((S, S), np.uint8), sid)


def _defect(sid, labels, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.integers(60, 120, (S, S, 3), dtype=np.uint8)
    mask = np.zeros((S, S), np.uint8)
    for i, c in enumerate(labels):
        mask[6 + 4 * i:9 + 4 * i, 8:14] = c
        img[6 + 4 * i:9 + 4 * i, 8:14] = (40 * c) % 256
    return Sample(img, mask, sid)


def _sources(classes):
    return [_defect(f"src{c}", [c], seed=c) for c in classes]


def replay(batch, classes):
    """Independent oracle: argmin over presence counts, recount after every step."""
    counts = {c: 0 for c in classes}
    for s in batch:
        for c in set(np.unique(s.mask).tolist()) - {0}:
            counts[c] = counts.get(c, 0) + 1
    seq = []
    for s in batch:
        if s.mask.any():
            continue
        best = min(sorted(classes), key=lambda c: counts[c])
        seq.append(best)
        counts[best] += 1
    return seq


# -- counting and selection --------------------------------------------------

def test_count_batch_classes_example():
    batch = [_defect("a", [1]), _defect("b", [1]), _defect("c", [2])]
    assert count_batch_classes(batch, 8).counts == {1: 2, 2: 1, 3: 0, 4: 0, 5: 0, 6: 0, 7: 0, 8: 0}
    assert count_batch_classes([_free("x"), _free("y")]).total == 0


def test_select_minority_examples():
    assert select_minority_class({1: 3, 2: 0, 5: 0}, [1, 2, 5]) == 2
    assert select_minority_class({1: 4, 2: 4, 3: 4}, [3, 2]) == 2
    assert select_minority_class({1: 9}, [1]) == 1
    with pytest.raises(ValueError):
        select_minority_class({}, [])


# -- harvesting --------------------------------------------------------------

def test_harvest_fully_labelled_gives_nothing():
    full = Sample(np.zeros((S, S, 3), np.uint8), np.ones((S, S), np.uint8), "full")
    assert harvest_defect_free([full], sizes=[(8, 8)], attempts=10) == []


def test_harvest_background_sample_gives_patch():
    patches = harvest_defect_free([_free("bg")], sizes=[(10, 10), (8, 8)], attempts=1, seed=3)
    assert len(patches) == 1 and not patches[0].mask.any()
    again = harvest_defect_free([_free("bg")], sizes=[(10, 10), (8, 8)], attempts=1, seed=3)
    assert patches[0].id == again[0].id


def test_harvest_skips_oversized():
    assert harvest_defect_free([_free("bg")], sizes=[(100, 100)]) == []


# -- cut-paste ---------------------------------------------------------------

def test_cut_paste_boundaries():
    target = _free("t", 1).image
    d = _defect("d", [2], 2)
    empty = d.replace(mask=np.zeros((S, S), np.uint8))
    assert np.array_equal(cut_paste(empty, target).image, target)
    full = d.replace(mask=np.ones((S, S), np.uint8))
    assert np.array_equal(cut_paste(full, target).image, d.image)


def test_cut_paste_checkerboard_and_idempotent():
    target = _free("t", 3).image
    d = _defect("d", [1], 4)
    checker = (np.indices((S, S)).sum(axis=0) % 2).astype(np.uint8) * 3
    d = d.replace(mask=checker)
    out = cut_paste(d, target)
    sel = checker != 0
    assert np.array_equal(out.image[sel], d.image[sel])
    assert np.array_equal(out.image[~sel], target[~sel])
    assert np.array_equal(out.mask, checker)
    assert np.array_equal(cut_paste(d, out.image).image, out.image)


def test_cut_paste_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        cut_paste(_defect("d", [1]), np.zeros((5, 5, 3), np.uint8))


# -- Poisson clone -----------------------------------------------------------

def test_dilate_never_shrinks():
    m = np.zeros((9, 9), np.uint8)
    m[4, 4] = 6
    d = dilate_mask(m, 3)
    assert (d == 6).sum() == 9 and np.all(d[m != 0] == m[m != 0])


def test_poisson_clone_contract():
    target = _free("t", 5).image
    d = _defect("d", [4], 6)
    out = poisson_clone(d, target, InjectionConfig())
    dil = dilate_mask(d.mask, 3)
    assert np.array_equal(out.mask, dil)
    assert np.count_nonzero(out.mask) >= np.count_nonzero(d.mask)
    outside = dil == 0
    assert np.array_equal(out.image[outside], target[outside])


def test_poisson_clone_flat_defect_is_harmonic_fill():
    target = np.full((S, S, 3), 90, np.uint8)
    flat = Sample(np.full((S, S, 3), 200, np.uint8), _defect("d", [1]).mask, "d")
    out = poisson_clone(flat, target)
    assert np.all(np.abs(out.image.astype(int) - 90) <= 1)


def test_poisson_clone_empty_mask():
    with pytest.raises(ValueError, match="empty"):
        poisson_clone(_free("d"), _free("t").image)


# -- batch injection ---------------------------------------------------------

def test_no_defect_free_no_injection():
    batch = [_defect("a", [1]), _defect("b", [2])]
    res = inject_batch(batch, _sources([1, 2]))
    assert res.records == [] and [s.id for s in res.batch] == ["a", "b"]
    assert all(x is y for x, y in zip(res.batch, batch))


def test_four_free_two_classes_alternate():
    batch = [_free(f"f{i}", i) for i in range(4)]
    res = inject_batch(batch, _sources([1, 2]), seed=0)
    assert [r.cls for r in res.records] == [1, 2, 1, 2]
    assert all(s.mask.any() for s in res.batch)


@pytest.mark.parametrize("p, method", [(0.0, "cut_paste"), (1.0, "poisson")])
def test_degenerate_probabilities(p, method):
    batch = [_free(f"f{i}", i) for i in range(3)] + [_defect("d", [3])]
    res = inject_batch(batch, _sources([1, 2, 3]), InjectionConfig(p_poisson=p))
    assert {r.method for r in res.records} == {method}


def test_missing_class_skipped_with_warning(caplog):
    batch = [_free("f0"), _free("f1")]
    with caplog.at_level(logging.WARNING):
        res = inject_batch(batch, _sources([2]), num_classes=3)
    assert [r.cls for r in res.records] == [2, 2]
    assert "no single-class source" in caplog.text


def test_multi_label_sources_are_not_used():
    batch = [_free("f0")]
    res = inject_batch(batch, [_defect("mix", [1, 2]), _defect("only2", [2])], num_classes=2)
    assert res.records[0].source_id == "only2"


def test_injection_deterministic():
    batch = [_free(f"f{i}", i) for i in range(3)]
    a = inject_batch(batch, _sources([1, 2]), seed=9)
    b = inject_batch(batch, _sources([1, 2]), seed=9)
    assert a.records == b.records
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a.batch, b.batch))


def test_config_validation():
    with pytest.raises(ValueError):
        InjectionConfig(p_poisson=1.5)
    with pytest.raises(ValueError):
        InjectionConfig(mask_dilation_kernel=2)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sets(st.integers(1, 4), max_size=2), min_size=1, max_size=8), st.integers(0, 10**6))
def test_minority_targeting_matches_replay(label_sets, seed):
    batch = []
    for i, labels in enumerate(label_sets):
        batch.append(_defect(f"b{i}", sorted(labels), i) if labels else _free(f"b{i}", i))
    res = inject_batch(batch, _sources([1, 2, 3, 4]), InjectionConfig(p_poisson=0.0), seed=seed)
    assert [r.cls for r in res.records] == replay(batch, [1, 2, 3, 4])
    assert all(s.mask.any() for s in res.batch)

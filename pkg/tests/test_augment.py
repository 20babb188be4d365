import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fixtures import make_dataset
from segforge.augment import (
    PHOTOMETRIC,
    STANDARD_PIPELINE,
    Fraction,
    MaxSamples,
    TransformSpec,
    apply_geometric,
    apply_photometric,
    downsample_majority,
    equalize_histogram,
    load_pipeline,
    mix_samples,
    rotation_map,
    run_pipeline,
    standard_pipeline,
)
from segforge.core import Sample, class_distribution


def _rand_sample(seed, h=20, w=24, labels=(0, 5), sid="r"):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    mask = rng.choice(np.array(labels, np.uint8), size=(h, w))
    return Sample(img, mask, sid)


# -- specs -------------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        TransformSpec("rotate", {"deg": -180})
    with pytest.raises(ValueError):
        TransformSpec("gaussian_noise", {"stddev": -1})
    with pytest.raises(ValueError):
        TransformSpec("nope")
    assert TransformSpec("rotate", {"deg": 180}).params["deg"] == 180
    assert TransformSpec("elastic").params == {"alpha": 34.0, "sigma": 4.0}


def test_standard_pipeline_contents():
    kinds = [(s.kind, s.params.get("deg")) for s in STANDARD_PIPELINE]
    assert kinds == [("hflip", None), ("rotate", 30.0), ("rotate", 50.0),
                     ("perspective", None), ("elastic", None), ("histogram_eq", None)]


def test_load_pipeline_formats(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps([{"kind": "rotate", "deg": 10}]))
    (tmp_path / "b.json").write_text(json.dumps({"transforms": [{"kind": "hflip"}]}))
    assert load_pipeline(tmp_path / "a.json")[0].params["deg"] == 10
    assert load_pipeline(tmp_path / "b.json")[0].kind == "hflip"


# -- geometric ---------------------------------------------------------------

def test_hflip_involution():
    s = _rand_sample(0)
    spec = TransformSpec("hflip")
    twice = apply_geometric(spec, apply_geometric(spec, s))
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)


def test_rotate_zero_identity():
    s = _rand_sample(1)
    out = apply_geometric(TransformSpec("rotate", {"deg": 0}), s)
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_rotate_90_matches_rot90():
    s = _rand_sample(2, 16, 16)
    out = apply_geometric(TransformSpec("rotate", {"deg": 90}), s)
    assert np.array_equal(out.mask, np.rot90(s.mask))
    assert np.array_equal(out.image, np.rot90(s.image))


def test_rotate_30_label_subset():
    s = _rand_sample(3, labels=(0, 5))
    out = apply_geometric(TransformSpec("rotate", {"deg": 30}), s)
    assert set(np.unique(out.mask)) <= {0, 5}
    assert out.image.shape == s.image.shape
    assert np.all(out.image[0, 0] == 0) and out.mask[0, 0] == 0  # corner falls outside the source


def test_crop_larger_than_source():
    with pytest.raises(ValueError, match="larger"):
        apply_geometric(TransformSpec("random_crop", {"h": 50, "w": 5}), _rand_sample(4))


def test_crop_is_a_window():
    s = _rand_sample(5)
    out = apply_geometric(TransformSpec("random_crop", {"h": 8, "w": 10}), s, seed=3)
    hits = [(y, x) for y in range(13) for x in range(15)
            if np.array_equal(s.mask[y:y + 8, x:x + 10], out.mask)
            and np.array_equal(s.image[y:y + 8, x:x + 10], out.image)]
    assert hits


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 10**6),
    st.sampled_from(["hflip", "vflip", "rotate", "perspective", "elastic", "random_crop"]),
    st.floats(-179, 180),
)
def test_geometric_label_containment(seed, kind, deg):
    rng = np.random.default_rng(seed)
    labels = tuple(sorted({0, *rng.choice(np.arange(1, 9), size=2).tolist()}))
    s = _rand_sample(seed, 12, 14, labels)
    params = {"deg": deg} if kind == "rotate" else {"h": 6, "w": 7} if kind == "random_crop" else {}
    out = apply_geometric(TransformSpec(kind, params), s, seed=seed)
    assert set(np.unique(out.mask).tolist()) <= set(np.unique(s.mask).tolist()) | {0}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-179, 180))
def test_rotation_preimage_soundness(seed, deg):
    s = _rand_sample(seed, 12, 12, (0, 1, 2, 3))
    out = apply_geometric(TransformSpec("rotate", {"deg": deg}), s)
    sy, sx = rotation_map(12, 12, deg)
    iy, ix = np.rint(sy).astype(int), np.rint(sx).astype(int)
    inside = (iy >= 0) & (iy < 12) & (ix >= 0) & (ix < 12)
    nz = out.mask != 0
    assert np.all(inside[nz])
    assert np.array_equal(out.mask[nz], s.mask[iy[nz], ix[nz]])


# -- photometric -------------------------------------------------------------

def test_equalize_constant_image():
    img = np.full((5, 5, 3), 77, np.uint8)
    assert np.array_equal(equalize_histogram(img), img)


def test_noise_zero_identity():
    s = _rand_sample(6)
    out = apply_photometric(TransformSpec("gaussian_noise", {"stddev": 0}), s)
    assert np.array_equal(out.image, s.image)


@pytest.mark.parametrize("kind", sorted(PHOTOMETRIC))
def test_photometric_never_touches_mask(kind):
    s = _rand_sample(7, labels=(0, 1, 2, 8))
    before = s.mask.tobytes()
    out = apply_photometric(TransformSpec(kind), s, seed=1)
    assert out.mask.tobytes() == before
    assert out.image.dtype == np.uint8 and out.image.shape == s.image.shape


# -- mixing ------------------------------------------------------------------

def test_cutmix_boundaries():
    a, b = _rand_sample(8, sid="a"), _rand_sample(9, sid="b", labels=(0, 3))
    full = mix_samples(TransformSpec("cutmix", {"region": (0, 0, 20, 24)}), a, b)
    assert np.array_equal(full.image, b.image) and np.array_equal(full.mask, b.mask)
    empty = mix_samples(TransformSpec("cutmix", {"region": (0, 0, 0, 0)}), a, b)
    assert np.array_equal(empty.image, a.image) and np.array_equal(empty.mask, a.mask)


def test_cutmix_quarter():
    a = Sample(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), np.uint8), "a")
    b = Sample(np.full((8, 8, 3), 200, np.uint8), np.full((8, 8), 4, np.uint8), "b")
    out = mix_samples(TransformSpec("cutmix", {"region": (4, 0, 4, 4)}), a, b)
    from_b = np.all(out.image == 200, axis=-1)
    assert from_b.sum() == 16 and from_b[4:, :4].all()
    assert np.array_equal(from_b, out.mask == 4)


def test_mix_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        mix_samples(TransformSpec("mixup"), _rand_sample(0), _rand_sample(1, 10, 10))


def test_mixup_keeps_dominant_mask():
    a, b = _rand_sample(10, sid="a"), _rand_sample(11, sid="b", labels=(0, 7))
    assert np.array_equal(mix_samples(TransformSpec("mixup", {"lam": 0.7}), a, b).mask, a.mask)
    assert np.array_equal(mix_samples(TransformSpec("mixup", {"lam": 0.2}), a, b).mask, b.mask)


# -- pipelines ---------------------------------------------------------------

def test_standard_pipeline_sevenfold_and_unique_ids():
    ds = make_dataset(10, seed=1, size=32)
    out = standard_pipeline(ds, seed=42)
    assert len(out) == 70
    assert len({s.id for s in out}) == 70


def test_standard_pipeline_deterministic_and_job_independent():
    ds = make_dataset(4, seed=2, size=32)
    a = standard_pipeline(ds, seed=5)
    b = standard_pipeline(ds, seed=5, jobs=4)
    assert [s.id for s in a] == [s.id for s in b]
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))


def test_single_transform_doubles():
    ds = make_dataset(3, seed=3, size=16)
    assert len(run_pipeline(ds, [TransformSpec("vflip")])) == 6


# -- downsampling ------------------------------------------------------------

def _label_dataset(counts):
    out = []
    for c, n in counts.items():
        for i in range(n):
            m = np.zeros((2, 2), np.uint8)
            m[0, 0] = c
            out.append(Sample(np.zeros((2, 2, 1), np.uint8), m, f"c{c}_{i:04d}"))
    return out


def test_max_samples_cap():
    ds = _label_dataset({1: 800, 2: 100})
    out = downsample_majority(ds, MaxSamples(500), seed=1)
    assert class_distribution(out).counts == {1: 500, 2: 100}


def test_identity_policies():
    ds = _label_dataset({1: 30, 2: 5})
    assert len(downsample_majority(ds, MaxSamples(math.inf))) == 35
    assert len(downsample_majority(ds, Fraction(1.0))) == 35


def test_prefer_similar_respects_cap_and_minorities():
    rng = np.random.default_rng(4)
    ds = _label_dataset({1: 40, 2: 6})
    ds = [x.replace(image=rng.integers(0, 256, (16, 18, 1), dtype=np.uint8), mask=np.pad(x.mask, ((0, 14), (0, 16))))
          for x in ds]
    out = downsample_majority(ds, MaxSamples(10), seed=3, prefer_similar=True)
    assert class_distribution(out).counts == {1: 10, 2: 6}
    again = downsample_majority(ds, MaxSamples(10), seed=3, prefer_similar=True)
    assert [s.id for s in out] == [s.id for s in again]

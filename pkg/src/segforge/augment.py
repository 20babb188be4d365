"""Joint image/mask augmentation.

Geometric transforms move image and mask through the same inverse map; the
image is resampled bilinearly, the mask with nearest neighbour so no label is
ever invented. Out-of-canvas pixels become black in the image and background
in the mask. Photometric transforms never touch the mask.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .core import DEFAULT_SEED, Sample, class_distribution, rng_for

log = logging.getLogger(__name__)

GEOMETRIC = frozenset({"hflip", "vflip", "rotate", "perspective", "elastic", "random_crop"})
PHOTOMETRIC = frozenset({
    "histogram_eq", "gaussian_noise", "gaussian_blur", "sharpen", "shadow",
    "highlight", "color_jitter", "channel_emphasis",
})
MIXING = frozenset({"mixup", "cutmix"})

_DEFAULTS: dict[str, dict[str, Any]] = {
    "hflip": {},
    "vflip": {},
    "rotate": {"deg": 30.0},
    "perspective": {"strength": 0.1},
    "elastic": {"alpha": 34.0, "sigma": 4.0},
    "random_crop": {"h": None, "w": None},
    "histogram_eq": {},
    "gaussian_noise": {"stddev": 10.0},
    "gaussian_blur": {"radius": 1.0},
    "sharpen": {"amount": 1.0},
    "shadow": {"pattern": "linear", "strength": 0.5},
    "highlight": {"pattern": "radial", "strength": 0.5},
    "color_jitter": {"brightness": 0.2, "contrast": 0.2, "saturation": 0.2},
    "channel_emphasis": {"channel": 0, "factor": 1.5},
    "mixup": {"lam": 0.5},
    "cutmix": {"region": None, "lam": 0.25},
}


@dataclass(frozen=True)
class TransformSpec:
    """One augmentation step: a kind plus its parameters."""

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in _DEFAULTS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged = {**_DEFAULTS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        p = merged
        if self.kind == "rotate" and not -180.0 < float(p["deg"]) <= 180.0:
            raise ValueError(f"rotate: deg must be in (-180, 180], got {p['deg']}")
        for key in ("stddev", "strength", "radius", "alpha", "sigma", "amount"):
            if key in p and p[key] is not None and float(p[key]) < 0:
                raise ValueError(f"{self.kind}: {key} must be >= 0")
        if self.kind in ("shadow", "highlight") and p["pattern"] not in ("linear", "radial"):
            raise ValueError(f"{self.kind}: pattern must be 'linear' or 'radial'")
        if self.kind == "mixup" and not 0.0 <= float(p["lam"]) <= 1.0:
            raise ValueError("mixup: lam must be in [0, 1]")

    @property
    def geometric(self) -> bool:
        return self.kind in GEOMETRIC

    @property
    def mixing(self) -> bool:
        return self.kind in MIXING

    @property
    def tag(self) -> str:
        """Short suffix used in ids of derived samples."""
        if self.kind == "rotate":
            return f"rot{float(self.params['deg']):g}"
        return self.kind

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TransformSpec":
        params = {k: v for k, v in data.items() if k != "kind"}
        params = params.pop("params", params)
        return cls(data["kind"], dict(params))


def load_pipeline(path: str | Path) -> list[TransformSpec]:
    """Read an ordered list of transforms from a JSON config.

    The file holds either a list of ``{"kind": ..., <params>}`` objects or an
    object with a ``"transforms"`` list.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data["transforms"]
    return [TransformSpec.from_dict(item) for item in data]


STANDARD_PIPELINE = (
    TransformSpec("hflip"),
    TransformSpec("rotate", {"deg": 30.0}),
    TransformSpec("rotate", {"deg": 50.0}),
    TransformSpec("perspective", {"strength": 0.1}),
    TransformSpec("elastic", {"alpha": 34.0, "sigma": 4.0}),
    TransformSpec("histogram_eq"),
)


# --------------------------------------------------------------------------
# geometric

def warp(sample: Sample, src_y: np.ndarray, src_x: np.ndarray) -> Sample:
    """Resample ``sample`` at the given source coordinates (one per output pixel)."""
    coords = np.stack([src_y, src_x])
    channels = [
        ndimage.map_coordinates(
            sample.image[:, :, c].astype(np.float64), coords,
            order=1, mode="constant", cval=0.0,
        )
        for c in range(sample.image.shape[2])
    ]
    image = np.clip(np.rint(np.stack(channels, axis=-1)), 0, 255).astype(np.uint8)
    mask = ndimage.map_coordinates(sample.mask, coords, order=0, mode="constant", cval=0)
    return Sample(image, mask.astype(np.uint8), sample.id)


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:h, 0:w].astype(np.float64)


def rotation_map(h: int, w: int, deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse map for a counter-clockwise rotation about the image centre."""
    yy, xx = _grid(h, w)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    dy, dx = yy - cy, xx - cx
    src_x = c * dx - s * dy + cx
    src_y = s * dx + c * dy + cy
    return _snap(src_y), _snap(src_x)


def _snap(coords: np.ndarray) -> np.ndarray:
    """Round coordinates within 1e-9 of an integer so exact grid maps stay exact."""
    r = np.rint(coords)
    return np.where(np.abs(coords - r) < 1e-9, r, coords)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping four ``src`` points (x, y) onto ``dst``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    h = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def perspective_map(h: int, w: int, strength: float, rng: np.random.Generator):
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    jitter = rng.uniform(-strength, strength, size=(4, 2)) * np.array([w, h])
    # output corners map back onto jittered source corners
    H = homography(corners, corners + jitter)
    yy, xx = _grid(h, w)
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)])
    sx, sy, sw = H @ pts
    return (sy / sw).reshape(h, w), (sx / sw).reshape(h, w)


def elastic_map(h: int, w: int, alpha: float, sigma: float, rng: np.random.Generator):
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="constant") * alpha
    yy, xx = _grid(h, w)
    return yy + dy, xx + dx


def apply_geometric(spec: TransformSpec, sample: Sample, seed: int = DEFAULT_SEED) -> Sample:
    if not spec.geometric:
        raise ValueError(f"{spec.kind} is not a geometric transform")
    p = spec.params
    h, w = sample.shape
    rng = rng_for(seed, sample.id, spec.kind)

    if spec.kind == "hflip":
        return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.id)
    if spec.kind == "vflip":
        return Sample(sample.image[::-1].copy(), sample.mask[::-1].copy(), sample.id)
    if spec.kind == "random_crop":
        ch = int(p["h"] if p["h"] is not None else h)
        cw = int(p["w"] if p["w"] is not None else w)
        if ch > h or cw > w or ch < 1 or cw < 1:
            raise ValueError(f"crop {ch}x{cw} larger than source {h}x{w}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        return Sample(
            sample.image[y0:y0 + ch, x0:x0 + cw].copy(),
            sample.mask[y0:y0 + ch, x0:x0 + cw].copy(),
            sample.id,
        )
    if spec.kind == "rotate":
        deg = float(p["deg"])
        if deg == 0.0:
            return Sample(sample.image.copy(), sample.mask.copy(), sample.id)
        return warp(sample, *rotation_map(h, w, deg))
    if spec.kind == "perspective":
        return warp(sample, *perspective_map(h, w, float(p["strength"]), rng))
    if spec.kind == "elastic":
        return warp(sample, *elastic_map(h, w, float(p["alpha"]), float(p["sigma"]), rng))
    raise AssertionError(spec.kind)


# --------------------------------------------------------------------------
# photometric

def equalize_histogram(image: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization of a uint8 image."""
    out = np.empty_like(image)
    for c in range(image.shape[2]):
        chan = image[:, :, c]
        hist = np.bincount(chan.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        cdf_min = cdf[hist > 0][0]
        total = chan.size
        if total == cdf_min:
            out[:, :, c] = chan
            continue
        lut = np.rint((cdf - cdf_min) / (total - cdf_min) * 255.0)
        out[:, :, c] = np.clip(lut, 0, 255).astype(np.uint8)[chan]
    return out


def _ramp(h: int, w: int, pattern: str, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(h, w)
    if pattern == "linear":
        angle = rng.uniform(0, 2 * math.pi)
        proj = math.cos(angle) * xx / max(w - 1, 1) + math.sin(angle) * yy / max(h - 1, 1)
        lo, hi = proj.min(), proj.max()
        return (proj - lo) / (hi - lo) if hi > lo else np.zeros_like(proj)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    radius = rng.uniform(0.25, 0.75) * max(h, w)
    d = np.hypot(yy - cy, xx - cx)
    return np.clip(1.0 - d / radius, 0.0, 1.0)


def apply_photometric(spec: TransformSpec, sample: Sample, seed: int = DEFAULT_SEED) -> Sample:
    if spec.geometric or spec.mixing:
        raise ValueError(f"{spec.kind} is not a photometric transform")
    p = spec.params
    rng = rng_for(seed, sample.id, spec.kind)
    img = sample.image.astype(np.float64)
    h, w = sample.shape

    if spec.kind == "histogram_eq":
        out = equalize_histogram(sample.image)
        return Sample(out, sample.mask.copy(), sample.id)
    if spec.kind == "gaussian_noise":
        stddev = float(p["stddev"])
        if stddev == 0.0:
            return Sample(sample.image.copy(), sample.mask.copy(), sample.id)
        img = img + rng.normal(0.0, stddev, size=img.shape)
    elif spec.kind == "gaussian_blur":
        radius = float(p["radius"])
        img = ndimage.gaussian_filter(img, sigma=(radius, radius, 0), mode="nearest")
    elif spec.kind == "sharpen":
        blurred = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0), mode="nearest")
        img = img + float(p["amount"]) * (img - blurred)
    elif spec.kind == "shadow":
        ramp = _ramp(h, w, p["pattern"], rng)[:, :, None]
        img = img * (1.0 - float(p["strength"]) * ramp)
    elif spec.kind == "highlight":
        ramp = _ramp(h, w, p["pattern"], rng)[:, :, None]
        img = img + (255.0 - img) * float(p["strength"]) * ramp
    elif spec.kind == "color_jitter":
        b = 1.0 + rng.uniform(-p["brightness"], p["brightness"])
        c = 1.0 + rng.uniform(-p["contrast"], p["contrast"])
        s = 1.0 + rng.uniform(-p["saturation"], p["saturation"])
        img = img * b
        img = (img - img.mean()) * c + img.mean()
        if img.shape[2] == 3:
            gray = img.mean(axis=2, keepdims=True)
            img = gray + (img - gray) * s
    elif spec.kind == "channel_emphasis":
        ch = int(p["channel"])
        if img.shape[2] == 3:
            img[:, :, ch] *= float(p["factor"])
        else:
            img *= float(p["factor"])
    else:
        raise AssertionError(spec.kind)
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(out, sample.mask.copy(), sample.id)


# --------------------------------------------------------------------------
# mixing

def _match_channels(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[2] == y.shape[2]:
        return x, y
    if x.shape[2] == 1:
        return np.repeat(x, 3, axis=2), y
    return x, np.repeat(y, 3, axis=2)


def mix_samples(spec: TransformSpec, a: Sample, b: Sample, seed: int = DEFAULT_SEED) -> Sample:
    """CutMix or Mixup of two equally sized samples.

    CutMix ``region`` is ``(top, left, height, width)``; when absent a random
    box covering ``lam`` of the area is drawn. Mixup keeps the mask of the
    dominant sample (``lam >= 0.5`` keeps ``a``'s).
    """
    if not spec.mixing:
        raise ValueError(f"{spec.kind} is not a mixing transform")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    a_img, img_b = _match_channels(a.image, b.image)
    p = spec.params

    if spec.kind == "mixup":
        lam = float(p["lam"])
        mixed = lam * a_img.astype(np.float64) + (1.0 - lam) * img_b.astype(np.float64)
        image = np.clip(np.rint(mixed), 0, 255).astype(np.uint8)
        mask = a.mask if lam >= 0.5 else b.mask
        return Sample(image, mask.copy(), a.id)

    h, w = a.shape
    if p["region"] is not None:
        top, left, rh, rw = (int(v) for v in p["region"])
    else:
        rng = rng_for(seed, a.id, b.id, spec.kind)
        frac = math.sqrt(float(p["lam"]))
        rh, rw = int(round(h * frac)), int(round(w * frac))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
    top, left = max(top, 0), max(left, 0)
    bottom, right = min(top + max(rh, 0), h), min(left + max(rw, 0), w)
    image = a_img.copy()
    mask = a.mask.copy()
    image[top:bottom, left:right] = img_b[top:bottom, left:right]
    mask[top:bottom, left:right] = b.mask[top:bottom, left:right]
    return Sample(image, mask, a.id)


def apply_transform(
    spec: TransformSpec,
    sample: Sample,
    seed: int = DEFAULT_SEED,
    partner: Sample | None = None,
) -> Sample:
    if spec.geometric:
        return apply_geometric(spec, sample, seed)
    if spec.mixing:
        if partner is None:
            raise ValueError(f"{spec.kind} needs a partner sample")
        return mix_samples(spec, sample, partner, seed)
    return apply_photometric(spec, sample, seed)


# --------------------------------------------------------------------------
# pipelines

def run_pipeline(
    dataset: Sequence[Sample],
    specs: Sequence[TransformSpec],
    seed: int = DEFAULT_SEED,
    jobs: int = 1,
) -> list[Sample]:
    """Return each original followed by one variant per spec.

    Variant ids are ``<id>__<tag>`` (suffixed with the spec index on tag
    collisions). Mixing partners are drawn from same-sized samples.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    tags = [s.tag for s in specs]
    if len(set(tags)) != len(tags):
        tags = [f"{t}{i}" for i, t in enumerate(tags)]

    def variants(sample: Sample) -> list[Sample]:
        out = [sample]
        for spec, tag in zip(specs, tags):
            partner = None
            if spec.mixing:
                pool = [s for s in dataset if s.shape == sample.shape and s.id != sample.id]
                if not pool:
                    pool = [sample]
                pick = rng_for(seed, sample.id, tag, "partner").integers(len(pool))
                partner = pool[int(pick)]
            res = apply_transform(spec, sample, seed, partner)
            out.append(res.replace(id=f"{sample.id}__{tag}"))
        return out

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            groups = list(pool.map(variants, dataset))
    else:
        groups = [variants(s) for s in dataset]
    return [s for group in groups for s in group]


def standard_pipeline(dataset: Sequence[Sample], seed: int = DEFAULT_SEED, jobs: int = 1) -> list[Sample]:
    """Original plus hflip, rotate 30/50, perspective, elastic and histogram equalization."""
    return run_pipeline(dataset, STANDARD_PIPELINE, seed, jobs)


# --------------------------------------------------------------------------
# class-imbalance downsampling

@dataclass(frozen=True)
class MaxSamples:
    n: float  # math.inf allowed


@dataclass(frozen=True)
class Fraction:
    f: float


def downsample_majority(
    dataset: Sequence[Sample],
    policy: MaxSamples | Fraction,
    seed: int = DEFAULT_SEED,
    majority_classes: Sequence[int] | None = None,
    prefer_similar: bool = False,
) -> list[Sample]:
    """Remove samples of majority classes until each meets ``policy``.

    Majority classes default to those above the cap (``MaxSamples``) or above
    the mean presence count (``Fraction``). Only samples free of every other
    class are removal candidates, so minority classes keep all their samples.
    With ``prefer_similar`` the candidate whose hash is closest to another
    remaining candidate goes first; otherwise candidates are drawn at random.
    """
    dist = class_distribution(dataset)
    if isinstance(policy, MaxSamples):
        if policy.n < 0:
            raise ValueError("max samples must be >= 0")
        if majority_classes is None:
            majority_classes = [c for c, n in dist.counts.items() if n > policy.n]
        targets = {c: policy.n for c in majority_classes}
    elif isinstance(policy, Fraction):
        if not 0.0 < policy.f <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        if majority_classes is None:
            counts = list(dist.counts.values())
            mean = sum(counts) / len(counts) if counts else 0.0
            majority_classes = [c for c, n in dist.counts.items() if n > mean]
        targets = {c: math.ceil(policy.f * dist[c] - 1e-9) for c in majority_classes}
    else:
        raise TypeError(f"unknown policy {policy!r}")

    majority = set(targets)
    alive = list(range(len(dataset)))
    labels = [dataset[i].labels() for i in alive]
    rng = rng_for(seed, "downsample")

    hashes = None
    if prefer_similar:
        from .dedup import hash_image

        hashes = np.array([hash_image(s.image) for s in dataset], dtype=np.uint64)

    removed: set[int] = set()
    for c in sorted(targets, key=lambda c: (-dist[c], c)):
        count = sum(1 for i in alive if i not in removed and c in labels[i])
        while count > targets[c]:
            cands = [
                i for i in alive
                if i not in removed and c in labels[i] and labels[i] <= majority
            ]
            if not cands:
                log.warning("class %d: cannot reach %s without touching minority classes", c, targets[c])
                break
            if hashes is not None and len(cands) > 1:
                sub = hashes[cands]
                d = np.bitwise_count(sub[:, None] ^ sub[None, :]).astype(np.int64)
                np.fill_diagonal(d, 65)
                nearest = d.min(axis=1)
                best = np.flatnonzero(nearest == nearest.min())
                pick = cands[int(best[rng.integers(len(best))])]
            else:
                pick = cands[int(rng.integers(len(cands)))]
            removed.add(pick)
            count -= 1
    return [s for i, s in enumerate(dataset) if i not in removed]

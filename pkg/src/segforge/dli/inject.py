"""Online batch balancing by injecting minority-class defects.

For each defect-free sample of a batch, in order: recount class presence in
the batch, take the rarest class (lowest label on ties), pick a source sample
showing only that class, jitter it, and paste it into the defect-free image by
cut-paste or Poisson cloning.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from ..core import DEFAULT_SEED, ClassDistribution, Sample, class_distribution, rng_for
from .poisson import PoissonSystem, solve_poisson

log = logging.getLogger(__name__)

# Shipped per-class jitter ranges are arbitrary defaults, not tuned values.
DEFAULT_DEFECT_TRANSFORMS: dict[str, Any] = {
    "hflip": 0.5,         # probability
    "rotate": 15.0,       # max |degrees|
    "translate": 0.1,     # max shift as a fraction of each side
    "scale": (0.8, 1.2),  # zoom range
}


@dataclass
class InjectionConfig:
    p_poisson: float = 0.5
    per_class_transforms: dict[int, dict[str, Any]] = field(default_factory=dict)
    mask_dilation_kernel: int = 3
    solver: dict[str, Any] = field(default_factory=dict)  # forwarded to solve_poisson

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_poisson <= 1.0:
            raise ValueError(f"p_poisson must be in [0, 1], got {self.p_poisson}")
        k = self.mask_dilation_kernel
        if k < 1 or k % 2 == 0:
            raise ValueError(f"mask_dilation_kernel must be odd and >= 1, got {k}")

    def transforms_for(self, label: int) -> dict[str, Any]:
        return {**DEFAULT_DEFECT_TRANSFORMS, **self.per_class_transforms.get(label, {})}


@dataclass(frozen=True)
class InjectionRecord:
    sample_id: str
    cls: int
    method: str  # "poisson" or "cut_paste"
    source_id: str


@dataclass
class InjectionResult:
    batch: list[Sample]
    records: list[InjectionRecord] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # defect-free ids left untouched


def count_batch_classes(batch: Sequence[Sample], num_classes: int | None = None) -> ClassDistribution:
    if not batch:
        raise ValueError("batch is empty")
    return class_distribution(batch, num_classes)


def defect_free_indices(batch: Sequence[Sample]) -> list[int]:
    return [i for i, s in enumerate(batch) if s.is_defect_free]


def select_minority_class(dist: ClassDistribution | Mapping[int, int], eligible: Iterable[int]) -> int:
    """Lowest label among the eligible classes with the smallest count."""
    counts = dist.counts if isinstance(dist, ClassDistribution) else dist
    eligible = list(eligible)
    if not eligible:
        raise ValueError("no eligible classes")
    return min(eligible, key=lambda c: (counts.get(c, 0), c))


def harvest_defect_free(
    dataset: Sequence[Sample],
    sizes: Sequence[tuple[int, int]] = ((100, 100), (90, 90), (80, 80)),
    attempts: int = 10,
    seed: int = DEFAULT_SEED,
) -> list[Sample]:
    """Random crops whose masks are entirely background.

    Each sample gets up to ``attempts`` draws of (size, position); the first
    all-background crop is kept, so at most one patch per sample. Sizes
    larger than a sample are never drawn for it.
    """
    found: list[Sample] = []
    for sample in dataset:
        h, w = sample.shape
        fitting = [(ch, cw) for ch, cw in sizes if ch <= h and cw <= w]
        if not fitting:
            continue
        rng = rng_for(seed, sample.id, "harvest")
        for _ in range(attempts):
            ch, cw = fitting[int(rng.integers(len(fitting)))]
            y = int(rng.integers(0, h - ch + 1))
            x = int(rng.integers(0, w - cw + 1))
            crop = sample.mask[y:y + ch, x:x + cw]
            if not crop.any():
                found.append(Sample(
                    sample.image[y:y + ch, x:x + cw].copy(),
                    crop.copy(),
                    f"{sample.id}__free{ch}x{cw}_{y}_{x}",
                ))
                break
    return found


def _match_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if image.shape[2] == channels:
        return image
    if channels == 3:
        return np.repeat(image, 3, axis=2)
    return np.rint(image.astype(np.float64).mean(axis=2, keepdims=True)).astype(np.uint8)


def _check_pair(defect: Sample, target_image: np.ndarray) -> np.ndarray:
    target = np.asarray(target_image)
    if target.ndim == 2:
        target = target[:, :, None]
    if target.shape[:2] != defect.shape:
        raise ValueError(f"dimension mismatch: defect {defect.shape} vs target {target.shape[:2]}")
    return target


def cut_paste(defect: Sample, target_image: np.ndarray, sample_id: str | None = None) -> Sample:
    """Copy defect pixels (mask != 0) onto the target; the mask is the defect's."""
    target = _check_pair(defect, target_image)
    src = _match_channels(defect.image, target.shape[2])
    sel = defect.mask != 0
    out = target.copy()
    out[sel] = src[sel]
    return Sample(out, defect.mask.copy(), sample_id or defect.id)


def dilate_mask(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Max-pool a label mask with a ``kernel x kernel`` window (stride 1, same size)."""
    if kernel == 1:
        return mask.copy()
    return ndimage.maximum_filter(mask, size=kernel, mode="constant", cval=0)


def poisson_clone(
    defect: Sample,
    target_image: np.ndarray,
    config: InjectionConfig | None = None,
    sample_id: str | None = None,
) -> Sample:
    """Seamlessly blend the (dilated) defect region into the target.

    The blend region is the max-pooled defect mask minus the outermost image
    frame; outside it the target is returned unchanged. The returned mask is
    the max-pooled defect mask.
    """
    config = config or InjectionConfig()
    target = _check_pair(defect, target_image)
    if not defect.mask.any():
        raise ValueError("defect mask is empty")
    src = _match_channels(defect.image, target.shape[2])
    mask = dilate_mask(defect.mask, config.mask_dilation_kernel)
    region = mask != 0
    region[0, :] = region[-1, :] = False
    region[:, 0] = region[:, -1] = False
    system = PoissonSystem.from_images(target, src, region)
    result = solve_poisson(system, **config.solver)
    image = np.clip(np.rint(result.image), 0, 255).astype(np.uint8)
    image[~region] = target[~region]
    return Sample(image, mask, sample_id or defect.id)


def resize_sample(sample: Sample, shape: tuple[int, int]) -> Sample:
    """Scale to ``shape``: bilinear for the image, nearest for the mask."""
    if sample.shape == tuple(shape):
        return sample
    h, w = shape
    chans = []
    for c in range(sample.image.shape[2]):
        im = Image.fromarray(np.ascontiguousarray(sample.image[:, :, c]))
        chans.append(np.array(im.resize((w, h), Image.Resampling.BILINEAR)))
    mask = Image.fromarray(np.ascontiguousarray(sample.mask)).resize((w, h), Image.Resampling.NEAREST)
    return Sample(np.stack(chans, axis=-1), np.array(mask), sample.id)


def jitter_defect(sample: Sample, params: Mapping[str, Any], rng: np.random.Generator) -> Sample:
    """Random flip, rotation, translation and scaling about the centre."""
    img, msk = sample.image, sample.mask
    if rng.random() < float(params.get("hflip", 0.0)):
        img, msk = img[:, ::-1], msk[:, ::-1]
    h, w = msk.shape
    max_rot = float(params.get("rotate", 0.0))
    deg = rng.uniform(-max_rot, max_rot) if max_rot > 0 else 0.0
    lo, hi = params.get("scale", (1.0, 1.0))
    zoom = rng.uniform(lo, hi) if hi > lo else float(lo)
    t = float(params.get("translate", 0.0))
    ty = rng.uniform(-t, t) * h if t > 0 else 0.0
    tx = rng.uniform(-t, t) * w if t > 0 else 0.0
    if deg == 0.0 and zoom == 1.0 and ty == 0.0 and tx == 0.0:
        return Sample(img.copy(), msk.copy(), sample.id)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    dy, dx = (yy - cy - ty) / zoom, (xx - cx - tx) / zoom
    coords = np.stack([s * dx + c * dy + cy, c * dx - s * dy + cx])
    chans = [
        ndimage.map_coordinates(img[:, :, k].astype(np.float64), coords, order=1, mode="constant")
        for k in range(img.shape[2])
    ]
    out_img = np.clip(np.rint(np.stack(chans, axis=-1)), 0, 255).astype(np.uint8)
    out_msk = ndimage.map_coordinates(msk, coords, order=0, mode="constant").astype(np.uint8)
    return Sample(out_img, out_msk, sample.id)


def inject_batch(
    batch: Sequence[Sample],
    source_dataset: Sequence[Sample],
    config: InjectionConfig | None = None,
    seed: int = DEFAULT_SEED,
    num_classes: int | None = None,
) -> InjectionResult:
    """Replace every defect-free sample of ``batch`` by an injected one.

    Classes are ``1..num_classes`` when given, else every label seen in the
    batch or the sources. Classes without a single-class source sample are
    skipped (logged) and the next rarest is used.
    """
    config = config or InjectionConfig()
    out = list(batch)
    free = defect_free_indices(out)
    if not free:
        return InjectionResult(out)

    sources: dict[int, list[Sample]] = {}
    for s in sorted(source_dataset, key=lambda s: s.id):
        labels = s.labels()
        if len(labels) == 1:
            sources.setdefault(next(iter(labels)), []).append(s)

    if num_classes is not None:
        universe = set(range(1, num_classes + 1))
    else:
        universe = set(sources)
        for s in out:
            universe |= s.labels()
    missing = sorted(universe - set(sources))
    if missing:
        log.warning("no single-class source sample for classes %s; skipping them", missing)
    eligible = sorted(universe & set(sources))

    records: list[InjectionRecord] = []
    skipped: list[str] = []
    rng = rng_for(seed, "inject")
    for i in free:
        target = out[i]
        if not eligible:
            skipped.append(target.id)
            continue
        dist = class_distribution(out)
        cls = select_minority_class(dist, eligible)
        pool = sources[cls]
        source = pool[int(rng.integers(len(pool)))]
        source = resize_sample(source, target.shape)
        jittered = jitter_defect(source, config.transforms_for(cls), rng)
        if not jittered.mask.any():
            jittered = source  # jitter pushed the defect off-canvas
        use_poisson = rng.random() < config.p_poisson
        if use_poisson:
            injected = poisson_clone(jittered, target.image, config, sample_id=target.id)
        else:
            injected = cut_paste(jittered, target.image, sample_id=target.id)
        out[i] = injected
        records.append(InjectionRecord(target.id, cls, "poisson" if use_poisson else "cut_paste", source.id))
    return InjectionResult(out, records, skipped)


def write_injection_report(path: str | Path, rows: Iterable[tuple[int, InjectionRecord]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["batch_idx", "sample_id", "class", "method"])
        for batch_idx, rec in rows:
            writer.writerow([batch_idx, rec.sample_id, rec.cls, rec.method])

"""Samples, dataset I/O, class accounting and deterministic splitting.

Images are ``uint8`` arrays shaped ``(H, W, C)`` with ``C`` in ``{1, 3}``.
Masks are ``uint8`` arrays shaped ``(H, W)`` holding literal class labels,
label 0 being background (defect-free).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

NUM_CLASSES = 8
DEFAULT_SEED = 42
MASK_SUFFIX = "_mask"

CLASS_NAMES = {
    0: "Background",
    1: "Cracks",
    2: "Holes",
    3: "Roots",
    4: "Deformation",
    5: "Fracture",
    6: "Erosion",
    7: "Joint Problems",
    8: "Loose Gasket",
}

# Class importance weights, already normalized to a maximum of 1.0.
DEFAULT_CIW = {
    1: 1.0000,
    2: 1.0000,
    3: 1.0000,
    4: 0.1622,
    5: 0.7100,
    6: 0.3518,
    7: 0.6419,
    8: 0.5419,
}


class DatasetError(Exception):
    """Raised for malformed or inconsistent dataset content."""


def derive_seed(master_seed: int, *parts: object) -> int:
    """Derive a 64-bit seed from a master seed and arbitrary labels.

    Used to give every (sample, transform) pair its own RNG stream so that
    results do not depend on processing order.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng_for(master_seed: int, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *parts))


def as_image(pixels: np.ndarray) -> np.ndarray:
    """Validate and normalize an image array to ``(H, W, C)`` uint8."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DatasetError(f"image must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DatasetError("image has zero size")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            if np.nanmin(arr) < 0 or np.nanmax(arr) > 255:
                raise DatasetError("float image values must lie in [0, 255]")
            arr = np.rint(arr)
        arr = arr.astype(np.uint8)
    return arr


def as_mask(labels: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Validate a label mask; labels must lie in ``0..num_classes``."""
    arr = np.asarray(labels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DatasetError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DatasetError(f"mask must have an integer dtype, got {arr.dtype}")
    if arr.size and arr.min() < 0:
        raise DatasetError("label out of range: negative label")
    if num_classes is not None and arr.size and arr.max() > num_classes:
        raise DatasetError(
            f"label out of range: {int(arr.max())} exceeds num_classes={num_classes}"
        )
    if arr.size and arr.max() > 255:
        raise DatasetError("label out of range: masks are 8-bit")
    return arr.astype(np.uint8, copy=False)


@dataclass(eq=False)
class Sample:
    """An image paired with its same-sized label mask."""

    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self) -> None:
        self.image = as_image(self.image)
        self.mask = as_mask(self.mask)
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(
                f"{self.id}: dimension mismatch, image {self.image.shape[:2]} "
                f"vs mask {self.mask.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape  # type: ignore[return-value]

    def labels(self) -> frozenset[int]:
        """Defect labels present in the mask (background excluded)."""
        present = np.flatnonzero(np.bincount(self.mask.ravel(), minlength=1))
        return frozenset(int(c) for c in present if c != 0)

    @property
    def is_defect_free(self) -> bool:
        return not self.mask.any()

    def replace(self, **changes) -> "Sample":
        values = {"image": self.image, "mask": self.mask, "id": self.id}
        values.update(changes)
        return Sample(**values)


Dataset = list  # list[Sample], kept as a plain list


@dataclass
class ClassDistribution:
    """Per-label presence counts (labels 1..C)."""

    counts: dict[int, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def proportions(self) -> dict[int, float]:
        total = self.total
        if total == 0:
            return {c: 0.0 for c in self.counts}
        return {c: n / total for c, n in self.counts.items()}

    def __getitem__(self, label: int) -> int:
        return self.counts.get(label, 0)


def class_distribution(
    dataset: Iterable[Sample], num_classes: int | None = None
) -> ClassDistribution:
    """Count, per defect label, the samples whose mask contains it."""
    counts: dict[int, int] = {}
    if num_classes is not None:
        counts = {c: 0 for c in range(1, num_classes + 1)}
    for sample in dataset:
        for c in sample.labels():
            counts[c] = counts.get(c, 0) + 1
    return ClassDistribution(dict(sorted(counts.items())))


def split_dataset(
    dataset: Sequence[Sample],
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = DEFAULT_SEED,
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Shuffle and partition into train/val/test.

    Validation and test sizes are the floor of their shares; whatever is left
    goes to train. Each returned partition is ordered by id.
    """
    if not dataset:
        raise DatasetError("cannot split an empty dataset")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    n = len(dataset)
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    n_train = n - n_val - n_test

    ordered = sorted(dataset, key=lambda s: s.id)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ordered[i] for i in perm]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    key = lambda s: s.id  # noqa: E731
    return sorted(train, key=key), sorted(val, key=key), sorted(test, key=key)


def normalize_ciw(raw_weights: Mapping[int, float]) -> dict[int, float]:
    """Divide every weight by the largest one."""
    if not raw_weights:
        raise ValueError("no weights given")
    for label, w in raw_weights.items():
        if not w > 0:
            raise ValueError(f"weight for class {label} must be positive, got {w}")
    top = max(raw_weights.values())
    return {int(c): w / top for c, w in raw_weights.items()}


def load_ciw(path: str | Path) -> dict[int, float]:
    """Read class weights from JSON.

    Accepts either a flat ``{"1": 1.0, ...}`` object or ``{"weights": {...}}``.
    Weights are normalized on load.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and "weights" in data:
        data = data["weights"]
    return normalize_ciw({int(k): float(v) for k, v in data.items()})


# --------------------------------------------------------------------------
# file I/O

def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return as_image(np.array(im))


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = as_image(image)
    if arr.shape[2] == 1:
        Image.fromarray(np.ascontiguousarray(arr[:, :, 0])).save(path, format="PNG")
    else:
        Image.fromarray(arr).save(path, format="PNG")


def read_mask(path: str | Path, num_classes: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: mask must be 8-bit single channel, got mode {im.mode}")
        arr = np.array(im)
    return as_mask(arr, num_classes)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(as_mask(mask))).save(path, format="PNG")


def read_manifest(path: str | Path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]


def write_manifest(path: str | Path, ids: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def load_sample(root: str | Path, stem: str, num_classes: int | None = None) -> Sample:
    root = Path(root)
    image_path = root / f"{stem}.png"
    mask_path = root / f"{stem}{MASK_SUFFIX}.png"
    if not image_path.is_file():
        raise DatasetError(f"missing image for {stem!r} in {root}")
    if not mask_path.is_file():
        raise DatasetError(f"missing mask for image {image_path.name}")
    image = read_image(image_path)
    try:
        mask = read_mask(mask_path, num_classes)
    except DatasetError as exc:
        raise DatasetError(f"{mask_path.name}: {exc}") from None
    return Sample(image, mask, stem)


def load_dataset(
    root: str | Path,
    num_classes: int | None = NUM_CLASSES,
    manifest: str | Path | Sequence[str] | None = None,
) -> list[Sample]:
    """Load every ``<stem>.png`` / ``<stem>_mask.png`` pair under ``root``.

    With a manifest (path or list of ids) only the listed ids are loaded.
    Samples are returned in lexicographic id order.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    if manifest is not None:
        ids = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
        stems = sorted(set(ids))
    else:
        stems = sorted(
            p.stem for p in root.glob("*.png") if not p.stem.endswith(MASK_SUFFIX)
        )
    return [load_sample(root, stem, num_classes) for stem in stems]


def save_sample(root: str | Path, sample: Sample) -> None:
    root = Path(root)
    write_image(root / f"{sample.id}.png", sample.image)
    write_mask(root / f"{sample.id}{MASK_SUFFIX}.png", sample.mask)


def save_dataset(root: str | Path, dataset: Iterable[Sample], manifest: bool = True) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for sample in dataset:
        save_sample(root, sample)
        ids.append(sample.id)
    if manifest:
        write_manifest(root / "manifest.txt", ids)

"""Near-duplicate detection between dataset partitions via difference hashing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Sample, as_image

HASH_ROWS = 8
HASH_COLS = 9  # one more than the bit width per row; adjacent columns are compared


def to_gray(image: np.ndarray) -> np.ndarray:
    """Integer Rec.601 luma, rounded half up. Returns int64 ``(H, W)``."""
    img = as_image(image).astype(np.int64)
    if img.shape[2] == 1:
        return img[:, :, 0]
    r, g, b = img[:, :, 0], img[:, :, 1], img[:, :, 2]
    return (299 * r + 587 * g + 114 * b + 500) // 1000


def _bin_edges(length: int, bins: int) -> list[tuple[int, int]]:
    edges = []
    for i in range(bins):
        start = min(i * length // bins, length - 1)
        stop = max((i + 1) * length // bins, start + 1)
        edges.append((start, stop))
    return edges


def box_downsample(gray: np.ndarray, rows: int = HASH_ROWS, cols: int = HASH_COLS) -> np.ndarray:
    """Box-filter ``gray`` to ``rows x cols`` using integer means (floor)."""
    out = np.empty((rows, cols), dtype=np.int64)
    row_edges = _bin_edges(gray.shape[0], rows)
    col_edges = _bin_edges(gray.shape[1], cols)
    for i, (r0, r1) in enumerate(row_edges):
        band = gray[r0:r1]
        for j, (c0, c1) in enumerate(col_edges):
            block = band[:, c0:c1]
            out[i, j] = int(block.sum()) // block.size
    return out


def hash_image(image: np.ndarray) -> int:
    """64-bit difference hash of an image.

    Bit ``63 - (8*row + col)`` is set when the downsampled cell at ``col`` is
    brighter than its right neighbour.
    """
    small = box_downsample(to_gray(image))
    bits = (small[:, :-1] > small[:, 1:]).ravel()
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def hamming(d1: int, d2: int) -> int:
    return (int(d1) ^ int(d2)).bit_count()


def _pairwise_hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamming distance matrix between two uint64 digest vectors."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.size, b.size), dtype=np.int64)
    return np.bitwise_count(a[:, None] ^ b[None, :]).astype(np.int64)


@dataclass(frozen=True)
class Removal:
    id: str
    nearest_id: str
    distance: int


@dataclass
class DedupResult:
    kept: list[Sample]
    removed: list[Removal] = field(default_factory=list)

    @property
    def removed_ids(self) -> set[str]:
        return {r.id for r in self.removed}


def dedup_filter(
    train: Sequence[Sample],
    test: Sequence[Sample],
    threshold: int = 7,
    intra_train: bool = False,
) -> DedupResult:
    """Drop train samples within ``threshold`` bits of any test sample.

    A train sample is removed when its minimum Hamming distance to the test
    set is ``<= threshold``; the nearest test id (ties: smallest id) is
    reported. With ``intra_train`` the retained train set is additionally
    thinned greedily in id order, a later sample being dropped when it lies
    within ``threshold`` of an earlier retained one. The test set is never
    modified.
    """
    if not 0 <= threshold <= 64:
        raise ValueError(f"threshold must be in [0, 64], got {threshold}")

    test_sorted = sorted(test, key=lambda s: s.id)
    train_hashes = np.array([hash_image(s.image) for s in train], dtype=np.uint64)
    test_hashes = np.array([hash_image(s.image) for s in test_sorted], dtype=np.uint64)
    dist = _pairwise_hamming(train_hashes, test_hashes)

    kept: list[Sample] = []
    kept_idx: list[int] = []
    removed: list[Removal] = []
    for i, sample in enumerate(train):
        if dist.shape[1]:
            j = int(np.argmin(dist[i]))  # first minimum -> smallest test id
            d = int(dist[i, j])
            if d <= threshold:
                removed.append(Removal(sample.id, test_sorted[j].id, d))
                continue
        kept.append(sample)
        kept_idx.append(i)

    if intra_train and kept:
        order = sorted(range(len(kept)), key=lambda k: kept[k].id)
        retained: list[int] = []
        for k in order:
            h = int(train_hashes[kept_idx[k]])
            best = None
            for r in retained:
                d = hamming(h, int(train_hashes[kept_idx[r]]))
                if d <= threshold and (best is None or d < best[1]):
                    best = (r, d)
            if best is None:
                retained.append(k)
            else:
                removed.append(Removal(kept[k].id, kept[best[0]].id, best[1]))
        retained_set = set(retained)
        kept = [s for k, s in enumerate(kept) if k in retained_set]

    return DedupResult(kept, removed)


def write_report(path: str | Path, removed: Sequence[Removal]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "nearest_test_id", "distance"])
        for r in removed:
            writer.writerow([r.id, r.nearest_id, r.distance])

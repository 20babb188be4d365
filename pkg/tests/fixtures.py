"""Synthetic datasets shared by the test modules."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from segforge.core import Sample, save_dataset
from segforge.dedup import _bin_edges, box_downsample, hamming, hash_image, to_gray

DEFECT_COLOURS = {
    1: (200, 40, 40),
    2: (40, 200, 40),
    3: (40, 40, 200),
    4: (220, 220, 30),
    5: (30, 220, 220),
    6: (220, 30, 220),
    7: (250, 250, 250),
    8: (10, 10, 10),
}


def background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth random texture, distinct enough per draw to give far-apart hashes."""
    noise = rng.normal(0.0, 1.0, (h // 4 + 2, w // 4 + 2, 3))
    smooth = ndimage.zoom(noise, (h / noise.shape[0], w / noise.shape[1], 1), order=1)[:h, :w]
    smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-9)
    return np.clip(40 + 160 * smooth, 0, 255).astype(np.uint8)


def make_sample(sid: str, labels: list[int], rng: np.random.Generator, size: int = 64) -> Sample:
    image = background(size, size, rng)
    mask = np.zeros((size, size), np.uint8)
    for c in labels:
        bh, bw = rng.integers(size // 8, size // 4, size=2)
        y = int(rng.integers(size // 8, size - bh - size // 8))
        x = int(rng.integers(size // 8, size - bw - size // 8))
        mask[y:y + bh, x:x + bw] = c
        image[y:y + bh, x:x + bw] = DEFECT_COLOURS[c]
    return Sample(image, mask, sid)


def make_dataset(n: int, seed: int = 0, num_labels: int = 3, prefix: str = "s", size: int = 64,
                 free_every: int = 4) -> list[Sample]:
    """``n`` samples; every ``free_every``-th one is defect-free, the rest carry 1-2 labels."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if free_every and i % free_every == free_every - 1:
            labels: list[int] = []
        elif i % 3 == 0:
            labels = sorted(rng.choice(np.arange(1, num_labels + 1), size=2, replace=False).tolist())
        else:
            labels = [1 + i % num_labels]
        out.append(make_sample(f"{prefix}{i:03d}", labels, rng, size))
    return out


def flip_one_hash_bit(image: np.ndarray) -> np.ndarray:
    """Return a copy of ``image`` whose difference hash differs in exactly one bit.

    Only the first column cell of some row is changed; that cell feeds a single
    comparison, so exactly one bit moves.
    """
    img = np.array(image, copy=True)
    h, w = img.shape[:2]
    rows = _bin_edges(h, 8)
    c0, c1 = _bin_edges(w, 9)[0]
    base = hash_image(img)
    small = box_downsample(to_gray(img))
    for r, (r0, r1) in enumerate(rows):
        target = small[r, 1]
        # make cell (r, 0) clearly brighter or darker than its right neighbour
        value = 0 if small[r, 0] > target else 255
        if (value == 255 and target >= 250) or (value == 0 and target <= 5):
            continue
        trial = img.copy()
        trial[r0:r1, c0:c1] = value
        if hamming(hash_image(trial), base) == 1:
            return trial
    raise AssertionError("could not flip a single hash bit")


def write_chain_fixture(root, seed: int = 0):
    """16 images: 12 train (one exact and one 1-bit near duplicate of test) and 4 test."""
    test = make_dataset(4, seed=seed + 100, prefix="t", free_every=0)
    train = make_dataset(10, seed=seed, prefix="a")
    train.append(test[0].replace(id="dup_exact"))
    train.append(test[1].replace(id="dup_near", image=flip_one_hash_bit(test[1].image)))
    save_dataset(root / "train", train)
    save_dataset(root / "test", test)
    return train, test

"""Non-parametric prototype segmentation on precomputed feature maps.

Prototypes come from masked average pooling and are L2-normalised; query
pixels are scored by cosine similarity and turned into class probabilities
with ``softmax(alpha * cos)``. The bidirectional round then rebuilds
prototypes from the query predictions and segments the support images.

Feature files are little-endian: a 16-byte header of four uint32
``(H, W, D, version)`` followed by ``H*W*D`` float32 values in row-major
``(H, W, D)`` order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 20.0
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4I")
LOG_CLAMP = 1e-12


class EmptyPrototypeError(ValueError):
    pass


# --------------------------------------------------------------------------
# feature file format

def write_feature_map(path: str | Path, features: np.ndarray) -> None:
    f = np.asarray(features)
    if f.ndim != 3:
        raise ValueError(f"feature map must be (H, W, D), got {f.shape}")
    h, w, d = f.shape
    data = np.ascontiguousarray(f, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(h, w, d, FEATURE_VERSION))
        fh.write(data.tobytes())


def read_feature_map(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    h, w, d, version = _HEADER.unpack_from(raw)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature version {version}")
    expected = _HEADER.size + 4 * h * w * d
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, d)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite feature values")
    return arr.astype(np.float64)


def resize_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a label mask to ``(h, w)``."""
    mask = np.asarray(mask)
    if mask.shape == tuple(shape):
        return mask
    h, w = shape
    im = Image.fromarray(np.ascontiguousarray(mask.astype(np.uint8)))
    return np.array(im.resize((w, h), Image.Resampling.NEAREST))


# --------------------------------------------------------------------------
# prototypes and segmentation

@dataclass(frozen=True)
class Prototype:
    cls: int
    vector: np.ndarray

    def __post_init__(self) -> None:
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"prototype for class {self.cls} is not unit length ({norm})")


def masked_average_pool(
    features: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    cls: int,
) -> Prototype:
    """Average per-shot class means, then L2-normalise.

    Masks are resized to feature resolution first. Shots without any pixel of
    ``cls`` do not contribute to the average.
    """
    if len(features) != len(masks):
        raise ValueError("one mask per feature map required")
    means = []
    for feat, mask in zip(features, masks):
        m = resize_mask(mask, feat.shape[:2]) == cls
        count = int(m.sum())
        if count:
            means.append(feat[m].sum(axis=0) / count)
    if not means:
        raise EmptyPrototypeError(f"empty prototype: class {cls} absent from all masks")
    proto = np.sum(means, axis=0) / len(means)
    norm = np.linalg.norm(proto)
    if norm == 0:
        raise EmptyPrototypeError(f"empty prototype: class {cls} pools to a zero vector")
    return Prototype(cls, proto / norm)


@dataclass
class Segmentation:
    classes: list[int]
    probs: np.ndarray  # (H, W, P), order follows ``classes``
    mask: np.ndarray  # (H, W) class labels


def cosine_similarity(features: np.ndarray, prototypes: Sequence[Prototype]) -> tuple[np.ndarray, np.ndarray]:
    """Cosine of every pixel against every prototype; also returns a zero-norm pixel mask."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    unit = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    protos = np.stack([p.vector for p in prototypes], axis=0)
    return unit @ protos.T, zero


def segment(query: np.ndarray, prototypes: Sequence[Prototype], alpha: float = DEFAULT_ALPHA) -> Segmentation:
    """Softmax over ``alpha * cosine`` against each prototype.

    Zero-norm feature vectors get uniform probabilities and the first
    prototype's label.
    """
    if not prototypes:
        raise ValueError("at least one prototype required")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    cos, zero = cosine_similarity(query, prototypes)
    logits = alpha * cos
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=-1, keepdims=True)
    if zero.any():
        log.warning("%d zero-norm feature vectors given uniform probabilities", int(zero.sum()))
        probs[zero] = 1.0 / len(prototypes)
    labels = np.array([p.cls for p in prototypes])
    mask = labels[np.argmax(cos, axis=-1)].astype(np.uint8)
    return Segmentation([p.cls for p in prototypes], probs, mask)


def segmentation_loss(seg: Segmentation, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Mean negative log-probability of the ground-truth class per pixel."""
    gt = resize_mask(gt, seg.mask.shape)
    index = {c: i for i, c in enumerate(seg.classes)}
    lut = np.full(256, -1, dtype=np.int64)
    for c, i in index.items():
        lut[c] = i
    idx = lut[gt]
    keep = idx >= 0 if valid is None else (idx >= 0) & valid
    if (idx < 0).any() and valid is None:
        raise ValueError("ground truth contains labels without a prototype")
    if not keep.any():
        return 0.0
    picked = np.take_along_axis(seg.probs, np.where(idx < 0, 0, idx)[..., None], axis=-1)[..., 0]
    return float(-np.sum(np.log(np.maximum(picked[keep], LOG_CLAMP))) / int(keep.sum()))


def _batch_loss(segs: Sequence[Segmentation], gts: Sequence[np.ndarray], allowed: set[int] | None = None) -> float:
    """Mean over every pixel of every image (images share the feature resolution)."""
    total = 0.0
    count = 0
    for seg, gt in zip(segs, gts):
        g = resize_mask(gt, seg.mask.shape)
        valid = np.isin(g, sorted(allowed)) if allowed is not None else np.ones(g.shape, bool)
        n = int(valid.sum())
        if n:
            total += segmentation_loss(seg, g, valid if allowed is not None else None) * n
            count += n
    return total / count if count else 0.0


@dataclass
class BidirectionalResult:
    query: list[Segmentation]
    support: list[Segmentation]
    loss_query: float
    loss_support: float
    loss_total: float
    skipped_classes: list[int] = field(default_factory=list)


def bidirectional_round(
    support_features: Sequence[np.ndarray],
    support_masks: Sequence[np.ndarray],
    query_features: Sequence[np.ndarray],
    query_masks: Sequence[np.ndarray],
    classes: Sequence[int],
    alpha: float = DEFAULT_ALPHA,
) -> BidirectionalResult:
    """Support -> query segmentation, then query predictions -> support.

    ``classes`` lists the labels that get prototypes (background included).
    The reverse pass pools query features under the hard predicted masks;
    classes missing from every prediction are skipped there, and support
    pixels of skipped classes are left out of the support loss.
    """
    classes = list(classes)
    fwd = [masked_average_pool(support_features, support_masks, c) for c in classes]
    q_segs = [segment(f, fwd, alpha) for f in query_features]
    loss_query = _batch_loss(q_segs, query_masks)

    predicted = [s.mask for s in q_segs]
    rev, skipped = [], []
    for c in classes:
        try:
            rev.append(masked_average_pool(query_features, predicted, c))
        except EmptyPrototypeError:
            skipped.append(c)
    if skipped:
        log.warning("reverse pass: classes %s vanished from query predictions", skipped)
    if rev:
        s_segs = [segment(f, rev, alpha) for f in support_features]
        loss_support = _batch_loss(s_segs, support_masks, {p.cls for p in rev})
    else:
        s_segs, loss_support = [], 0.0
    return BidirectionalResult(
        q_segs, s_segs, loss_query, loss_support, loss_query + loss_support, skipped
    )


def remap_to_episode(mask: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Send labels outside ``classes`` to background (0)."""
    keep = np.zeros(256, dtype=bool)
    keep[list(classes)] = True
    out = np.asarray(mask).copy()
    out[~keep[out]] = 0
    return out


def label_features(mask: np.ndarray, dim: int, num_labels: int = 9,
                   noise: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Synthetic features: an orthonormal code per label, optional Gaussian noise.

    Intended for fixtures and self-consistency checks, not as an encoder.
    """
    if dim < num_labels:
        raise ValueError("dim must be >= number of labels for orthogonal codes")
    codes = np.eye(dim)[:num_labels]
    feats = codes[np.asarray(mask, dtype=np.int64)]
    if noise > 0:
        rng = rng or np.random.default_rng(0)
        feats = feats + rng.normal(0.0, noise, feats.shape)
    return feats


def image_features(image: np.ndarray, stride: int = 1) -> np.ndarray:
    """Plain colour features: normalised channels plus a constant term, box-pooled by ``stride``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[0] // stride * stride, img.shape[1] // stride * stride
    img = img[:h, :w].reshape(h // stride, stride, w // stride, stride, -1).mean(axis=(1, 3))
    return np.concatenate([img / 255.0 - 0.5, np.full(img.shape[:2] + (1,), 0.1)], axis=-1)

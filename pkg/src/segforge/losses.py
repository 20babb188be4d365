"""Segmentation losses over per-pixel class probability maps.

``probs`` is ``(H, W, C)`` (or ``(N, C)``) with rows summing to one; ``gt`` is
the matching integer label map. Reductions run over flattened row-major
arrays so results are bit-stable for identical inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

LOG_CLAMP = 1e-12
DICE_EPS = 1e-6
COMBINED_WEIGHTS = (0.5, 0.3, 0.2)  # cross-entropy, dice, focal
DEEP_SUPERVISION_WEIGHTS = (1.0, 0.4, 0.3, 0.2)  # final output first


def _flatten(probs: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(gt)
    if p.ndim < 2:
        raise ValueError("probs needs a trailing class axis")
    if p.shape[:-1] != y.shape:
        raise ValueError(f"dimension mismatch: probs {p.shape} vs gt {y.shape}")
    p = p.reshape(-1, p.shape[-1])
    y = y.reshape(-1).astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise ValueError("ground-truth label outside the probability classes")
    return p, y


def check_probabilities(probs: np.ndarray, atol: float = 1e-6) -> None:
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise ValueError("class probabilities must sum to 1 per pixel")


def one_hot(gt: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(gt, dtype=np.int64)
    return np.eye(num_classes, dtype=np.float64)[y]


def cross_entropy(probs: np.ndarray, gt: np.ndarray) -> float:
    p, y = _flatten(probs, gt)
    picked = np.maximum(p[np.arange(y.size), y], LOG_CLAMP)
    return float(-np.sum(np.log(picked)) / y.size)


def cross_entropy_grad(probs: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """d(cross_entropy)/d(probs), same shape as ``probs``."""
    p, y = _flatten(probs, gt)
    g = np.zeros_like(p)
    rows = np.arange(y.size)
    picked = p[rows, y]
    g[rows, y] = np.where(picked > LOG_CLAMP, -1.0 / (y.size * np.maximum(picked, LOG_CLAMP)), 0.0)
    return g.reshape(np.shape(probs))


def _dice_parts(p: np.ndarray, y: np.ndarray, classes: Sequence[int] | None):
    t = one_hot(y, p.shape[1])
    inter = np.sum(p * t, axis=0)
    denom = np.sum(p, axis=0) + np.sum(t, axis=0)
    cls = list(range(p.shape[1])) if classes is None else list(classes)
    cls = [c for c in cls if denom[c] > 0]
    return t, inter, denom, cls


def dice_loss(probs: np.ndarray, gt: np.ndarray, classes: Sequence[int] | None = None) -> float:
    """One minus the soft Dice coefficient, averaged over classes.

    Classes with no predicted mass and no ground-truth pixels are skipped.
    """
    p, y = _flatten(probs, gt)
    _, inter, denom, cls = _dice_parts(p, y, classes)
    if not cls:
        return 0.0
    dsc = (2.0 * inter[cls] + DICE_EPS) / (denom[cls] + DICE_EPS)
    return float(1.0 - np.sum(dsc) / len(cls))


def dice_loss_grad(probs: np.ndarray, gt: np.ndarray, classes: Sequence[int] | None = None) -> np.ndarray:
    p, y = _flatten(probs, gt)
    t, inter, denom, cls = _dice_parts(p, y, classes)
    g = np.zeros_like(p)
    for c in cls:
        d = denom[c] + DICE_EPS
        n = 2.0 * inter[c] + DICE_EPS
        g[:, c] = -(2.0 * t[:, c] * d - n) / (d * d) / len(cls)
    return g.reshape(np.shape(probs))


def focal_loss(probs: np.ndarray, gt: np.ndarray, alpha: float = 1.0, gamma: float = 2.0) -> float:
    """One-vs-rest binary focal loss, mean over pixels then over classes."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p, y = _flatten(probs, gt)
    t = one_hot(y, p.shape[1])
    pt = np.where(t == 1.0, p, 1.0 - p)
    loss = -alpha * (1.0 - pt) ** gamma * np.log(np.maximum(pt, LOG_CLAMP))
    per_class = np.sum(loss, axis=0) / y.size
    return float(np.sum(per_class) / p.shape[1])


def combine_losses(ce: float, dice: float, focal: float, weights: Sequence[float] = COMBINED_WEIGHTS) -> float:
    w_ce, w_dice, w_focal = weights
    return w_ce * ce + w_dice * dice + w_focal * focal


def combined_loss(
    probs: np.ndarray,
    gt: np.ndarray,
    weights: Sequence[float] = COMBINED_WEIGHTS,
    alpha: float = 1.0,
    gamma: float = 2.0,
) -> float:
    return combine_losses(
        cross_entropy(probs, gt),
        dice_loss(probs, gt),
        focal_loss(probs, gt, alpha, gamma),
        weights,
    )


def deep_supervision_combine(
    level_losses: Sequence[float],
    weights: Sequence[float] = DEEP_SUPERVISION_WEIGHTS,
) -> float:
    """Weighted sum of per-decoder-level losses, level 1 being the final output.

    Fewer levels than weights use the leading weights only.
    """
    if len(level_losses) > len(weights):
        raise ValueError(f"{len(level_losses)} levels but only {len(weights)} weights")
    return float(sum(w * l for w, l in zip(weights, level_losses)))

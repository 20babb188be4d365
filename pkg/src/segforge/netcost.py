"""Parameter arithmetic for convolution layers and B-spline activations.

Counts exclude bias terms unless ``bias=True``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TIKAN_MIN_CHANNELS = 16
TIKAN_MAX_PIXELS = 1024


@dataclass(frozen=True)
class ConvShape:
    kernel: int
    c_in: int
    c_out: int

    def __post_init__(self) -> None:
        for name in ("kernel", "c_in", "c_out"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")


def std_conv_params(shape: ConvShape, bias: bool = False) -> int:
    k = shape.kernel
    return k * k * shape.c_in * shape.c_out + (shape.c_out if bias else 0)


def dsconv_params(shape: ConvShape, bias: bool = False) -> int:
    """Depthwise ``K x K`` per input channel followed by a pointwise ``1 x 1``."""
    k = shape.kernel
    n = k * k * shape.c_in + shape.c_in * shape.c_out
    return n + (shape.c_in + shape.c_out if bias else 0)


def reduction_factor(shape: ConvShape) -> float:
    """``std / ds`` without biases: ``K^2 c_out / (K^2 + c_out)``; tends to ``K^2``."""
    k2 = shape.kernel * shape.kernel
    return k2 * shape.c_out / (k2 + shape.c_out)


def tikan_active(channels: int, height: int, width: int,
                 min_channels: int = TIKAN_MIN_CHANNELS,
                 max_pixels: int = TIKAN_MAX_PIXELS) -> bool:
    """Spline activation gate: enough channels and a small enough feature map."""
    return channels >= min_channels and height * width <= max_pixels


# --------------------------------------------------------------------------
# B-splines

@dataclass(frozen=True)
class SplineBasis:
    knots: tuple[float, ...]
    degree: int
    control_points: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if any(b < a for a, b in zip(self.knots, self.knots[1:])):
            raise ValueError("knots must be non-decreasing")
        if len(self.knots) != len(self.control_points) + self.degree + 1:
            raise ValueError(
                f"{len(self.knots)} knots for {len(self.control_points)} control points "
                f"at degree {self.degree}; need {len(self.control_points) + self.degree + 1}"
            )

    @property
    def domain(self) -> tuple[float, float]:
        p = self.degree
        return self.knots[p], self.knots[len(self.knots) - p - 1]

    @classmethod
    def clamped(cls, control_points: Sequence[float], degree: int,
                lo: float = -1.0, hi: float = 1.0) -> "SplineBasis":
        knots = clamped_uniform_knots(len(control_points), degree, lo, hi)
        return cls(tuple(knots), degree, tuple(float(c) for c in control_points))


def clamped_uniform_knots(num_control: int, degree: int, lo: float = -1.0, hi: float = 1.0) -> list[float]:
    """``degree + 1`` repeated end knots with uniform interior spacing."""
    if num_control < degree + 1:
        raise ValueError("need at least degree + 1 control points")
    spans = num_control - degree
    inner = [lo + (hi - lo) * i / spans for i in range(1, spans)]
    return [lo] * (degree + 1) + inner + [hi] * (degree + 1)


def _span(knots: Sequence[float], degree: int, x: float) -> int:
    """Index ``i`` with ``knots[i] <= x < knots[i+1]``; the right end maps to the last non-empty span."""
    n = len(knots) - degree - 1
    if x >= knots[n]:
        i = n - 1
        while i > degree and knots[i] == knots[i + 1]:
            i -= 1
        return i
    lo, hi = degree, n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x < knots[mid]:
            hi = mid
        else:
            lo = mid
    return lo


def bspline_basis(basis: SplineBasis, x: float) -> np.ndarray:
    """All ``B_{i,p}(x)`` by the Cox-de Boor recursion (0/0 taken as 0)."""
    t, p = basis.knots, basis.degree
    lo, hi = basis.domain
    if not (lo <= x <= hi) or math.isnan(x):
        raise ValueError(f"x={x} outside spline domain [{lo}, {hi}]")
    n = len(basis.control_points)
    m = len(t) - 1
    s = _span(t, p, x)
    b = np.zeros(m)
    b[s] = 1.0
    for d in range(1, p + 1):
        nxt = np.zeros(m)
        for i in range(m - d):
            left = t[i + d] - t[i]
            right = t[i + d + 1] - t[i + 1]
            v = 0.0
            if left > 0:
                v += (x - t[i]) / left * b[i]
            if right > 0:
                v += (t[i + d + 1] - x) / right * b[i + 1]
            nxt[i] = v
        b = nxt
    return b[:n]


def bspline_eval(basis: SplineBasis, x: float) -> tuple[np.ndarray, float]:
    values = bspline_basis(basis, x)
    return values, float(values @ np.asarray(basis.control_points, dtype=np.float64))


# --------------------------------------------------------------------------
# layer-spec cost tables

@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: ConvShape
    kind: str = "conv"  # "conv" or "dsconv"
    height: int | None = None
    width: int | None = None


def load_layer_specs(path: str | Path) -> list[LayerSpec]:
    """JSON list (or ``{"layers": [...]}``) of ``{name, kernel, c_in, c_out[, kind, height, width]}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    items = doc["layers"] if isinstance(doc, dict) else doc
    layers = []
    for i, item in enumerate(items):
        kind = item.get("kind", "conv")
        if kind not in ("conv", "dsconv"):
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
        layers.append(LayerSpec(
            name=str(item.get("name", f"layer{i}")),
            shape=ConvShape(int(item["kernel"]), int(item["c_in"]), int(item["c_out"])),
            kind=kind,
            height=item.get("height"),
            width=item.get("width"),
        ))
    return layers


def cost_table(layers: Sequence[LayerSpec], bias: bool = False) -> str:
    """Tab-separated per-layer counts plus a total for the declared layer kinds."""
    rows = ["name\tkernel\tc_in\tc_out\tstd\tds\tfactor\tused\ttikan"]
    total = 0
    for layer in layers:
        s = layer.shape
        std = std_conv_params(s, bias)
        ds = dsconv_params(s, bias)
        used = ds if layer.kind == "dsconv" else std
        total += used
        gate = "-"
        if layer.height is not None and layer.width is not None:
            gate = "yes" if tikan_active(s.c_out, int(layer.height), int(layer.width)) else "no"
        rows.append(
            f"{layer.name}\t{s.kernel}\t{s.c_in}\t{s.c_out}\t{std}\t{ds}\t"
            f"{reduction_factor(s):.4f}\t{used}\t{gate}"
        )
    rows.append(f"total\t\t\t\t\t\t\t{total}\t")
    return "\n".join(rows) + "\n"

"""Discrete Poisson blending on a pixel grid.

The blended values ``g`` on the region minimise

    sum over grid edges (p, q) touching the region of (g_q - g_p - v_pq)^2

with ``g`` pinned to the target outside the region. The minimiser satisfies
the 5-point equation ``lap(g) = div(v)`` on the region. ``v`` is stored as
forward differences ``gx[y, x] ~ v along (y, x)->(y, x+1)`` and
``gy[y, x] ~ v along (y, x)->(y+1, x)``; ``div`` is their backward difference.
All values are on the 8-bit intensity scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class PoissonConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(
            f"Poisson solve did not converge after {iterations} iterations "
            f"(max residual {residual:.3g})"
        )
        self.iterations = iterations
        self.residual = residual


def _as3d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def forward_gradient(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences, zero on the last column/row."""
    img = _as3d(image)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1] = img[1:] - img[:-1]
    return gx, gy


def divergence(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward-difference divergence; valid away from the image border."""
    div = np.zeros_like(gx)
    div[:, 1:] += gx[:, 1:] - gx[:, :-1]
    div[1:] += gy[1:] - gy[:-1]
    return div


def laplacian(g: np.ndarray) -> np.ndarray:
    """5-point Laplacian on interior pixels, zero on the border."""
    g = _as3d(g)
    lap = np.zeros_like(g)
    lap[1:-1, 1:-1] = (
        g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    )
    return lap


@dataclass
class PoissonSystem:
    """Region, guidance field and boundary image of one blending problem.

    ``region`` marks the unknown pixels; it may not touch the image border so
    every unknown has four neighbours. ``target`` supplies the fixed values on
    the region's outer boundary (and everywhere else).
    """

    target: np.ndarray
    region: np.ndarray
    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self) -> None:
        self.target = _as3d(self.target)
        self.gx = _as3d(self.gx)
        self.gy = _as3d(self.gy)
        self.region = np.asarray(self.region, dtype=bool)
        h, w, _ = self.target.shape
        if self.region.shape != (h, w):
            raise ValueError(f"region shape {self.region.shape} != image shape {(h, w)}")
        if self.gx.shape != self.target.shape or self.gy.shape != self.target.shape:
            raise ValueError("guidance field must match the target shape")
        if self.region.any() and (
            self.region[0].any() or self.region[-1].any()
            or self.region[:, 0].any() or self.region[:, -1].any()
        ):
            raise ValueError("region touches the image border")
        if not np.all(np.isfinite(self.target)):
            raise ValueError("boundary values must be finite")

    @classmethod
    def from_images(cls, target: np.ndarray, source: np.ndarray, region: np.ndarray) -> "PoissonSystem":
        """Guidance = gradient of ``source`` (standard seamless cloning import)."""
        gx, gy = forward_gradient(source)
        return cls(target, region, gx, gy)

    @classmethod
    def harmonic(cls, target: np.ndarray, region: np.ndarray) -> "PoissonSystem":
        t = _as3d(target)
        return cls(t, region, np.zeros_like(t), np.zeros_like(t))

    @property
    def boundary(self) -> np.ndarray:
        """Pixels outside the region that are 4-adjacent to it."""
        r = self.region
        nb = np.zeros_like(r)
        nb[1:] |= r[:-1]
        nb[:-1] |= r[1:]
        nb[:, 1:] |= r[:, :-1]
        nb[:, :-1] |= r[:, 1:]
        return nb & ~r

    def rhs(self) -> np.ndarray:
        return divergence(self.gx, self.gy)

    def residual(self, g: np.ndarray) -> float:
        """Max |lap(g) - div(v)| over the region."""
        if not self.region.any():
            return 0.0
        r = laplacian(g) - self.rhs()
        return float(np.abs(r[self.region]).max())

    def energy(self, g: np.ndarray) -> float:
        """Squared guidance mismatch over all edges with an endpoint in the region."""
        g = _as3d(g)
        r = self.region
        e_h = r[:, :-1] | r[:, 1:]
        e_v = r[:-1] | r[1:]
        dh = (g[:, 1:] - g[:, :-1] - self.gx[:, :-1])[e_h]
        dv = (g[1:] - g[:-1] - self.gy[:-1])[e_v]
        return float(np.sum(dh * dh) + np.sum(dv * dv))


@dataclass
class PoissonResult:
    image: np.ndarray  # full (H, W, C) array, equal to the target outside the region
    region: np.ndarray
    iterations: int
    residual: float
    energies: list[float] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        """Solved values on the region in row-major order, shape ``(n, C)``."""
        return self.image[self.region]


def sor_omega(region: np.ndarray) -> float:
    """Over-relaxation factor tuned to the region's bounding box."""
    ys, xs = np.nonzero(region)
    n = max(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1)
    return 2.0 / (1.0 + math.sin(math.pi / (n + 1)))


def solve_poisson(
    system: PoissonSystem,
    tol: float = 1e-5,
    max_iter: int = 10_000,
    method: str = "gauss_seidel",
    omega: float | None = None,
    initial: np.ndarray | None = None,
    track_energy: bool = False,
) -> PoissonResult:
    """Solve the blending system.

    ``method="gauss_seidel"`` sweeps red then black pixels, so each
    half-sweep is a fully parallel update and the result does not depend on
    traversal order. ``omega=None`` picks an over-relaxation factor from the
    region size; ``omega=1`` is plain Gauss-Seidel. Any ``0 < omega < 2``
    keeps the energy non-increasing. ``method="cg"`` uses scipy's conjugate
    gradient on the assembled sparse system.

    Iteration stops once the max residual over the region is below ``tol``.
    The solve starts from ``initial`` (default: the target itself).
    """
    target = system.target
    g = target.copy() if initial is None else _as3d(initial).copy()
    g[~system.region] = target[~system.region]

    if not system.region.any():
        return PoissonResult(g, system.region, 0, 0.0)
    if method == "cg":
        return _solve_cg(system, g, tol, max_iter)
    if method != "gauss_seidel":
        raise ValueError(f"unknown method {method!r}")

    w = sor_omega(system.region) if omega is None else float(omega)
    if not 0.0 < w < 2.0:
        raise ValueError(f"omega must be in (0, 2), got {w}")

    # work on the bounding box plus a one-pixel frame of boundary values
    ys, xs = np.nonzero(system.region)
    y0, y1 = ys.min() - 1, ys.max() + 2
    x0, x1 = xs.min() - 1, xs.max() + 2
    sub = g[y0:y1, x0:x1]
    reg = system.region[y0:y1, x0:x1]
    rhs = system.rhs()[y0:y1, x0:x1]
    yy, xx = np.mgrid[y0:y1, x0:x1]
    colors = [reg & ((yy + xx) % 2 == k) for k in (0, 1)]
    inner = (slice(1, -1), slice(1, -1))

    def neighbour_sum(a: np.ndarray) -> np.ndarray:
        s = np.zeros_like(a)
        s[inner] = a[:-2, 1:-1] + a[2:, 1:-1] + a[1:-1, :-2] + a[1:-1, 2:]
        return s

    def max_residual() -> float:
        r = neighbour_sum(sub) - 4.0 * sub - rhs
        return float(np.abs(r[reg]).max())

    energies = [system.energy(g)] if track_energy else []
    res = max_residual()
    it = 0
    while res > tol and it < max_iter:
        for sel in colors:
            gs = (neighbour_sum(sub) - rhs) / 4.0
            sub[sel] += w * (gs[sel] - sub[sel])
        it += 1
        if track_energy:
            energies.append(system.energy(g))
        res = max_residual()
    if res > tol:
        raise PoissonConvergenceError(it, res)
    return PoissonResult(g, system.region, it, res, energies)


def _solve_cg(system: PoissonSystem, g: np.ndarray, tol: float, max_iter: int) -> PoissonResult:
    from scipy.sparse import coo_matrix
    from scipy.sparse.linalg import cg

    region = system.region
    h, w = region.shape
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(region)
    n = ys.size
    idx[ys, xs] = np.arange(n)

    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.full(n, 4.0)]
    rhs_full = system.rhs()
    b = -rhs_full[ys, xs].copy()  # (4g - sum nb = -div), SPD form
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inside = region[ny, nx]
        rows.append(np.flatnonzero(inside))
        cols.append(idx[ny[inside], nx[inside]])
        vals.append(np.full(int(inside.sum()), -1.0))
        out = ~inside
        b[out] += system.target[ny[out], nx[out]]
    A = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()

    iterations = 0
    for c in range(g.shape[2]):
        counter = {"n": 0}

        def cb(_xk, counter=counter):
            counter["n"] += 1

        # residual of A x = b equals the Laplacian residual; bound it in 2-norm
        x, info = cg(A, b[:, c], x0=g[ys, xs, c], rtol=0.0, atol=tol * 0.5,
                     maxiter=max_iter, callback=cb)
        g[ys, xs, c] = x
        iterations = max(iterations, counter["n"])
    res = system.residual(g)
    if res > tol:
        raise PoissonConvergenceError(iterations, res)
    return PoissonResult(g, system.region, iterations, res)

"""Procedural test sources: branching vessel trees and simple analytic shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .geometry import GeometryError, ImageGrid


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "vessel"
    seed: int = 0
    roots: tuple[int, int] = (2, 4)
    depth: tuple[int, int] = (3, 5)
    root_width_px: tuple[float, float] = (4.0, 6.0)
    leaf_width_px: tuple[float, float] = (1.0, 2.0)
    root_length: tuple[float, float] = (0.22, 0.35)  # fraction of the image side
    length_decay: float = 0.72
    branch_angle_deg: tuple[float, float] = (20.0, 45.0)

    def __post_init__(self):
        for name in ("roots", "depth", "root_width_px", "leaf_width_px", "root_length"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a positive (lo, hi) range, got {(lo, hi)}")
        if not 0 < self.length_decay <= 1:
            raise ValueError(f"length_decay must be in (0, 1], got {self.length_decay}")


def desk_phantom_spec(seed: int = 0) -> PhantomSpec:
    """Thinner, shorter-branched trees suited to 64 x 64 images."""
    return PhantomSpec(seed=seed, roots=(2, 3), depth=(3, 4), root_width_px=(1.5, 2.5),
                       leaf_width_px=(1.0, 1.2), root_length=(0.2, 0.32))


_SMOOTH = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


def _draw_segment(img, p0, p1, width):
    """Max-composite an anti-aliased capsule of ``width`` pixels between p0 and p1 (pixel units)."""
    n = img.shape[0]
    r = 0.5 * width + 1.0
    x0 = max(int(math.floor(min(p0[0], p1[0]) - r)), 0)
    x1 = min(int(math.ceil(max(p0[0], p1[0]) + r)), n - 1)
    y0 = max(int(math.floor(min(p0[1], p1[1]) - r)), 0)
    y1 = min(int(math.ceil(max(p0[1], p1[1]) + r)), n - 1)
    if x0 > x1 or y0 > y1:
        return
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(float)
    d = np.subtract(p1, p0)
    L2 = float(d @ d)
    t = np.zeros_like(xx) if L2 == 0 else np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / L2, 0, 1)
    dist = np.hypot(xx - p0[0] - t * d[0], yy - p0[1] - t * d[1])
    val = np.clip(0.5 * width + 0.5 - dist, 0.0, 1.0)
    np.maximum(img[y0:y1 + 1, x0:x1 + 1], val, out=img[y0:y1 + 1, x0:x1 + 1])


def vessel_phantom(spec: PhantomSpec, grid: ImageGrid) -> np.ndarray:
    """Random binary branching tree of tapered segments, lightly smoothed, max 1."""
    rng = np.random.default_rng(spec.seed)
    n = grid.n
    img = np.zeros(grid.shape)
    n_roots = int(rng.integers(spec.roots[0], spec.roots[1] + 1))
    for _ in range(n_roots):
        depth = int(rng.integers(spec.depth[0], spec.depth[1] + 1))
        w_root = rng.uniform(*spec.root_width_px)
        w_leaf = rng.uniform(*spec.leaf_width_px)
        # start near the border, head roughly towards the centre
        side = rng.uniform(0, 2 * math.pi)
        start = np.array([0.5 * n + 0.45 * n * math.cos(side), 0.5 * n + 0.45 * n * math.sin(side)])
        heading = side + math.pi + rng.normal(0, 0.35)
        length = rng.uniform(*spec.root_length) * n
        stack = [(start, heading, length, 0)]
        while stack:
            p0, ang, seg_len, level = stack.pop()
            frac = level / max(depth - 1, 1)
            width = w_root * (w_leaf / w_root) ** frac
            ang = ang + rng.normal(0, 0.1)
            p1 = p0 + seg_len * np.array([math.cos(ang), math.sin(ang)])
            _draw_segment(img, p0, p1, width)
            if level + 1 < depth:
                spread = math.radians(rng.uniform(*spec.branch_angle_deg))
                for sign in (-1.0, 1.0):
                    child = ang + sign * spread + rng.normal(0, 0.1)
                    stack.append((p1, child, seg_len * spec.length_decay * rng.uniform(0.85, 1.15), level + 1))
    img = signal.convolve2d(img, _SMOOTH, mode="same")
    peak = img.max()
    return img / peak if peak > 0 else img


def _check_center(center, grid):
    grid.nearest_index(center)  # raises if outside


def disk_phantom(center, radius: float, grid: ImageGrid) -> np.ndarray:
    """Indicator of a disk with a one-pixel linear edge ramp."""
    _check_center(center, grid)
    if radius <= 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    X, Y = grid.meshgrid()
    dist = np.hypot(X - center[0], Y - center[1])
    return np.clip((radius - dist) / grid.spacing + 0.5, 0.0, 1.0)


def point_phantom(center, grid: ImageGrid) -> np.ndarray:
    """Unit impulse at the grid node nearest to ``center``."""
    iy, ix = grid.nearest_index(center)
    img = np.zeros(grid.shape)
    img[iy, ix] = 1.0
    return img


def gaussian_phantom(center, sigma: float, grid: ImageGrid) -> np.ndarray:
    _check_center(center, grid)
    if sigma <= 0:
        raise GeometryError(f"sigma must be positive, got {sigma}")
    X, Y = grid.meshgrid()
    return np.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2) / (2 * sigma ** 2))


def make_phantom(spec: PhantomSpec, grid: ImageGrid, center=(0.0, -7.5), size: float = 4.0) -> np.ndarray:
    """Dispatch on ``spec.kind``; ``size`` is the disk radius or Gaussian sigma in mm."""
    if spec.kind == "vessel":
        return vessel_phantom(spec, grid)
    if spec.kind == "disk":
        return disk_phantom(center, size, grid)
    if spec.kind == "point":
        return point_phantom(center, grid)
    if spec.kind == "gaussian":
        return gaussian_phantom(center, size, grid)
    raise ValueError(f"unknown phantom kind {spec.kind!r}")

"""Discrete PAT forward operator, its exact transpose, convolutions and noise.

The 2D pressure at a sensor ``s`` for initial pressure ``f`` is

    p(s, t) = d/dt [ (1/v) * int_0^{v t} M(s, rho) rho / sqrt(v^2 t^2 - rho^2) drho ]

where ``M(s, rho)`` is the mean of ``f`` over the circle of radius ``rho``
about ``s``.  The operator is the product of three linear stages:

1. circular means on a radius table ``rho_k = k * v * dt`` (bilinear
   interpolation, values outside the grid are zero),
2. the Abel-type integral after substituting ``rho = v t sin(u)``,
   composite trapezoid in ``u``,
3. a second order finite-difference time derivative.

Stages 2 and 3 do not depend on the sensor and are folded into one dense
matrix.  The transpose scatters the same interpolation weights, so the
adjoint pair is exact up to rounding.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numba
import numpy as np
from scipy import ndimage, signal

from .geometry import DetectionGeometry, ImageGrid, TimeGrid, check_time_grid


class ShapeError(ValueError):
    """Array dimensions inconsistent with the geometry or kernel contract."""


# ---------------------------------------------------------------------------
# circular means
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _points_on_circle(rho, spacing):
    if rho == 0.0:
        return 1
    return 4 * int(math.ceil(2.0 * math.pi * rho / spacing))


@numba.njit(cache=True)
def _cone(sx, sy, bx0, bx1, by0, by1):
    """Angular interval containing the box as seen from (sx, sy); full circle if inside."""
    if bx0 <= sx <= bx1 and by0 <= sy <= by1:
        return True, 0.0, 2.0 * math.pi
    cx = 0.5 * (bx0 + bx1)
    cy = 0.5 * (by0 + by1)
    ac = math.atan2(cy - sy, cx - sx)
    lo = 1e300
    hi = -1e300
    for px in (bx0, bx1):
        for py in (by0, by1):
            d = math.atan2(py - sy, px - sx) - ac
            d = (d + math.pi) % (2.0 * math.pi) - math.pi
            lo = min(lo, d)
            hi = max(hi, d)
    return False, ac + lo, ac + hi


@numba.njit(cache=True)
def _rho_range(sx, sy, bx0, bx1, by0, by1):
    ddx = max(bx0 - sx, 0.0, sx - bx1)
    ddy = max(by0 - sy, 0.0, sy - by1)
    near = math.sqrt(ddx * ddx + ddy * ddy)
    far = 0.0
    for px in (bx0, bx1):
        for py in (by0, by1):
            far = max(far, math.hypot(px - sx, py - sy))
    return near, far


@numba.njit(parallel=True, cache=True)
def _circular_means(f, x0, y0, dx, dy, sensors, drho, n_rho, spacing):
    n = f.shape[0]
    n_s = sensors.shape[0]
    out = np.zeros((n_s, n_rho))
    # bilinear support reaches one cell beyond the outermost nodes
    bx0, bx1 = x0 - dx, x0 + (n - 1) * dx + dx
    by0, by1 = y0 - dy, y0 + (n - 1) * dy + dy
    for s in numba.prange(n_s):
        sx = sensors[s, 0]
        sy = sensors[s, 1]
        full, a0, a1 = _cone(sx, sy, bx0, bx1, by0, by1)
        near, far = _rho_range(sx, sy, bx0, bx1, by0, by1)
        k0 = max(int(math.floor(near / drho)), 0)
        k1 = min(int(math.ceil(far / drho)), n_rho - 1)
        for k in range(k0, k1 + 1):
            rho = k * drho
            p = _points_on_circle(rho, spacing)
            if full:
                m0, m1 = 0, p - 1
            else:
                m0 = int(math.ceil(a0 * p / (2.0 * math.pi)))
                m1 = int(math.floor(a1 * p / (2.0 * math.pi)))
            acc = 0.0
            for m in range(m0, m1 + 1):
                th = 2.0 * math.pi * m / p
                u = (sx + rho * math.cos(th) - x0) / dx
                v = (sy + rho * math.sin(th) - y0) / dy
                iu = int(math.floor(u))
                iv = int(math.floor(v))
                if iu < -1 or iu > n - 1 or iv < -1 or iv > n - 1:
                    continue
                fu = u - iu
                fv = v - iv
                if iv >= 0:
                    if iu >= 0:
                        acc += (1.0 - fu) * (1.0 - fv) * f[iv, iu]
                    if iu + 1 < n:
                        acc += fu * (1.0 - fv) * f[iv, iu + 1]
                if iv + 1 < n:
                    if iu >= 0:
                        acc += (1.0 - fu) * fv * f[iv + 1, iu]
                    if iu + 1 < n:
                        acc += fu * fv * f[iv + 1, iu + 1]
            out[s, k] = acc / p
    return out


@numba.njit(parallel=True, cache=True)
def _circular_means_adjoint(table, n, x0, y0, dx, dy, sensors, drho, spacing):
    n_s, n_rho = table.shape
    parts = np.zeros((n_s, n, n))
    bx0, bx1 = x0 - dx, x0 + (n - 1) * dx + dx
    by0, by1 = y0 - dy, y0 + (n - 1) * dy + dy
    for s in numba.prange(n_s):
        img = parts[s]
        sx = sensors[s, 0]
        sy = sensors[s, 1]
        full, a0, a1 = _cone(sx, sy, bx0, bx1, by0, by1)
        near, far = _rho_range(sx, sy, bx0, bx1, by0, by1)
        k0 = max(int(math.floor(near / drho)), 0)
        k1 = min(int(math.ceil(far / drho)), n_rho - 1)
        for k in range(k0, k1 + 1):
            rho = k * drho
            p = _points_on_circle(rho, spacing)
            if full:
                m0, m1 = 0, p - 1
            else:
                m0 = int(math.ceil(a0 * p / (2.0 * math.pi)))
                m1 = int(math.floor(a1 * p / (2.0 * math.pi)))
            c = table[s, k] / p
            for m in range(m0, m1 + 1):
                th = 2.0 * math.pi * m / p
                u = (sx + rho * math.cos(th) - x0) / dx
                v = (sy + rho * math.sin(th) - y0) / dy
                iu = int(math.floor(u))
                iv = int(math.floor(v))
                if iu < -1 or iu > n - 1 or iv < -1 or iv > n - 1:
                    continue
                fu = u - iu
                fv = v - iv
                if iv >= 0:
                    if iu >= 0:
                        img[iv, iu] += (1.0 - fu) * (1.0 - fv) * c
                    if iu + 1 < n:
                        img[iv, iu + 1] += fu * (1.0 - fv) * c
                if iv + 1 < n:
                    if iu >= 0:
                        img[iv + 1, iu] += (1.0 - fu) * fv * c
                    if iu + 1 < n:
                        img[iv + 1, iu + 1] += fu * fv * c
    out = np.zeros((n, n))
    for s in range(n_s):
        out += parts[s]
    return out


# ---------------------------------------------------------------------------
# Abel integral and time derivative
# ---------------------------------------------------------------------------

def _abel_matrix(tgrid: TimeGrid, v: float, spacing: float, n_rho: int) -> np.ndarray:
    """``A[j, k]``: weight of ``M(rho_k)`` in ``int_0^{d_j} M rho / sqrt(d_j^2 - rho^2)``."""
    drho = v * tgrid.dt
    d = v * tgrid.t
    A = np.zeros((tgrid.n_samples, n_rho))
    for j, dj in enumerate(d):
        if dj <= 0:
            continue
        n_int = max(2, 2 * math.ceil(dj / spacing))
        u = np.linspace(0.0, 0.5 * math.pi, n_int + 1)
        w = np.full(n_int + 1, 0.5 * math.pi / n_int)
        w[0] *= 0.5
        w[-1] *= 0.5
        rho = dj * np.sin(u)
        w = w * rho
        pos = rho / drho
        k0 = np.minimum(np.floor(pos).astype(int), n_rho - 2)
        frac = pos - k0
        np.add.at(A[j], k0, w * (1.0 - frac))
        np.add.at(A[j], k0 + 1, w * frac)
    return A


def _time_derivative(W: np.ndarray, dt: float) -> np.ndarray:
    """Second order central differences along axis 0, one-sided at both ends."""
    D = np.empty_like(W)
    D[1:-1] = (W[2:] - W[:-2]) / (2 * dt)
    D[0] = (-3 * W[0] + 4 * W[1] - W[2]) / (2 * dt)
    D[-1] = (3 * W[-1] - 4 * W[-2] + W[-3]) / (2 * dt)
    return D


class WaveOperator:
    """Linear map ``f -> p`` on a fixed grid/geometry/time grid, with exact transpose."""

    def __init__(self, geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid):
        check_time_grid(geom, grid, tgrid)
        self.geom, self.grid, self.tgrid = geom, grid, tgrid
        v = geom.sound_speed
        self.drho = v * tgrid.dt
        self.n_rho = int(math.ceil(tgrid.t_end / tgrid.dt)) + 2
        A = _abel_matrix(tgrid, v, grid.spacing, self.n_rho)
        # rows: time samples, columns: radius table
        self.time_matrix = np.ascontiguousarray(_time_derivative(A, tgrid.dt) / v)
        self._sensors = np.ascontiguousarray(geom.positions, dtype=np.float64)

    @property
    def shape(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return self.grid.shape, (self.geom.n_sensors, self.tgrid.n_samples)

    def circular_means(self, f: np.ndarray) -> np.ndarray:
        g = self.grid
        return _circular_means(np.ascontiguousarray(f, dtype=np.float64), g.x_range[0], g.y_range[0],
                               g.dx, g.dy, self._sensors, self.drho, self.n_rho, g.spacing)

    def forward(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f)
        if f.shape != self.grid.shape:
            raise ShapeError(f"image shape {f.shape} does not match grid {self.grid.shape}")
        return self.circular_means(f) @ self.time_matrix.T

    def adjoint(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if p.shape != self.shape[1]:
            raise ShapeError(f"sinogram shape {p.shape} does not match {self.shape[1]}")
        table = np.ascontiguousarray(p @ self.time_matrix)
        g = self.grid
        return _circular_means_adjoint(table, g.n, g.x_range[0], g.y_range[0], g.dx, g.dy,
                                       self._sensors, self.drho, g.spacing)


@lru_cache(maxsize=16)
def wave_operator(geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid) -> WaveOperator:
    return WaveOperator(geom, grid, tgrid)


def wave_forward(f: np.ndarray, geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid) -> np.ndarray:
    """Sensor pressure traces ``(n_sensors, n_samples)`` for initial pressure ``f``."""
    return wave_operator(geom, grid, tgrid).forward(f)


def wave_adjoint(g: np.ndarray, geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid) -> np.ndarray:
    """Transpose of :func:`wave_forward`."""
    return wave_operator(geom, grid, tgrid).adjoint(g)


# ---------------------------------------------------------------------------
# convolutions and noise
# ---------------------------------------------------------------------------

def _check_odd_1d(kernel):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.size % 2 == 0:
        raise ShapeError(f"time kernel must be 1D with odd length, got shape {kernel.shape}")
    return kernel


def time_convolve(g: np.ndarray, irf) -> np.ndarray:
    """Per-sensor 'same'-size convolution in time with zero padding."""
    irf = _check_odd_1d(irf)
    return ndimage.convolve1d(np.asarray(g, dtype=np.float64), irf, axis=-1, mode="constant", cval=0.0)


def time_convolve_adjoint(g: np.ndarray, irf) -> np.ndarray:
    """Transpose of :func:`time_convolve` (correlation with the same kernel)."""
    irf = _check_odd_1d(irf)
    return ndimage.convolve1d(np.asarray(g, dtype=np.float64), irf[::-1], axis=-1, mode="constant", cval=0.0)


def image_convolve(f: np.ndarray, psf: np.ndarray) -> np.ndarray:
    """2D 'same'-size convolution with zero padding."""
    psf = np.asarray(psf, dtype=np.float64)
    if psf.ndim != 2 or psf.shape[0] % 2 == 0 or psf.shape[1] % 2 == 0:
        raise ShapeError(f"PSF must be 2D with odd side lengths, got shape {psf.shape}")
    return signal.convolve2d(np.asarray(f, dtype=np.float64), psf, mode="same", boundary="fill")


def add_gaussian_noise(g: np.ndarray, sigma_fraction: float, seed: int) -> np.ndarray:
    """Add white noise with std ``sigma_fraction * max|g|``."""
    if sigma_fraction < 0:
        raise ValueError(f"noise fraction must be non-negative, got {sigma_fraction}")
    g = np.asarray(g)
    if sigma_fraction == 0:
        return g.copy()
    rng = np.random.default_rng(seed)
    sigma = sigma_fraction * float(np.max(np.abs(g)))
    return g + rng.normal(0.0, sigma, size=g.shape)


def gaussian_irf(sigma_samples: float = 2.0, half_width: int | None = None) -> np.ndarray:
    """Unit-sum sampled Gaussian pulse, a simple band-limited detector response."""
    if half_width is None:
        half_width = int(math.ceil(4 * sigma_samples))
    k = np.arange(-half_width, half_width + 1)
    irf = np.exp(-0.5 * (k / sigma_samples) ** 2)
    return irf / irf.sum()


def estimate_psf(point_data: np.ndarray, geom: DetectionGeometry, grid: ImageGrid,
                 tgrid: TimeGrid, crop: int = 9) -> np.ndarray:
    """Image-domain kernel from data of a point-like source.

    Backprojects the data, centres a ``crop x crop`` window on the intensity
    maximum and normalises the window to unit sum.
    """
    from .backprojection import ubp

    if crop % 2 == 0 or crop < 1:
        raise ShapeError(f"crop size must be odd, got {crop}")
    if crop > grid.n:
        raise ShapeError(f"crop size {crop} exceeds grid size {grid.n}")
    rec = ubp(point_data, geom, grid, tgrid)
    if not np.any(rec):
        raise ValueError("point reconstruction is identically zero; no peak to centre on")
    iy, ix = np.unravel_index(np.argmax(rec), rec.shape)
    h = crop // 2
    padded = np.pad(rec, h)
    kernel = padded[iy:iy + crop, ix:ix + crop].copy()
    total = kernel.sum()
    if total == 0:
        raise ValueError("PSF window sums to zero")
    return kernel / total

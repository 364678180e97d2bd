"""Universal backprojection, DAL weights and the weighted backprojection layer.

The data filter works in acoustic path length ``d = v t``; with that choice
the inversion constants do not depend on the sound speed:

    h(s, tau) = int_tau^{d_max} d/dd (g(s, d) / d) / sqrt(d^2 - tau^2) dd
    (B g)(r)  = 1/pi * sum_s  ds * <n_s, r - s> * h(s, |r - s|)

The inner integral is evaluated exactly for the piecewise linear interpolant
of ``d/dd (g / d)``: with ``d = tau cosh(u)`` both ``int dd / sqrt(d^2 - tau^2)``
and ``int d dd / sqrt(d^2 - tau^2)`` have closed forms, so the square-root
singularity never gets sampled.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numba
import numpy as np

from .forward import ShapeError
from .geometry import DetectionGeometry, ImageGrid, TimeGrid

DAL_TAPER = 4.0  # logistic slope per radian of edge-distance difference


@lru_cache(maxsize=16)
def _filter_matrix(d0: float, dd: float, n: int) -> np.ndarray:
    """``F`` with ``h = g @ F.T`` for path lengths ``d_j = d0 + j * dd``."""
    d = d0 + dd * np.arange(n)
    # q = D (g / d), D = central differences, second order one-sided at the ends
    D = np.zeros((n, n))
    i = np.arange(1, n - 1)
    D[i, i + 1] = 1.0
    D[i, i - 1] = -1.0
    D[0, :3] = (-3.0, 4.0, -1.0)
    D[-1, -3:] = (1.0, -4.0, 3.0)
    D /= 2 * dd
    with np.errstate(divide="ignore"):
        inv_d = np.where(d > 0, 1.0 / d, 0.0)
    Q = D * inv_d[None, :]

    P = np.zeros((n, n))
    for j in range(n - 1):
        tau = d[j]
        lo, hi = d[j:-1], d[j + 1:]
        if tau > 0:
            i0 = np.arccosh(hi / tau) - np.arccosh(np.maximum(lo / tau, 1.0))
            i1 = np.sqrt(hi * hi - tau * tau) - np.sqrt(np.maximum(lo * lo - tau * tau, 0.0))
            c = (i1 - lo * i0) / dd
            P[j, j:-1] += i0 - c
            P[j, j + 1:] += c
        else:
            # tau = 0: integrand q / d; q ~ d near the origin so the first cell gives q(d_1)
            P[j, j + 1] += 1.0
            lo, hi = lo[1:], hi[1:]
            i0 = np.log(hi / lo)
            c = (dd - lo * i0) / dd
            P[j, j + 1:-1] += i0 - c
            P[j, j + 2:] += c
    return P @ Q


def ubp_filter(g: np.ndarray, geom: DetectionGeometry, tgrid: TimeGrid) -> np.ndarray:
    """Filtered data ``h(s, d_j)`` tabulated on the sinogram's own time grid."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != tgrid.n_samples:
        raise ShapeError(f"sinogram shape {g.shape} does not match {tgrid.n_samples} time samples")
    v = geom.sound_speed
    F = _filter_matrix(v * tgrid.t_start, v * tgrid.dt, tgrid.n_samples)
    return g @ F.T


@numba.njit(parallel=True, cache=True)
def _backproject(h, sensors, normals, xs, ys, d0, dd, scale, weights, use_weights):
    n_s, n_t = h.shape
    ny, nx = ys.shape[0], xs.shape[0]
    out = np.zeros((ny, nx))
    for iy in numba.prange(ny):
        y = ys[iy]
        for ix in range(nx):
            x = xs[ix]
            acc = 0.0
            for s in range(n_s):
                rx = x - sensors[s, 0]
                ry = y - sensors[s, 1]
                pos = (math.sqrt(rx * rx + ry * ry) - d0) / dd
                if pos < 0.0 or pos > n_t - 1:
                    continue
                k = min(int(pos), n_t - 2)
                fr = pos - k
                val = (1.0 - fr) * h[s, k] + fr * h[s, k + 1]
                term = (normals[s, 0] * rx + normals[s, 1] * ry) * val
                if use_weights:
                    term *= weights[s, iy, ix]
                acc += term
            out[iy, ix] = scale * acc
    return out


@numba.njit(parallel=True, cache=True)
def _terms(h, sensors, normals, xs, ys, d0, dd, scale):
    n_s, n_t = h.shape
    ny, nx = ys.shape[0], xs.shape[0]
    out = np.zeros((n_s, ny, nx))
    for iy in numba.prange(ny):
        y = ys[iy]
        for ix in range(nx):
            x = xs[ix]
            for s in range(n_s):
                rx = x - sensors[s, 0]
                ry = y - sensors[s, 1]
                pos = (math.sqrt(rx * rx + ry * ry) - d0) / dd
                if pos < 0.0 or pos > n_t - 1:
                    continue
                k = min(int(pos), n_t - 2)
                fr = pos - k
                val = (1.0 - fr) * h[s, k] + fr * h[s, k + 1]
                out[s, iy, ix] = scale * (normals[s, 0] * rx + normals[s, 1] * ry) * val
    return out


def _check_h(h, geom, tgrid):
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (geom.n_sensors, tgrid.n_samples):
        raise ShapeError(f"filtered data shape {h.shape} != {(geom.n_sensors, tgrid.n_samples)}")
    return np.ascontiguousarray(h)


def _common(geom, grid, tgrid):
    v = geom.sound_speed
    return (np.ascontiguousarray(geom.positions), np.ascontiguousarray(geom.normals),
            grid.x, grid.y, v * tgrid.t_start, v * tgrid.dt, geom.arc_element / math.pi)


def ubp_backproject(h: np.ndarray, geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid) -> np.ndarray:
    """Unweighted backprojection of filtered data (sum over the measured sensors)."""
    h = _check_h(h, geom, tgrid)
    return _backproject(h, *_common(geom, grid, tgrid), np.zeros((1, 1, 1)), False)


def weighted_backproject(h: np.ndarray, V: np.ndarray, geom: DetectionGeometry, grid: ImageGrid,
                         tgrid: TimeGrid) -> np.ndarray:
    """Backprojection with a per (sensor, pixel) weight ``V[s, iy, ix]``."""
    h = _check_h(h, geom, tgrid)
    V = np.asarray(V, dtype=np.float64)
    if V.shape != (geom.n_sensors,) + grid.shape:
        raise ShapeError(f"weight field shape {V.shape} != {(geom.n_sensors,) + grid.shape}")
    return _backproject(h, *_common(geom, grid, tgrid), np.ascontiguousarray(V), True)


def backprojection_terms(h: np.ndarray, geom: DetectionGeometry, grid: ImageGrid,
                         tgrid: TimeGrid) -> np.ndarray:
    """Per-sensor contributions ``T[s, iy, ix]``; the weighted UBP is ``sum_s V[s] * T[s]``."""
    h = _check_h(h, geom, tgrid)
    return _terms(h, *_common(geom, grid, tgrid))


def weighted_backproject_grad_v(h: np.ndarray, grad_out: np.ndarray, geom: DetectionGeometry,
                                grid: ImageGrid, tgrid: TimeGrid) -> np.ndarray:
    """Gradient with respect to ``V`` given the gradient with respect to the output image."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != grid.shape:
        raise ShapeError(f"output gradient shape {grad_out.shape} != {grid.shape}")
    return backprojection_terms(h, geom, grid, tgrid) * grad_out[None]


def ubp(g: np.ndarray, geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid) -> np.ndarray:
    """Filter and backproject in one call."""
    return ubp_backproject(ubp_filter(g, geom, tgrid), geom, grid, tgrid)


# ---------------------------------------------------------------------------
# DAL weights
# ---------------------------------------------------------------------------

def _antipode_angles(geom, points, angles):
    """Angle of the far intersection of the line s -> r beyond r, broadcast over inputs."""
    s = geom.radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    d = points - s
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    rd = np.sum(points * d, axis=-1)
    t = -rd + np.sqrt(rd * rd - np.sum(points * points, axis=-1) + geom.radius ** 2)
    q = points + t[..., None] * d
    return np.arctan2(q[..., 1], q[..., 0])


def dal_weight(geom: DetectionGeometry, points, angles) -> np.ndarray:
    """Deterministic DAL weight ``v(r, s)`` for boundary points at ``angles``.

    ``points`` (..., 2) and ``angles`` (...) broadcast.  Zero for boundary
    points off the measured arc and for ``r`` outside the circle, one when the
    antipodal point is off the arc, and otherwise a logistic split that sums to
    one over the antipodal pair and favours the point farther from the arc ends.
    """
    points = np.asarray(points, dtype=float)
    angles = np.asarray(angles, dtype=float)
    points, angles = np.broadcast_arrays(points, angles[..., None])
    angles = angles[..., 0]
    inside = np.linalg.norm(points, axis=-1) < geom.radius
    safe = np.where(inside[..., None], points, 0.0)
    anti = _antipode_angles(geom, safe, angles)
    on = geom.on_arc(angles)
    anti_on = geom.on_arc(anti)
    if geom.is_full_circle:
        both = np.full(angles.shape, 0.5)
    else:
        gap = geom.edge_distance(angles) - geom.edge_distance(anti)
        both = 0.5 * (1.0 + np.tanh(0.5 * DAL_TAPER * gap))  # logistic, exactly antisymmetric
    w = np.where(anti_on, both, 1.0)
    return np.where(on & inside, w, 0.0)


def dal_weights_deterministic(geom: DetectionGeometry, grid: ImageGrid) -> np.ndarray:
    """Weight field ``(n_sensors, n, n)`` evaluated at the sensor positions."""
    X, Y = grid.meshgrid()
    pts = np.stack([X, Y], axis=-1)[None]
    ang = np.asarray(geom.angles)[:, None, None]
    return dal_weight(geom, pts, ang)

"""Scale- and shift-invariant image error measures."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class MetricReport:
    l2: float
    l1: float
    ssim: float
    correlation: float

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list[float]:
        return list(astuple(self))


def _pair(H, F):
    H = np.asarray(H, dtype=np.float64).ravel()
    F = np.asarray(F, dtype=np.float64).ravel()
    if H.shape != F.shape:
        raise ValueError(f"image sizes differ: {H.size} vs {F.size}")
    return H, F


def _affine_fit(H, F):
    """Least-squares ``(alpha, beta)`` with ``alpha * H - beta ~ F``."""
    A = np.stack([H, -np.ones_like(H)], axis=1)
    coef, *_ = np.linalg.lstsq(A, F, rcond=None)
    return float(coef[0]), float(coef[1])


def rel_l2_affine(H, F) -> float:
    """``min_{a,b} ||a H - F - b||_2 / ||F||_2``."""
    H, F = _pair(H, F)
    norm = np.linalg.norm(F)
    if norm == 0:
        raise ValueError("reference image is identically zero")
    a, b = _affine_fit(H, F)
    return float(np.linalg.norm(a * H - b - F) / norm)


def _golden_min(fun, lo, hi, tol):
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = fun(c), fun(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = fun(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = fun(d)
    x = 0.5 * (lo + hi)
    return x, fun(x)


def rel_l1_affine(H, F) -> float:
    """``min_{a,b} ||a H - F - b||_1 / ||F||_1``.

    For fixed ``a`` the best shift is a median; the remaining convex function of
    ``a`` is bracketed by a scan and refined by golden-section search.
    """
    H, F = _pair(H, F)
    norm = np.abs(F).sum()
    if norm == 0:
        raise ValueError("reference image is identically zero")

    def cost(a):
        r = a * H - F
        return float(np.abs(r - np.median(r)).sum())

    spread = np.abs(H - np.median(H)).sum()
    if spread == 0:
        return cost(0.0) / norm
    # cost(a) >= |a| * spread - ||F||_1 and cost(0) <= ||F||_1 bound the minimiser
    bound = 2.0 * norm / spread
    grid = np.linspace(-bound, bound, 201)
    vals = np.array([cost(a) for a in grid])
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    a, best = _golden_min(cost, lo, hi, 1e-12 * bound)
    return min(best, float(vals[k])) / norm


def _gaussian_window(size=11, sigma=1.5):
    k = np.arange(size) - size // 2
    g = np.exp(-0.5 * (k / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim(X, Y, data_range: float | None = None, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over the valid region of a Gaussian-weighted sliding window.

    ``data_range`` defaults to the dynamic range of ``Y`` (the reference).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise ValueError(f"SSIM needs two equal-size 2D images, got {X.shape} and {Y.shape}")
    if min(X.shape) < window:
        raise ValueError(f"images smaller than the {window}x{window} window")
    if data_range is None:
        data_range = float(Y.max() - Y.min())
    if data_range <= 0:
        raise ValueError("reference image has zero dynamic range")
    w = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = _filter_valid(X, w), _filter_valid(Y, w)
    sxx = _filter_valid(X * X, w) - mx * mx
    syy = _filter_valid(Y * Y, w) - my * my
    sxy = _filter_valid(X * Y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim_affine(H, F, rounds: int = 20) -> float:
    """Best SSIM of ``a H - b`` against ``F`` found by coordinate search.

    Starts from the better of the identity and the least-squares affine fit,
    so the value never falls below either starting point.
    """
    H = np.asarray(H, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    rng_f = float(F.max() - F.min())
    if rng_f <= 0:
        raise ValueError("reference image has zero dynamic range")

    def score(a, b):
        return ssim(a * H - b, F, data_range=rng_f)

    a_fit, b_fit = _affine_fit(H.ravel(), F.ravel())
    start = [(1.0, 0.0), (a_fit, b_fit)]
    a, b = max(start, key=lambda ab: score(*ab))
    best = score(a, b)
    half_a = 3.0 * max(abs(a_fit), 1e-12)
    half_b = 3.0 * max(abs(b_fit), rng_f)
    for _ in range(rounds):
        prev = best
        a_new, s = _golden_min(lambda t: -score(t, b), a - half_a, a + half_a, 1e-6 * half_a)
        if -s > best:
            a, best = a_new, -s
        b_new, s = _golden_min(lambda t: -score(a, t), b - half_b, b + half_b, 1e-6 * half_b)
        if -s > best:
            b, best = b_new, -s
        if best - prev < 1e-10:
            break
    return best


def correlation(H, F) -> float:
    H, F = _pair(H, F)
    if H.std() == 0 or F.std() == 0:
        raise ValueError("correlation undefined for a constant image")
    h = H - H.mean()
    f = F - F.mean()
    return float(np.dot(h, f) / math.sqrt(np.dot(h, h) * np.dot(f, f)))


def metric_report(H, F) -> MetricReport:
    return MetricReport(rel_l2_affine(H, F), rel_l1_affine(H, F), ssim_affine(H, F), correlation(H, F))


def evaluate_suite(reconstructions, truths) -> MetricReport:
    """Average of each measure over paired images."""
    if len(reconstructions) != len(truths):
        raise ValueError(f"{len(reconstructions)} reconstructions for {len(truths)} references")
    if not len(truths):
        raise ValueError("empty evaluation set")
    reports = [metric_report(h, f) for h, f in zip(reconstructions, truths)]
    return MetricReport(*np.mean([r.as_row() for r in reports], axis=0).tolist())

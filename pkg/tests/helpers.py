"""Shared instances and the finite-difference gradient checker."""

import numpy as np

from patrecon.geometry import ImageGrid, TimeGrid, make_arc_geometry
from patrecon.network import UnetConfig, UnetParams, unet_init


def small_setup(n=16, n_sensors=6, n_samples=128):
    """Arc of radius 10 mm around an ``n x n`` grid covering [-4, 4] x [-6, 2] mm."""
    geom = make_arc_geometry(radius=10.0, n_sensors=n_sensors, angular_increment=np.radians(150 / n_sensors))
    grid = ImageGrid(n, (-4.0, 4.0), (-6.0, 2.0))
    dt = 0.2 / geom.sound_speed
    return geom, grid, TimeGrid(n_samples, dt, dt)


def random_unet(config: UnetConfig, seed=0, bias_scale=0.1) -> UnetParams:
    """Float64 network with every layer (including the output layer) random."""
    U = unet_init(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for name, w in U.items():
        if name.startswith("out") or name.endswith("_b"):
            w[...] = bias_scale * rng.standard_normal(w.shape)
    return U


def same_pattern(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def finite_difference_check(evaluate, array, index, analytic, steps=(1e-3, 1e-6), floor=1e-8):
    """Central difference of ``evaluate()`` in ``array[index]`` against ``analytic``.

    ``evaluate`` returns ``(loss, activation_pattern)``.  A probe pair whose
    patterns differ straddles a ReLU or pooling kink and is retried with the
    next, smaller step.  Returns the relative error of the first kink-free
    probe, or ``None`` when the value lies within the smallest step of a kink.
    """
    orig = array[index]
    for eps in steps:
        array[index] = orig + eps
        lp, pat_p = evaluate()
        array[index] = orig - eps
        lm, pat_m = evaluate()
        array[index] = orig
        if same_pattern(pat_p, pat_m):
            fd = (lp - lm) / (2 * eps)
            return abs(fd - analytic) / max(abs(fd), abs(analytic), floor)
    return None


def grid_search_affine(H, F, p, half_width=5.0, step=1e-3):
    """Minimum of ``||a H - b - F||_p / ||F||_p`` over the grid ``a, b in [-w, w]`` with spacing ``step``.

    For fixed ``a`` the cost is convex in ``b``, so its minimum over the grid
    points is attained at a grid neighbour of the continuous minimiser (the
    mean for p = 2, the median for p = 1); this makes the full 2D search exact.
    """
    H = np.asarray(H, dtype=np.float64).ravel()
    F = np.asarray(F, dtype=np.float64).ravel()
    k = int(round(half_width / step))
    a = step * np.arange(-k, k + 1)
    R = a[:, None] * H[None, :] - F[None, :]  # residual before the shift
    centre = R.mean(axis=1) if p == 2 else np.median(R, axis=1)
    lo = np.clip(np.floor(centre / step), -k, k) * step
    best = np.full(len(a), np.inf)
    for b in (lo, np.minimum(lo + step, k * step)):
        r = R - b[:, None]
        cost = np.sqrt(np.sum(r * r, axis=1)) if p == 2 else np.sum(np.abs(r), axis=1)
        best = np.minimum(best, cost)
    norm = np.linalg.norm(F) if p == 2 else np.abs(F).sum()
    return float(best.min() / norm)


def random_metric_pair(rng, n=8):
    """Reference image and a noisy affine copy whose best fit lies inside [-5, 5]^2."""
    F = rng.random((n, n))
    a, b = rng.uniform(0.3, 3.0) * rng.choice([-1.0, 1.0]), rng.uniform(-2.0, 2.0)
    H = (F + b) / a + rng.uniform(0.05, 0.5) * rng.standard_normal((n, n))
    return H, F

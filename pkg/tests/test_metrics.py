import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patrecon.metrics import (MetricReport, correlation, evaluate_suite, metric_report, rel_l1_affine,
                              rel_l2_affine, ssim, ssim_affine)

from helpers import grid_search_affine, random_metric_pair

EXACT = 1e-12


@pytest.fixture
def image(rng):
    return rng.random((16, 16)) + 0.1


def test_l2_identities(image):
    assert rel_l2_affine(image, image) <= EXACT
    assert rel_l2_affine(2 * image + 3, image) <= EXACT


def test_l1_identities(image):
    assert rel_l1_affine(image, image) <= EXACT
    assert rel_l1_affine(-image, image) <= EXACT
    assert rel_l1_affine(0.25 * image - 1.5, image) <= EXACT


def test_ssim_identities(image):
    assert ssim(image, image) == 1.0
    assert ssim_affine(image, image) == pytest.approx(1.0, abs=EXACT)
    assert ssim_affine(0.5 * image, image) == pytest.approx(1.0, abs=EXACT)


def test_correlation_identities(image):
    assert correlation(image, image) == pytest.approx(1.0, abs=EXACT)
    assert correlation(-image, image) == pytest.approx(-1.0, abs=EXACT)
    assert correlation(image + 4.0, image) == pytest.approx(1.0, abs=EXACT)


@pytest.mark.parametrize("seed", range(5))
def test_affine_errors_match_grid_search(seed):
    H, F = random_metric_pair(np.random.default_rng(seed))
    assert abs(rel_l2_affine(H, F) - grid_search_affine(H, F, 2)) <= 1e-3
    assert abs(rel_l1_affine(H, F) - grid_search_affine(H, F, 1)) <= 1e-3


def test_l1_never_worse_than_any_grid_point(rng):
    H, F = random_metric_pair(rng)
    best = rel_l1_affine(H, F)
    for a, b in rng.uniform(-5, 5, size=(200, 2)):
        assert best <= np.abs(a * H - b - F).sum() / np.abs(F).sum() + 1e-12


def ssim_loops(X, Y, L, size=11, sigma=1.5):
    k = np.arange(size) - size // 2
    g = np.exp(-k ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g) / g.sum() ** 2
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(X.shape[0] - size + 1):
        for j in range(X.shape[1] - size + 1):
            x, y = X[i:i + size, j:j + size], Y[i:i + size, j:j + size]
            mx, my = np.sum(w * x), np.sum(w * y)
            vx, vy = np.sum(w * (x - mx) ** 2), np.sum(w * (y - my) ** 2)
            cxy = np.sum(w * (x - mx) * (y - my))
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return np.mean(vals)


def test_ssim_matches_windowed_loops(rng):
    X, Y = rng.random((2, 20, 18))
    assert ssim(X, Y) == pytest.approx(ssim_loops(X, Y, Y.max() - Y.min()), rel=1e-10)


def test_ssim_affine_is_certified_lower_bound(rng):
    F = rng.random((16, 16))
    H = 3.0 * F - 1.0 + 0.3 * rng.standard_normal((16, 16))
    best = ssim_affine(H, F)
    assert best >= ssim(H, F, data_range=np.ptp(F))
    coef = np.linalg.lstsq(np.stack([H.ravel(), -np.ones(H.size)], 1), F.ravel(), rcond=None)[0]
    assert best >= ssim(coef[0] * H - coef[1], F, data_range=np.ptp(F))
    assert best <= 1.0


def test_errors_on_degenerate_input(image):
    with pytest.raises(ValueError):
        rel_l2_affine(image, np.zeros_like(image))
    with pytest.raises(ValueError):
        rel_l1_affine(image, np.zeros_like(image))
    with pytest.raises(ValueError):
        correlation(np.ones_like(image), image)
    with pytest.raises(ValueError):
        rel_l2_affine(image, image[:4])
    with pytest.raises(ValueError):
        ssim(image[:8, :8], image[:8, :8])
    with pytest.raises(ValueError):
        evaluate_suite([], [])


def test_suite_trivial_cases(rng):
    truths = [rng.random((16, 16)) for _ in range(3)]
    report = evaluate_suite(truths, truths)
    assert report.l2 <= EXACT and report.l1 <= EXACT
    assert report.ssim == pytest.approx(1.0, abs=EXACT) and report.correlation == pytest.approx(1.0, abs=EXACT)
    H = truths[0] + 0.2 * rng.standard_normal((16, 16))
    assert evaluate_suite([H], truths[:1]) == metric_report(H, truths[0])


def test_report_row_layout():
    r = MetricReport(0.1, 0.2, 0.3, 0.4)
    assert MetricReport.names() == ["l2", "l1", "ssim", "correlation"]
    assert r.as_row() == [0.1, 0.2, 0.3, 0.4]


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=finite), arrays(np.float64, (6, 6), elements=finite),
       st.permutations(range(36)))
def test_pixel_permutation_invariance(H, F, perm):
    if np.ptp(F) < 1e-3 or np.ptp(H) < 1e-3:
        return
    perm = np.asarray(perm)
    Hp, Fp = H.ravel()[perm].reshape(6, 6), F.ravel()[perm].reshape(6, 6)
    assert rel_l2_affine(Hp, Fp) == pytest.approx(rel_l2_affine(H, F), abs=1e-9)
    assert rel_l1_affine(Hp, Fp) == pytest.approx(rel_l1_affine(H, F), abs=1e-9)
    assert correlation(Hp, Fp) == pytest.approx(correlation(H, F), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=finite), arrays(np.float64, (6, 6), elements=finite),
       st.floats(0.1, 10), st.floats(-10, 10))
def test_affine_invariance_in_reconstruction(H, F, a, b):
    if np.ptp(F) < 1e-3 or np.ptp(H) < 1e-3:
        return
    assert rel_l2_affine(a * H + b, F) == pytest.approx(rel_l2_affine(H, F), abs=1e-8)
    assert rel_l1_affine(a * H + b, F) == pytest.approx(rel_l1_affine(H, F), abs=1e-8)
    assert 0.0 <= rel_l2_affine(H, F) <= 1.0 + 1e-12

"""Acquisition presets, the four-method comparison and the TV weight sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .backprojection import ubp
from .forward import estimate_psf, gaussian_irf, time_convolve, wave_forward
from .geometry import (DetectionGeometry, GeometryError, ImageGrid, TimeGrid, default_time_grid,
                       desk_geometry, full_circle_geometry, half_circle_geometry)
from .io import image_meta, write_array, write_csv
from .metrics import MetricReport, evaluate_suite, rel_l2_affine
from .network import UnetParams
from .phantoms import point_phantom
from .training import Dataset, dalnet_apply
from .variational import TvConfig, chambolle_pock_tv

METHODS = ("ubp", "tv", "tvpos", "dalnet")


def parse_geometry(text: str) -> DetectionGeometry:
    """``half``, ``desk``, ``desk:N``, ``full:N`` or a path to a geometry JSON file."""
    name, _, arg = text.partition(":")
    if name == "half" and not arg:
        return half_circle_geometry()
    if name == "desk":
        return desk_geometry(int(arg)) if arg else desk_geometry()
    if name == "full" and arg:
        return full_circle_geometry(int(arg))
    path = Path(text)
    if path.suffix == ".json" and path.exists():
        return DetectionGeometry.from_json(path.read_text())
    raise GeometryError(f"unknown geometry {text!r}; use half, desk[:N], full:N or a .json file")


@lru_cache(maxsize=8)
def _psf_cached(irf_bytes: bytes, grid: ImageGrid, crop: int) -> np.ndarray:
    reference = full_circle_geometry(256)
    tgrid = default_time_grid(reference, grid)
    center = (0.5 * sum(grid.x_range), 0.5 * sum(grid.y_range))
    data = time_convolve(wave_forward(point_phantom(center, grid), reference, grid, tgrid),
                         np.frombuffer(irf_bytes))
    return estimate_psf(data, reference, grid, tgrid, crop)


def psf_from_irf(irf: np.ndarray, grid: ImageGrid, crop: int = 9) -> np.ndarray:
    """Image-domain kernel matching a time response, from a simulated point source.

    Uses a dense full-circle reference array so the kernel carries the blur of
    the response only, not limited-view or sampling artefacts.
    """
    irf = np.ascontiguousarray(irf, dtype=np.float64)
    return _psf_cached(irf.tobytes(), grid, crop).copy()


@dataclass(frozen=True)
class Acquisition:
    geom: DetectionGeometry
    grid: ImageGrid
    tgrid: TimeGrid
    irf: np.ndarray = field(compare=False)

    @classmethod
    def create(cls, geometry: str | DetectionGeometry = "half", n: int = 256,
               irf_sigma: float = 2.0) -> "Acquisition":
        geom = parse_geometry(geometry) if isinstance(geometry, str) else geometry
        grid = ImageGrid(n)
        irf = gaussian_irf(irf_sigma) if irf_sigma > 0 else np.ones(1)
        return cls(geom, grid, default_time_grid(geom, grid), irf)

    @property
    def psf(self) -> np.ndarray:
        return psf_from_irf(self.irf, self.grid) if self.irf.size > 1 else np.ones((1, 1))


def desk_acquisition() -> Acquisition:
    """64 x 64 images, 16 sensors, Gaussian time response of two samples."""
    return Acquisition.create("desk", 64)


def reconstruct(method: str, g: np.ndarray, dataset: Dataset, irf: np.ndarray,
                tv_configs: dict[str, TvConfig] | None = None, trained=None) -> np.ndarray:
    geom, grid, tgrid = dataset.geom, dataset.grid, dataset.tgrid
    if method == "ubp":
        return ubp(g, geom, grid, tgrid)
    if method in ("tv", "tvpos"):
        config = (tv_configs or {}).get(method) or TvConfig(constraint="nonneg" if method == "tvpos" else "none")
        return chambolle_pock_tv(g, irf, config, geom, grid, tgrid)
    if method == "dalnet":
        if trained is None:
            raise ValueError("the dalnet method needs trained (weights, unet) parameters")
        V, U = trained
        return dalnet_apply(V, U, g, geom, grid, tgrid)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def run_comparison(dataset: Dataset, trained: tuple[np.ndarray, UnetParams] | None, irf: np.ndarray,
                   output_dir, tv_configs: dict[str, TvConfig] | None = None,
                   methods=METHODS, log=None) -> dict[str, MetricReport]:
    """Reconstruct every pair with each method, write images and a metrics table.

    Metrics are computed on the float32 images exactly as written, so
    re-evaluating the files reproduces the table.
    """
    methods = list(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
    if trained is not None:
        V, U = trained
        if V.shape != (dataset.geom.n_sensors,) + dataset.grid.shape or U.config.input_size != dataset.grid.n:
            raise ValueError("trained parameters do not match the dataset geometry")
    output_dir = Path(output_dir)
    truths = [f.astype(np.float32) for f in dataset.images]
    reports = {}
    for method in methods:
        recs = []
        for i, g in enumerate(dataset.sinograms):
            rec = reconstruct(method, g, dataset, irf, tv_configs, trained).astype(np.float32)
            write_array(output_dir / method / f"pair_{i:04d}.patarr", rec, image_meta(dataset.grid, method=method))
            recs.append(rec)
        reports[method] = evaluate_suite(recs, truths)
        if log is not None:
            log(format_row(method, reports[method]))
    write_report(output_dir / "metrics.csv", reports)
    for i, f in enumerate(truths):
        write_array(output_dir / "truth" / f"pair_{i:04d}.patarr", f, image_meta(dataset.grid))
    return reports


def format_row(method: str, report: MetricReport) -> str:
    return f"{method:<8}" + "".join(f"{v:>12.4f}" for v in report.as_row())


def format_table(reports: dict[str, MetricReport]) -> str:
    header = f"{'method':<8}" + "".join(f"{n:>12}" for n in MetricReport.names())
    return "\n".join([header] + [format_row(m, r) for m, r in reports.items()])


def write_report(path, reports: dict[str, MetricReport]) -> Path:
    rows = [[m] + [f"{v:.6f}" for v in r.as_row()] for m, r in reports.items()]
    return write_csv(path, ["method"] + MetricReport.names(), rows)


def parse_sweep(text: str) -> np.ndarray:
    """``lo:hi:n`` to ``n`` logarithmically spaced values."""
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise ValueError(f"lambda sweep must look like lo:hi:n, got {text!r}") from None
    if not (0 < lo <= hi) or n < 1:
        raise ValueError(f"lambda sweep needs 0 < lo <= hi and n >= 1, got {text!r}")
    return np.geomspace(lo, hi, n)


def lambda_sweep(dataset: Dataset, irf: np.ndarray, lambdas, constraint: str = "none",
                 n_iters: int = 30) -> tuple[float, list[tuple[float, float]]]:
    """Mean affine relative l2 error per TV weight; returns the best weight and the table."""
    table = []
    for lam in lambdas:
        config = TvConfig(lam=float(lam), n_iters=n_iters, constraint=constraint)
        errs = [rel_l2_affine(chambolle_pock_tv(g, irf, config, dataset.geom, dataset.grid, dataset.tgrid), f)
                for g, f in dataset.pairs()]
        table.append((float(lam), float(np.mean(errs))))
    best = min(table, key=lambda row: row[1])[0]
    return best, table


"""End-to-end training of the learned-weight backprojection followed by a Unet."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .backprojection import (backprojection_terms, dal_weights_deterministic, ubp_filter,
                             weighted_backproject)
from .forward import ShapeError, add_gaussian_noise, image_convolve, wave_forward
from .geometry import DetectionGeometry, ImageGrid, TimeGrid
from .io import read_array, read_csv, write_array, write_csv
from .network import UnetConfig, UnetParams, unet_apply, unet_backward, unet_forward, unet_init
from .phantoms import PhantomSpec, desk_phantom_spec, vessel_phantom
from .variational import DivergenceError

V_INITS = ("deterministic-dal", "ones")
SPLITS = ("train", "validation", "test")
_TERM_CACHE_BYTES = 1 << 30


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.99
    batch_size: int = 4
    n_epochs: int = 30
    seed: int = 0
    v_init: str = "deterministic-dal"
    nonneg_projection: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_epochs < 0:
            raise ValueError(f"n_epochs must be >= 0, got {self.n_epochs}")
        if self.v_init not in V_INITS:
            raise ValueError(f"v_init must be one of {V_INITS}, got {self.v_init!r}")
        np.dtype(self.dtype)


@dataclass
class Dataset:
    """Sinogram/image pairs sharing one acquisition setup, each tagged with a split."""

    geom: DetectionGeometry
    grid: ImageGrid
    tgrid: TimeGrid
    sinograms: np.ndarray  # (N, n_sensors, n_samples)
    images: np.ndarray     # (N, n, n)
    splits: np.ndarray     # (N,) of split names

    def __post_init__(self):
        self.sinograms = np.asarray(self.sinograms)
        self.images = np.asarray(self.images)
        self.splits = np.asarray(self.splits, dtype=object)
        n = len(self.images)
        if self.sinograms.shape != (n, self.geom.n_sensors, self.tgrid.n_samples):
            raise ShapeError(f"sinograms {self.sinograms.shape} inconsistent with {n} pairs and the geometry")
        if self.images.shape[1:] != self.grid.shape:
            raise ShapeError(f"images {self.images.shape} inconsistent with grid {self.grid.shape}")
        if self.splits.shape != (n,):
            raise ShapeError(f"{len(self.splits)} split tags for {n} pairs")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, split: str) -> "Dataset":
        keep = self.splits == split
        return Dataset(self.geom, self.grid, self.tgrid, self.sinograms[keep], self.images[keep], self.splits[keep])

    def pairs(self):
        return list(zip(self.sinograms, self.images))

    def save(self, directory) -> None:
        from .io import sinogram_meta, grid_meta

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_array(directory / "sinograms.patarr", self.sinograms,
                    sinogram_meta(self.geom, self.tgrid, self.grid))
        write_array(directory / "images.patarr", self.images, {"kind": "images", "grid": grid_meta(self.grid)})
        (directory / "splits.json").write_text(json.dumps(list(self.splits)))

    @classmethod
    def load(cls, directory) -> "Dataset":
        from .io import geometry_from_meta, grid_from_meta, read_meta

        directory = Path(directory)
        meta = read_meta(directory / "sinograms.patarr")
        geom, tgrid = geometry_from_meta(meta)
        grid = grid_from_meta(meta["grid"])
        splits = json.loads((directory / "splits.json").read_text())
        return cls(geom, grid, tgrid, read_array(directory / "sinograms.patarr"),
                   read_array(directory / "images.patarr"), np.array(splits, dtype=object))


def split_counts(n_pairs: int, val_fraction: float, test_fraction: float) -> tuple[int, int, int]:
    n_val = int(round(n_pairs * val_fraction))
    n_test = int(round(n_pairs * test_fraction))
    n_train = n_pairs - n_val - n_test
    if n_train < 0 or n_val < 0 or n_test < 0:
        raise ValueError(f"split fractions {val_fraction}, {test_fraction} do not fit {n_pairs} pairs")
    return n_train, n_val, n_test


def generate_dataset(n_pairs: int, geom: DetectionGeometry, grid: ImageGrid, tgrid: TimeGrid,
                     psf: np.ndarray | None = None, noise_fraction: float = 0.0, seed: int = 0,
                     val_fraction: float = 0.0625, test_fraction: float = 0.0,
                     phantom: PhantomSpec | None = None) -> Dataset:
    """Random vessel phantoms and their simulated, blurred and noisy sinograms.

    Pairs are ordered train, validation, test.  ``phantom`` is a template whose
    seed is replaced per pair; by default small grids get thinner vessels.
    """
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    counts = split_counts(n_pairs, val_fraction, test_fraction)
    if phantom is None:
        phantom = desk_phantom_spec() if grid.n <= 64 else PhantomSpec()
    seeds = np.random.SeedSequence(seed).generate_state(2 * n_pairs)
    images = np.empty((n_pairs,) + grid.shape)
    sinograms = np.empty((n_pairs, geom.n_sensors, tgrid.n_samples))
    for i in range(n_pairs):
        f = vessel_phantom(dataclasses.replace(phantom, seed=int(seeds[2 * i])), grid)
        f = f / f.max()
        source = f if psf is None else image_convolve(f, psf)
        g = wave_forward(source, geom, grid, tgrid)
        images[i] = f
        sinograms[i] = add_gaussian_noise(g, noise_fraction, int(seeds[2 * i + 1]))
    splits = np.array([name for name, k in zip(SPLITS, counts) for _ in range(k)], dtype=object)
    return Dataset(geom, grid, tgrid, sinograms, images, splits)


# ---------------------------------------------------------------------------
# network evaluation
# ---------------------------------------------------------------------------

def initial_weights(geom: DetectionGeometry, grid: ImageGrid, v_init: str = "deterministic-dal",
                    dtype=np.float64) -> np.ndarray:
    if v_init == "deterministic-dal":
        return dal_weights_deterministic(geom, grid).astype(dtype)
    if v_init == "ones":
        return np.ones((geom.n_sensors,) + grid.shape, dtype=dtype)
    raise ValueError(f"v_init must be one of {V_INITS}, got {v_init!r}")


def _check_weights(V, U, geom, grid):
    if V.shape != (geom.n_sensors,) + grid.shape:
        raise ShapeError(f"weight field shape {V.shape} != {(geom.n_sensors,) + grid.shape}")
    if U.config.input_size != grid.n:
        raise ShapeError(f"network input size {U.config.input_size} != grid size {grid.n}")


def dalnet_apply(V: np.ndarray, U: UnetParams, g: np.ndarray, geom: DetectionGeometry, grid: ImageGrid,
                 tgrid: TimeGrid) -> np.ndarray:
    """Weighted backprojection of the filtered sinogram, then the Unet."""
    V = np.asarray(V)
    _check_weights(V, U, geom, grid)
    x = weighted_backproject(ubp_filter(g, geom, tgrid), V, geom, grid, tgrid)
    return unet_apply(U, x).astype(np.float64)


def dalnet_loss(V: np.ndarray, U: UnetParams, batch, geom: DetectionGeometry, grid: ImageGrid,
                tgrid: TimeGrid) -> float:
    """Half the mean over pairs of the summed squared pixel error."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    for g, f in batch:
        r = dalnet_apply(V, U, g, geom, grid, tgrid) - np.asarray(f, dtype=np.float64)
        total += float(np.sum(r * r))
    return total / (2 * len(batch))


def _terms_for(dataset: Dataset, dtype) -> np.ndarray:
    geom, grid, tgrid = dataset.geom, dataset.grid, dataset.tgrid
    out = np.empty((len(dataset), geom.n_sensors) + grid.shape, dtype=dtype)
    for i, g in enumerate(dataset.sinograms):
        out[i] = backprojection_terms(ubp_filter(g, geom, tgrid), geom, grid, tgrid)
    return out


class _Terms:
    """Per-sensor backprojection terms of a dataset, cached when they fit in memory."""

    def __init__(self, dataset: Dataset, dtype):
        self.dataset = dataset
        self.dtype = np.dtype(dtype)
        size = len(dataset) * dataset.geom.n_sensors * dataset.grid.n ** 2 * self.dtype.itemsize
        self.cache = _terms_for(dataset, dtype) if size <= _TERM_CACHE_BYTES else None

    def __getitem__(self, idx) -> np.ndarray:
        if self.cache is not None:
            return self.cache[idx]
        d = self.dataset
        sub = Dataset(d.geom, d.grid, d.tgrid, d.sinograms[idx], d.images[idx], d.splits[idx])
        return _terms_for(sub, self.dtype)


def _batch_step(V, U, T, F):
    """Loss and gradients for one batch of precomputed terms ``T`` and targets ``F``."""
    x = np.einsum("sij,bsij->bij", V, T)
    y, tape = unet_forward(U, x)
    r = y - F
    B = len(F)
    loss = 0.5 * float(np.sum(r.astype(np.float64) ** 2)) / B
    gU, gx = unet_backward(U, x, r / B, tape)
    gV = np.einsum("bsij,bij->sij", T, gx)
    return loss, gV, gU


def dalnet_gradient(V: np.ndarray, U: UnetParams, sinograms, images, geom: DetectionGeometry,
                    grid: ImageGrid, tgrid: TimeGrid):
    """``(loss, dloss/dV, dloss/dU)`` for a batch, by backpropagation through both stages."""
    V = np.asarray(V)
    _check_weights(V, U, geom, grid)
    images = np.asarray(images, dtype=U.dtype)
    T = np.stack([backprojection_terms(ubp_filter(g, geom, tgrid), geom, grid, tgrid)
                  for g in sinograms]).astype(U.dtype)
    return _batch_step(V.astype(U.dtype), U, T, images)


class TrainResult(NamedTuple):
    weights: np.ndarray
    unet: UnetParams
    history: list


def _eval_loss(V, U, terms: _Terms, images, batch_size):
    total = 0.0
    for start in range(0, len(images), batch_size):
        idx = np.arange(start, min(start + batch_size, len(images)))
        x = np.einsum("sij,bsij->bij", V, terms[idx])
        r = unet_apply(U, x).astype(np.float64) - images[idx]
        total += float(np.sum(r * r))
    return total / (2 * len(images))


def train(dataset: Dataset, config: TrainConfig, unet_config: UnetConfig, log=None) -> TrainResult:
    """Projected stochastic gradient descent with momentum on weights and Unet jointly.

    ``history`` holds ``(epoch, train_loss, val_loss)``; the training loss is the
    mean over the epoch's mini-batches, the validation loss is evaluated after
    the epoch (NaN without a validation split).  ``log`` receives one line per epoch.
    """
    train_set = dataset.subset("train")
    if len(train_set) == 0:
        raise ValueError("dataset has no training pairs")
    if unet_config.input_size != dataset.grid.n:
        raise ShapeError(f"network input size {unet_config.input_size} != grid size {dataset.grid.n}")
    val_set = dataset.subset("validation")
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)

    V = initial_weights(dataset.geom, dataset.grid, config.v_init, dtype)
    U = unet_init(unet_config, seed=config.seed, dtype=dtype)
    vel_V = np.zeros_like(V)
    vel_U = U.zeros_like()
    T_train = _Terms(train_set, dtype)
    F_train = train_set.images.astype(dtype)
    T_val = _Terms(val_set, dtype) if len(val_set) else None
    F_val = val_set.images.astype(np.float64)

    lr, mu = dtype.type(config.learning_rate), dtype.type(config.momentum)
    history = []
    n = len(train_set)
    for epoch in range(1, config.n_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            loss, gV, gU = _batch_step(V, U, T_train[idx], F_train[idx])
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"training loss became {loss} in epoch {epoch} at batch {start // config.batch_size}; "
                    f"try a smaller learning rate than {config.learning_rate}")
            losses.append(loss)
            vel_V *= mu
            vel_V -= lr * gV
            V += vel_V
            if config.nonneg_projection:
                np.maximum(V, 0, out=V)
            for name, w in U.items():
                v = vel_U.tensors[name]
                v *= mu
                v -= lr * gU.tensors[name]
                w += v
        val_loss = _eval_loss(V, U, T_val, F_val, config.batch_size) if T_val is not None else float("nan")
        train_loss = float(np.mean(losses))
        history.append((epoch, train_loss, val_loss))
        if log is not None:
            log(f"epoch {epoch:3d}  train {train_loss:.5g}  validation {val_loss:.5g}")
    return TrainResult(V, U, history)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory, V: np.ndarray, U: UnetParams, history=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_array(directory / "weights.patarr", V, {"kind": "weight_field", "shape": list(V.shape)})
    U.save(directory / "unet")
    if history is not None:
        write_history(directory / "history.csv", history)
    return directory


def load_checkpoint(directory, dtype=np.float32) -> tuple[np.ndarray, UnetParams]:
    directory = Path(directory)
    return read_array(directory / "weights.patarr").astype(dtype), UnetParams.load(directory / "unet", dtype)


def write_history(path, history) -> Path:
    return write_csv(path, ["epoch", "train_loss", "val_loss"], [(e, f"{a:.9g}", f"{b:.9g}") for e, a, b in history])


def read_history(path) -> list[tuple[int, float, float]]:
    return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in read_csv(path)]

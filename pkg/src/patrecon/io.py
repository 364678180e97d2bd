"""PATARR01 array files, JSON sidecars, CSV tables and PGM previews.

Array layout: 8-byte magic ``PATARR01``, little-endian u32 rank, u32 dims,
then the float32 payload in row-major order.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geometry import DetectionGeometry, ImageGrid, TimeGrid

MAGIC = b"PATARR01"


class FormatError(ValueError):
    """File is not a valid PATARR01 array."""


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_array(path, arr, meta: dict | None = None, sidecar: bool = True) -> Path:
    path = Path(path)
    a = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(a.tobytes(order="C"))
    if sidecar and meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2))
    return path


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", data, 8)
    off = 12 + 4 * rank
    if len(data) < off:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    count = math.prod(dims)
    if len(data) != off + 4 * count:
        raise FormatError(f"{path}: payload has {len(data) - off} bytes, expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def read_meta(path) -> dict:
    p = sidecar_path(path)
    return json.loads(p.read_text()) if p.exists() else {}


def grid_meta(grid: ImageGrid) -> dict:
    return {"n": grid.n, "x_range": list(grid.x_range), "y_range": list(grid.y_range)}


def grid_from_meta(d: dict) -> ImageGrid:
    return ImageGrid(int(d["n"]), tuple(d["x_range"]), tuple(d["y_range"]))


def image_meta(grid: ImageGrid, **extra) -> dict:
    return {"kind": "image", "grid": grid_meta(grid), **extra}


def sinogram_meta(geom: DetectionGeometry, tgrid: TimeGrid, grid: ImageGrid | None = None, **extra) -> dict:
    meta = {"kind": "sinogram", "geometry": json.loads(geom.to_json()), "time_grid": asdict(tgrid)}
    if grid is not None:
        meta["grid"] = grid_meta(grid)
    meta.update(extra)
    return meta


def geometry_from_meta(meta: dict) -> tuple[DetectionGeometry, TimeGrid]:
    return DetectionGeometry.from_json(meta["geometry"]), TimeGrid(**meta["time_grid"])


def write_pgm(path, img) -> Path:
    """8-bit binary PGM, min-max scaled."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi <= lo else (img - lo) / (hi - lo)
    # row 0 of the array is the smallest y; flip so y increases upwards in viewers
    data = np.round(scaled[::-1] * 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

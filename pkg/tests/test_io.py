import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from patrecon.geometry import ImageGrid, TimeGrid, half_circle_geometry
from patrecon.io import (FormatError, geometry_from_meta, grid_from_meta, read_array, read_csv, read_meta,
                         read_pgm, sinogram_meta, write_array, write_csv, write_pgm)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=1, max_dims=3, max_side=6),
              elements=st.floats(width=32, allow_nan=False)))
def test_array_round_trip_is_bitwise(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("arr") / "a.patarr"
    write_array(path, a)
    b = read_array(path)
    assert b.dtype == np.float32 and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_header_layout(tmp_path):
    path = write_array(tmp_path / "x.patarr", np.arange(6, dtype=np.float32).reshape(2, 3))
    data = path.read_bytes()
    assert data[:8] == b"PATARR01"
    assert struct.unpack("<III", data[8:20]) == (2, 2, 3)
    assert np.frombuffer(data[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_corrupt_files_rejected(tmp_path):
    path = write_array(tmp_path / "x.patarr", np.ones((4, 4)))
    data = path.read_bytes()
    (tmp_path / "bad.patarr").write_bytes(b"NOTMAGIC" + data[8:])
    with pytest.raises(FormatError):
        read_array(tmp_path / "bad.patarr")
    (tmp_path / "short.patarr").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        read_array(tmp_path / "short.patarr")


def test_sidecar_metadata(tmp_path):
    geom, grid = half_circle_geometry(), ImageGrid(64)
    tg = TimeGrid(512, 0.1, 0.1)
    path = write_array(tmp_path / "g.patarr", np.zeros((64, 512)), sinogram_meta(geom, tg, grid))
    meta = read_meta(path)
    g2, tg2 = geometry_from_meta(meta)
    assert tg2 == tg and grid_from_meta(meta["grid"]) == grid
    assert np.allclose(g2.angles, geom.angles, atol=1e-12)
    assert read_meta(tmp_path / "missing.patarr") == {}


def test_pgm_preview(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    pix = read_pgm(write_pgm(tmp_path / "p.pgm", img))
    assert pix.shape == (2, 2)
    # rows are flipped so that y grows upwards
    assert pix.tolist() == [[128, 255], [0, 64]]
    assert not np.any(read_pgm(write_pgm(tmp_path / "c.pgm", np.ones((3, 3)))))


def test_csv_round_trip(tmp_path):
    write_csv(tmp_path / "t.csv", ["method", "l2"], [["ubp", "0.5"], ["tv", "0.25"]])
    assert read_csv(tmp_path / "t.csv") == [{"method": "ubp", "l2": "0.5"}, {"method": "tv", "l2": "0.25"}]

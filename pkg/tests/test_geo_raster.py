from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kiterunner.errors import MalformedHeader, OutOfBounds, TruncatedData, ValueOutOfRange
from kiterunner.geo_raster import (FeatureRaster, GeoRef, ProbabilityRaster, load_feature_raster,
                                   load_raster, sample_prob, save_feature_raster, save_raster,
                                   world_to_cell, world_to_cells)

G10 = GeoRef(0.0, 0.0, 1.0, 10, 10)


def test_world_to_cell_origin_cell():
    assert world_to_cell(G10, (0.5, 0.5)) == (0, 0)


def test_world_to_cell_floor_convention():
    assert world_to_cell(G10, (9.99, 0.0)) == (0, 9)


def test_world_to_cell_outside_extent():
    with pytest.raises(OutOfBounds):
        world_to_cell(G10, (10.01, 0.0))


def test_boundary_point_goes_to_larger_index():
    assert world_to_cell(G10, (3.0, 4.0)) == (4, 3)


def test_georef_validation():
    with pytest.raises(ValueError):
        GeoRef(0, 0, 0.0, 2, 2)
    with pytest.raises(ValueError):
        GeoRef(0, 0, 1.0, 0, 2)


@given(st.integers(1, 12), st.integers(1, 12), st.floats(0.05, 5.0),
       st.floats(-100, 100), st.floats(-100, 100), st.data())
def test_cell_center_round_trip(w, h, res, ox, oy, data):
    g = GeoRef(ox, oy, res, w, h)
    r = data.draw(st.integers(0, h - 1))
    c = data.draw(st.integers(0, w - 1))
    assert world_to_cell(g, g.cell_center(r, c)) == (r, c)


@given(st.floats(-5, 25), st.floats(-5, 25))
def test_world_to_cell_matches_scalar_floor(x, y):
    g = GeoRef(-2.0, 1.0, 0.5, 30, 20)
    col = math.floor((x + 2.0) / 0.5)
    row = math.floor((y - 1.0) / 0.5)
    inside = 0 <= row < 20 and 0 <= col < 30
    rows, cols, mask = world_to_cells(g, [(x, y)])
    assert bool(mask[0]) == inside
    if inside:
        assert world_to_cell(g, (x, y)) == (row, col) == (rows[0], cols[0])
    else:
        with pytest.raises(OutOfBounds):
            world_to_cell(g, (x, y))


def test_sample_prob_uniform():
    r = ProbabilityRaster(G10, np.ones((10, 10)))
    assert sample_prob(r, (3.3, 7.7)) == 1.0


def test_sample_prob_two_by_two_fixture():
    r = ProbabilityRaster(GeoRef(0, 0, 1.0, 2, 2), [[0.2, 0.8], [0.4, 0.6]])
    assert sample_prob(r, (1.5, 0.5)) == pytest.approx(0.8, abs=1e-7)


def test_sample_prob_outside():
    r = ProbabilityRaster(G10, np.ones((10, 10)))
    with pytest.raises(OutOfBounds):
        sample_prob(r, (-0.1, 3))


def test_sample_many_zero_outside():
    r = ProbabilityRaster(GeoRef(0, 0, 1.0, 2, 2), [[0.2, 0.8], [0.4, 0.6]])
    out = r.sample_many([(1.5, 0.5), (5, 5), (-1, 0)])
    assert out[0] == pytest.approx(0.8, abs=1e-7)
    assert out[1] == 0.0 and out[2] == 0.0


def test_raster_rejects_out_of_range():
    with pytest.raises(ValueOutOfRange):
        ProbabilityRaster(GeoRef(0, 0, 1.0, 1, 1), [[1.5]])


@settings(max_examples=30)
@given(st.lists(st.floats(0.0, 1.0, width=32), min_size=9, max_size=9))
def test_sample_prob_bounded(vals):
    r = ProbabilityRaster(GeoRef(0, 0, 1.0, 3, 3), np.reshape(vals, (3, 3)))
    for x in (0.1, 1.5, 2.9):
        for y in (0.1, 1.5, 2.9):
            assert 0.0 <= sample_prob(r, (x, y)) <= 1.0


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    r = ProbabilityRaster(GeoRef(1.25, -3.5, 0.5, 3, 3), rng.random((3, 3)))
    save_raster(r, tmp_path / "r.prav")
    assert load_raster(tmp_path / "r.prav") == r


def test_file_layout(tmp_path):
    r = ProbabilityRaster(GeoRef(0.0, 0.0, 1.0, 2, 1), [[0.25, 0.5]])
    save_raster(r, tmp_path / "r.prav")
    raw = (tmp_path / "r.prav").read_bytes()
    head, payload = raw.split(b"\n", 3)[:3], raw.split(b"\n", 3)[3]
    assert head == [b"PRAV1", b"2 1", b"0.0 0.0 1.0"]
    assert np.frombuffer(payload, "<f4").tolist() == [0.25, 0.5]


def _write_raw(path, header, values):
    path.write_bytes(header.encode("ascii") + np.asarray(values, "<f4").tobytes())


def test_load_truncated(tmp_path):
    _write_raw(tmp_path / "t.prav", "PRAV1\n2 2\n0 0 1\n", [0.1, 0.2, 0.3])
    with pytest.raises(TruncatedData):
        load_raster(tmp_path / "t.prav")


def test_load_value_out_of_range(tmp_path):
    _write_raw(tmp_path / "v.prav", "PRAV1\n2 1\n0 0 1\n", [0.1, 1.5])
    with pytest.raises(ValueOutOfRange):
        load_raster(tmp_path / "v.prav")


@pytest.mark.parametrize("header", ["PRAV2\n1 1\n0 0 1\n", "PRAV1\n1\n0 0 1\n", "PRAV1\n1 1\n0 0 x\n",
                                    "PRAV1\n1 1\n0 0 -1\n", "PRAV1\n1 1"])
def test_load_malformed_header(tmp_path, header):
    _write_raw(tmp_path / "m.prav", header, [0.5])
    with pytest.raises(MalformedHeader):
        load_raster(tmp_path / "m.prav")


def test_feature_raster_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    f = FeatureRaster(GeoRef(0, 0, 2.0, 4, 3), rng.normal(size=(3, 4, 5)))
    save_feature_raster(f, tmp_path / "f.fras")
    g = load_feature_raster(tmp_path / "f.fras")
    assert g == f and g.channels == 5
    assert (tmp_path / "f.fras").read_bytes().startswith(b"FRAS1\n4 3 5\n")

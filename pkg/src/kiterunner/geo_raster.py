"""Georeferenced rasters: traversability probability maps and feature grids.

World coordinates are a local metric frame (meters). Cell ``(row, col)``
covers ``[origin_x + col*res, origin_x + (col+1)*res)`` in x and the same
pattern in y, so indices follow a floor convention.

File formats (text header + little-endian float32 payload, row-major, row 0
first)::

    PRAV1                       FRAS1
    width height                width height channels
    origin_x origin_y res       origin_x origin_y res
    <width*height floats>       <width*height*channels floats, channels fastest>
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MalformedHeader, OutOfBounds, TruncatedData, ValueOutOfRange


@dataclass(frozen=True)
class GeoRef:
    origin_x: float
    origin_y: float
    resolution: float
    width: int
    height: int

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"raster must be at least 1x1, got {self.width}x{self.height}")

    @property
    def extent(self):
        """(xmin, ymin, xmax, ymax) in world meters."""
        return (self.origin_x, self.origin_y,
                self.origin_x + self.width * self.resolution,
                self.origin_y + self.height * self.resolution)

    def cell_center(self, row, col):
        return (self.origin_x + (col + 0.5) * self.resolution,
                self.origin_y + (row + 0.5) * self.resolution)

    def contains(self, x, y):
        col = math.floor((x - self.origin_x) / self.resolution)
        row = math.floor((y - self.origin_y) / self.resolution)
        return 0 <= row < self.height and 0 <= col < self.width


def world_to_cell(georef: GeoRef, point) -> tuple[int, int]:
    x, y = float(point[0]), float(point[1])
    col = math.floor((x - georef.origin_x) / georef.resolution)
    row = math.floor((y - georef.origin_y) / georef.resolution)
    if not (0 <= row < georef.height and 0 <= col < georef.width):
        raise OutOfBounds(f"point ({x}, {y}) outside raster extent {georef.extent}")
    return row, col


def world_to_cells(georef: GeoRef, points):
    """Vectorised :func:`world_to_cell`; returns (rows, cols, inside_mask)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cols = np.floor((pts[:, 0] - georef.origin_x) / georef.resolution).astype(np.int64)
    rows = np.floor((pts[:, 1] - georef.origin_y) / georef.resolution).astype(np.int64)
    inside = (rows >= 0) & (rows < georef.height) & (cols >= 0) & (cols < georef.width)
    return rows, cols, inside


class ProbabilityRaster:
    """Per-cell traversability probabilities in ``[0, 1]``, stored as float32.

    float32 storage matches the on-disk payload, which keeps save/load an
    exact round trip.
    """

    def __init__(self, georef: GeoRef, cells):
        cells = np.array(cells, dtype=np.float32).reshape(georef.height, georef.width)
        if not np.all((cells >= 0.0) & (cells <= 1.0)):
            raise ValueOutOfRange("probability cells must lie in [0, 1]")
        cells.setflags(write=False)
        self.georef = georef
        self.cells = cells

    def __eq__(self, other):
        if not isinstance(other, ProbabilityRaster):
            return NotImplemented
        return self.georef == other.georef and np.array_equal(self.cells, other.cells)

    def __repr__(self):
        g = self.georef
        return f"ProbabilityRaster({g.width}x{g.height}, res={g.resolution})"

    def sample_many(self, points):
        """P_m at each point, with 0 for points outside the extent."""
        rows, cols, inside = world_to_cells(self.georef, points)
        out = np.zeros(len(rows))
        out[inside] = self.cells[rows[inside], cols[inside]]
        return out

    def with_cells(self, cells):
        return ProbabilityRaster(self.georef, cells)


def sample_prob(raster: ProbabilityRaster, point) -> float:
    row, col = world_to_cell(raster.georef, point)
    return float(raster.cells[row, col])


class FeatureRaster:
    """Per-cell feature vectors (``height x width x channels``) on a GeoRef."""

    def __init__(self, georef: GeoRef, cells):
        cells = np.array(cells, dtype=np.float32)
        if cells.ndim == 2:
            cells = cells[:, :, None]
        if cells.shape[:2] != (georef.height, georef.width):
            raise ValueError(f"cells shape {cells.shape} does not match georef")
        cells.setflags(write=False)
        self.georef = georef
        self.cells = cells

    @property
    def channels(self):
        return self.cells.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FeatureRaster):
            return NotImplemented
        return self.georef == other.georef and np.array_equal(self.cells, other.cells)


def _write(path, magic, dims, georef, payload):
    header = (f"{magic}\n{' '.join(str(d) for d in dims)}\n"
              f"{georef.origin_x!r} {georef.origin_y!r} {georef.resolution!r}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _read(path, magic, n_dims):
    with open(path, "rb") as fh:
        lines = []
        for _ in range(3):
            line = fh.readline()
            if not line.endswith(b"\n"):
                raise MalformedHeader(f"{path}: header ends early")
            lines.append(line.decode("ascii", errors="replace").strip())
        payload = fh.read()
    if lines[0] != magic:
        raise MalformedHeader(f"{path}: expected {magic!r}, found {lines[0]!r}")
    try:
        dims = [int(v) for v in lines[1].split()]
        ox, oy, res = (float(v) for v in lines[2].split())
    except ValueError as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc
    if len(dims) != n_dims or any(d < 1 for d in dims):
        raise MalformedHeader(f"{path}: bad dimensions line {lines[1]!r}")
    try:
        georef = GeoRef(ox, oy, res, dims[0], dims[1])
    except ValueError as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc
    expected = int(np.prod(dims)) * 4
    if len(payload) < expected:
        raise TruncatedData(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    if len(payload) > expected:
        raise MalformedHeader(f"{path}: {len(payload) - expected} unexpected trailing bytes")
    return georef, dims, np.frombuffer(payload, dtype="<f4").astype(np.float32)


def save_raster(raster: ProbabilityRaster, path) -> None:
    g = raster.georef
    _write(path, "PRAV1", (g.width, g.height), g, raster.cells)


def load_raster(path) -> ProbabilityRaster:
    georef, _, values = _read(path, "PRAV1", 2)
    if not np.all((values >= 0.0) & (values <= 1.0)):
        raise ValueOutOfRange(f"{path}: cell values outside [0, 1]")
    return ProbabilityRaster(georef, values.reshape(georef.height, georef.width))


def save_feature_raster(raster: FeatureRaster, path) -> None:
    g = raster.georef
    _write(path, "FRAS1", (g.width, g.height, raster.channels), g, raster.cells)


def load_feature_raster(path) -> FeatureRaster:
    georef, dims, values = _read(path, "FRAS1", 3)
    if not np.all(np.isfinite(values)):
        raise ValueOutOfRange(f"{path}: non-finite feature values")
    return FeatureRaster(georef, values.reshape(georef.height, georef.width, dims[2]))

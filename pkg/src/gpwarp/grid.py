"""Grids, fields on grids, and the tensor/image file formats.

Pixel ``(i, j)`` (row ``i``, column ``j``) sits at the continuous point
``((j + 0.5) / width, (i + 0.5) / height)`` of the unit square. Points are
always stored as ``(..., 2)`` arrays in ``(x, y)`` order; enumeration of
pixels is row-major from the top-left corner.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"WDTN"
TENSOR_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sIIII")

# pixel coordinates closer than this to a half-integer lattice point are
# snapped onto it, so that integer and half-pixel displacements computed in
# domain units behave exactly
SNAP_TOL = 1e-9


class FormatError(ValueError):
    """A binary file does not match its declared format."""


class OutOfHullError(ValueError):
    """A query point lies outside the convex hull of the pixel centres."""


@dataclass(frozen=True)
class Grid:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid dimensions must be positive, got {self.width}x{self.height}")

    @property
    def size(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def coords(self) -> np.ndarray:
        """Pixel centres as an ``(height, width, 2)`` array of ``(x, y)``."""
        x = (np.arange(self.width) + 0.5) / self.width
        y = (np.arange(self.height) + 0.5) / self.height
        xx, yy = np.meshgrid(x, y)
        return np.stack([xx, yy], axis=-1)

    def points(self) -> np.ndarray:
        """Pixel centres flattened row-major to ``(size, 2)``."""
        return self.coords().reshape(-1, 2)

    def to_pixel(self, points) -> np.ndarray:
        """Map continuous points to fractional ``(column, row)`` indices."""
        p = np.asarray(points, dtype=np.float64)
        q = np.empty_like(p)
        q[..., 0] = p[..., 0] * self.width - 0.5
        q[..., 1] = p[..., 1] * self.height - 0.5
        return snap(q)

    def in_hull(self, points) -> np.ndarray:
        q = self.to_pixel(points)
        return (
            (q[..., 0] >= 0) & (q[..., 0] <= self.width - 1)
            & (q[..., 1] >= 0) & (q[..., 1] <= self.height - 1)
        )


def snap(q: np.ndarray, tol: float = SNAP_TOL) -> np.ndarray:
    r = np.round(2.0 * q) / 2.0
    return np.where(np.abs(q - r) < tol, r, q)


@dataclass(frozen=True, eq=False)
class Field:
    """Real values on a grid, shape ``(height, width, channels)``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[..., None]
        if v.shape[:2] != self.grid.shape or v.ndim != 3 or v.shape[2] < 1:
            raise ValueError(f"values of shape {np.shape(self.values)} do not fit grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        """Single-channel values as a row-major vector of length ``grid.size``."""
        if self.channels != 1:
            raise ValueError("flat() needs a single-channel field")
        return self.values[..., 0].reshape(-1)

    @classmethod
    def from_flat(cls, grid: Grid, u) -> "Field":
        return cls(grid, np.asarray(u, dtype=np.float64).reshape(grid.height, grid.width, 1))

    def __eq__(self, other):
        return isinstance(other, Field) and self.grid == other.grid and np.array_equal(self.values, other.values)


def field_new_const(grid: Grid, channels: int, value: float) -> Field:
    if not np.isfinite(value):
        raise ValueError("value must be finite")
    return Field(grid, np.full((grid.height, grid.width, channels), float(value)))


def bilinear_weights(grid: Grid, points, *, extrapolate: bool = False):
    """Corner indices and weights of the bilinear stencil at ``points``.

    Returns ``(rows, cols, weights)`` each of shape ``(..., 4)``. Without
    ``extrapolate`` any point outside the hull raises :class:`OutOfHullError`;
    with it, the edge cells are extended linearly (used for displacement
    fields, never for images).
    """
    q = grid.to_pixel(points)
    px, py = q[..., 0], q[..., 1]
    if not extrapolate and not np.all(grid.in_hull(points)):
        raise OutOfHullError("bilinear sample outside the hull of pixel centres")
    j0 = np.clip(np.floor(px), 0, max(grid.width - 2, 0)).astype(np.int64)
    i0 = np.clip(np.floor(py), 0, max(grid.height - 2, 0)).astype(np.int64)
    fx = px - j0 if grid.width > 1 else np.zeros_like(px)
    fy = py - i0 if grid.height > 1 else np.zeros_like(py)
    j1 = np.minimum(j0 + 1, grid.width - 1)
    i1 = np.minimum(i0 + 1, grid.height - 1)
    rows = np.stack([i0, i0, i1, i1], axis=-1)
    cols = np.stack([j0, j1, j0, j1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return rows, cols, w


def field_bilinear_sample(field: Field, points) -> np.ndarray:
    """Bilinear values at ``points`` (shape ``(..., 2)``), returns ``(..., channels)``."""
    rows, cols, w = bilinear_weights(field.grid, points)
    return np.einsum("...k,...kc->...c", w, field.values[rows, cols])


# -- binary tensors ---------------------------------------------------------

def tensor_write(path, field: Field) -> None:
    h, w, c = field.values.shape
    with open(path, "wb") as fh:
        fh.write(_TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, h, w, c))
        fh.write(field.values.astype("<f8").tobytes())


def tensor_read(path) -> Field:
    data = Path(path).read_bytes()
    if len(data) < _TENSOR_HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, h, w, c = _TENSOR_HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"bad dimensions {h}x{w}x{c}")
    expected = _TENSOR_HEADER.size + h * w * c * 8
    if len(data) != expected:
        raise FormatError(f"tensor body is {len(data) - _TENSOR_HEADER.size} bytes, expected {expected - _TENSOR_HEADER.size}")
    values = np.frombuffer(data, dtype="<f8", offset=_TENSOR_HEADER.size).reshape(h, w, c)
    return Field(Grid(w, h), values.astype(np.float64))


# -- images -----------------------------------------------------------------

def quantize(values, vmin: float, vmax: float) -> np.ndarray:
    """Linear map of ``[vmin, vmax]`` onto ``0..255``, clamped, round half up."""
    if not vmin < vmax:
        raise ValueError("vmin must be below vmax")
    scaled = (np.asarray(values, dtype=np.float64) - vmin) / (vmax - vmin) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def field_to_image(field: Field, vmin: float, vmax: float, path) -> None:
    """Write a binary PGM (one channel) or PPM (three channels)."""
    if field.channels == 1:
        tag, pixels = b"P5", quantize(field.values[..., 0], vmin, vmax)
    elif field.channels == 3:
        tag, pixels = b"P6", quantize(field.values, vmin, vmax)
    else:
        raise ValueError(f"cannot render a {field.channels}-channel field")
    h, w = field.grid.shape
    with open(path, "wb") as fh:
        fh.write(tag + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a binary PGM/PPM written by :func:`field_to_image`."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    body = data[pos + 1:]  # exactly one whitespace byte after maxval
    tag, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or tag not in (b"P5", b"P6"):
        raise FormatError("unsupported PNM variant")
    c = 1 if tag == b"P5" else 3
    arr = np.frombuffer(body[: w * h * c], dtype=np.uint8)
    return arr.reshape(h, w) if c == 1 else arr.reshape(h, w, 3)

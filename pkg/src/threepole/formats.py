"""Binary files for grids (3PF1), label grids (3PL1) and sample batches (3PS1).

All integers and floats are little-endian. Grid values are stored x-fastest
as float32 with quiet NaN for null; the bbox is six float64 (min then max).
"""
from __future__ import annotations

import struct
from os import PathLike

import numpy as np

from .field import FieldGrid, SampleBatch, labels_from_values

GRID_MAGIC = b"3PF1"
LABEL_MAGIC = b"3PL1"
SAMPLE_MAGIC = b"3PS1"

_HEADER = struct.Struct("<4s3I6d")
_SAMPLE_HEADER = struct.Struct("<4sI")
_SAMPLE = np.dtype([("xyz", "<f4", 3), ("label", "u1")])
_SAMPLE_BR = np.dtype([("xyz", "<f4", 3), ("label", "u1"), ("target", "<f4")])


class FormatError(ValueError):
    pass


def _header(magic, grid: FieldGrid) -> bytes:
    return _HEADER.pack(magic, *grid.dims, *grid.lo, *grid.hi)


def _read_header(data: bytes, magic: bytes, path):
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a {magic.decode()} header")
    tag, nx, ny, nz, *box = _HEADER.unpack_from(data)
    if tag != magic:
        raise FormatError(f"{path}: bad magic {tag!r}, expected {magic!r}")
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: zero grid dimension")
    return (nx, ny, nz), np.array(box[:3]), np.array(box[3:])


def grid_bytes(grid: FieldGrid) -> bytes:
    values = grid.values.astype("<f4")
    values[np.isnan(values)] = np.float32("nan")  # canonical quiet NaN
    return _header(GRID_MAGIC, grid) + values.tobytes()


def save_grid(grid: FieldGrid, path: str | PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(grid_bytes(grid))


def load_grid(path: str | PathLike) -> FieldGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    dims, lo, hi = _read_header(data, GRID_MAGIC, path)
    n = dims[0] * dims[1] * dims[2]
    if len(data) != _HEADER.size + 4 * n:
        raise FormatError(f"{path}: expected {n} values, file size disagrees")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return FieldGrid(dims, lo, hi, values)


def save_labels(grid: FieldGrid, path: str | PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(_header(LABEL_MAGIC, grid) + labels_from_values(grid.values).tobytes())


def load_labels(path: str | PathLike) -> FieldGrid:
    """Label file as a grid of -1 / +1 / NaN values."""
    with open(path, "rb") as fh:
        data = fh.read()
    dims, lo, hi = _read_header(data, LABEL_MAGIC, path)
    n = dims[0] * dims[1] * dims[2]
    if len(data) != _HEADER.size + n:
        raise FormatError(f"{path}: expected {n} labels, file size disagrees")
    labels = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if labels.max(initial=0) > 2:
        raise FormatError(f"{path}: label outside {{0, 1, 2}}")
    return FieldGrid.from_labels(dims, lo, hi, labels)


def save_samples(batch: SampleBatch, path: str | PathLike, with_targets: bool = False) -> None:
    """Per point: 3 float32 coordinates, one label byte, and for
    ``with_targets`` a float32 signed distance (NaN when null)."""
    if with_targets and batch.distances is None:
        raise ValueError("batch carries no distance targets")
    rec = np.zeros(len(batch), dtype=_SAMPLE_BR if with_targets else _SAMPLE)
    rec["xyz"] = batch.points
    rec["label"] = batch.labels
    if with_targets:
        rec["target"] = batch.distances
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_HEADER.pack(SAMPLE_MAGIC, len(batch)))
        fh.write(rec.tobytes())


def load_samples(path: str | PathLike, strategy: str = "file") -> SampleBatch:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _SAMPLE_HEADER.size:
        raise FormatError(f"{path}: file too short for a 3PS1 header")
    tag, count = _SAMPLE_HEADER.unpack_from(data)
    if tag != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic {tag!r}, expected {SAMPLE_MAGIC!r}")
    body = len(data) - _SAMPLE_HEADER.size
    # the optional target column is detected from the record size
    if body == count * _SAMPLE.itemsize:
        dtype = _SAMPLE
    elif body == count * _SAMPLE_BR.itemsize:
        dtype = _SAMPLE_BR
    else:
        raise FormatError(f"{path}: {body} bytes do not hold {count} samples")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=_SAMPLE_HEADER.size)
    distances = rec["target"].astype(np.float64) if dtype is _SAMPLE_BR else None
    return SampleBatch(rec["xyz"].astype(np.float64), rec["label"].copy(), strategy, distances)

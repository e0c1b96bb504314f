import struct

import numpy as np
import pytest

from threepole import field as F
from threepole import formats as IO


@pytest.fixture
def grid():
    values = np.array([-0.5, 0.25, np.nan, 1.0, np.nan, -2.0, 0.0, 3.5, -0.125, np.nan, 7.0, 0.5])
    return F.FieldGrid((3, 2, 2), [-1.0, 0.0, 0.5], [1.0, 2.0, 1.5], values)


def test_grid_layout_by_hand(tmp_path, grid):
    path = tmp_path / "g.3pf"
    IO.save_grid(grid, path)
    data = path.read_bytes()
    assert data[:4] == b"3PF1"
    assert struct.unpack_from("<3I", data, 4) == (3, 2, 2)
    assert struct.unpack_from("<6d", data, 16) == (-1.0, 0.0, 0.5, 1.0, 2.0, 1.5)
    vals = struct.unpack_from("<12f", data, 64)
    assert len(data) == 64 + 48
    assert np.array_equal(np.array(vals), grid.values.astype(np.float32), equal_nan=True)
    # quiet NaN: exponent all ones, top mantissa bit set
    raw = struct.unpack_from("<I", data, 64 + 4 * 2)[0]
    assert raw & 0x7FC00000 == 0x7FC00000


def test_grid_round_trip(tmp_path, grid):
    path = tmp_path / "g.3pf"
    IO.save_grid(grid, path)
    back = IO.load_grid(path)
    assert back.dims == grid.dims
    assert np.array_equal(back.lo, grid.lo) and np.array_equal(back.hi, grid.hi)
    assert np.array_equal(back.values, grid.values, equal_nan=True)


def test_grid_bytes_deterministic(grid):
    assert IO.grid_bytes(grid) == IO.grid_bytes(F.FieldGrid(grid.dims, grid.lo, grid.hi, grid.values.copy()))


def test_labels_round_trip(tmp_path, grid):
    path = tmp_path / "g.3pl"
    IO.save_labels(grid, path)
    data = path.read_bytes()
    assert data[:4] == b"3PL1" and len(data) == 64 + 12
    assert list(data[64:]) == F.labels_from_values(grid.values).tolist()
    back = IO.load_labels(path)
    assert np.array_equal(back.labels(), grid.labels())


@pytest.mark.parametrize("targets", [False, True])
def test_samples_round_trip(tmp_path, targets):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(7, 3)).astype(np.float32).astype(np.float64)
    labels = np.array([0, 1, 2, 2, 1, 0, 1], np.uint8)
    dist = np.where(labels == 2, np.nan, rng.normal(size=7)).astype(np.float32).astype(np.float64)
    batch = F.SampleBatch(pts, labels, "random", dist)
    path = tmp_path / "s.3ps"
    IO.save_samples(batch, path, with_targets=targets)
    data = path.read_bytes()
    assert data[:4] == b"3PS1" and struct.unpack_from("<I", data, 4)[0] == 7
    assert len(data) == 8 + 7 * (17 if targets else 13)
    assert struct.unpack_from("<3fB", data, 8) == (*pts[0].astype(np.float32), 0)
    back = IO.load_samples(path)
    assert np.array_equal(back.points, pts) and np.array_equal(back.labels, labels)
    if targets:
        assert np.array_equal(back.distances, dist, equal_nan=True)
    else:
        assert back.distances is None


def test_samples_without_targets_refused(tmp_path):
    batch = F.SampleBatch(np.zeros((1, 3)), np.zeros(1, np.uint8), "random")
    with pytest.raises(ValueError):
        IO.save_samples(batch, tmp_path / "s.3ps", with_targets=True)


@pytest.mark.parametrize("payload", [b"XXXX" + bytes(60), b"3PF1", b"3PF1" + struct.pack("<3I6d", 2, 2, 2, *[0.0] * 6)])
def test_corrupt_grid(tmp_path, payload):
    path = tmp_path / "bad.3pf"
    path.write_bytes(payload)
    with pytest.raises(IO.FormatError):
        IO.load_grid(path)


def test_corrupt_samples(tmp_path):
    path = tmp_path / "bad.3ps"
    path.write_bytes(b"3PS1" + struct.pack("<I", 3) + bytes(20))
    with pytest.raises(IO.FormatError):
        IO.load_samples(path)
    path.write_bytes(b"3PSX" + struct.pack("<I", 0))
    with pytest.raises(IO.FormatError):
        IO.load_samples(path)


def test_bad_label_byte(tmp_path, grid):
    path = tmp_path / "g.3pl"
    IO.save_labels(grid, path)
    data = bytearray(path.read_bytes())
    data[-1] = 7
    path.write_bytes(bytes(data))
    with pytest.raises(IO.FormatError):
        IO.load_labels(path)

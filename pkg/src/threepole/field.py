"""Three-pole signed distance fields.

A point gets a signed distance to the surface when its octree leaf
intersects the surface, and a null value otherwise. Distances are measured
to the leaf's local patch only (the triangles overlapping that leaf), and
the sign says whether the point lies on the side the patch normal points to.

Null is carried as NaN in every array-valued API.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .mesh import (
    TriangleMesh,
    closest_on_triangles,
    feature_normals,
    pseudo_normals,
    triangles_overlap_boxes,
)

log = logging.getLogger(__name__)

INSIDE, OUTSIDE, NULL = 0, 1, 2
STRATEGIES = ("random", "uniform", "octree")

_PAIR_CHUNK = 200_000
_CORNERS = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class ThreePoleValue:
    """A signed distance, or null when ``value`` is None."""

    value: float | None = None

    @classmethod
    def signed(cls, d: float) -> "ThreePoleValue":
        return cls(float(d))

    @property
    def is_null(self) -> bool:
        return self.value is None

    @property
    def tag(self) -> str:
        return "null" if self.value is None else "signed"

    def __float__(self) -> float:
        return np.nan if self.value is None else self.value

    @classmethod
    def from_float(cls, x: float) -> "ThreePoleValue":
        return cls(None if np.isnan(x) else float(x))


NULL_VALUE = ThreePoleValue()


def value_to_label(v: ThreePoleValue) -> int:
    if v.is_null:
        return NULL
    return INSIDE if v.value < 0 else OUTSIDE


def label_to_value(label: int) -> ThreePoleValue:
    if label == INSIDE:
        return ThreePoleValue(-1.0)
    if label == OUTSIDE:
        return ThreePoleValue(1.0)
    if label == NULL:
        return NULL_VALUE
    raise ValueError(f"label must be 0, 1 or 2, got {label!r}")


def labels_from_values(values: np.ndarray) -> np.ndarray:
    """Vectorised :func:`value_to_label` over NaN-coded values."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.where(values < 0, INSIDE, OUTSIDE).astype(np.uint8)
    labels[np.isnan(values)] = NULL
    return labels


def values_from_labels(labels: np.ndarray) -> np.ndarray:
    """Vectorised :func:`label_to_value`; null becomes NaN."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 2):
        raise ValueError("labels must lie in {0, 1, 2}")
    return np.array([-1.0, 1.0, np.nan])[labels.astype(np.int64)]


# --------------------------------------------------------------------------
# octree
# --------------------------------------------------------------------------

def bounding_cube(mesh: TriangleMesh, padding: float = 0.05) -> tuple[np.ndarray, float]:
    """Cube around the mesh bbox centre, longest side scaled by ``1 + padding``."""
    lo, hi = mesh.bounds
    size = float((hi - lo).max()) * (1.0 + padding)
    return 0.5 * (lo + hi) - 0.5 * size, size


@dataclass(frozen=True, eq=False)
class Octree:
    """Adaptive octree over a cube, refined only where the surface passes.

    ``levels[d]`` holds integer cell coordinates at depth ``d`` and whether
    each cell meets the surface. Occupied cells above ``max_depth`` are
    subdivided, so every leaf is either empty (any depth) or occupied at
    ``max_depth``. Occupied leaf ``r`` owns triangles
    ``tri_ids[tri_ptr[r]:tri_ptr[r + 1]]`` and sits at ``leaf_coords[r]``;
    rows are sorted by :meth:`cell_key`.
    """

    origin: np.ndarray
    size: float
    max_depth: int
    levels: list[tuple[np.ndarray, np.ndarray]]
    leaf_coords: np.ndarray
    tri_ptr: np.ndarray
    tri_ids: np.ndarray
    _keys: np.ndarray = field(repr=False)

    @property
    def resolution(self) -> int:
        """Cells per axis at ``max_depth``."""
        return 1 << self.max_depth

    @property
    def cell_size(self) -> float:
        return self.size / self.resolution

    def cell_key(self, ijk: np.ndarray) -> np.ndarray:
        n = self.resolution
        ijk = np.asarray(ijk, dtype=np.int64)
        return ijk[..., 0] + n * (ijk[..., 1] + n * ijk[..., 2])

    def find_leaf(self, ijk: np.ndarray) -> np.ndarray:
        """Occupied-leaf row for finest cell coords, -1 where not occupied."""
        keys = self.cell_key(ijk)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == keys if len(self._keys) else np.zeros(keys.shape, bool)
        return np.where(hit, pos, -1)

    def leaf_triangles(self, row: int) -> np.ndarray:
        return self.tri_ids[self.tri_ptr[row]:self.tri_ptr[row + 1]]

    def box(self, depth: int, ijk) -> tuple[np.ndarray, np.ndarray]:
        h = self.size / (1 << depth)
        ijk = np.asarray(ijk, dtype=np.float64)
        return self.origin + ijk * h, self.origin + (ijk + 1) * h

    def leaves(self):
        """Yield ``(depth, coords, occupied)`` per leaf, by depth then key."""
        for depth, (coords, occupied) in enumerate(self.levels):
            is_leaf = ~occupied if depth < self.max_depth else np.ones(len(coords), bool)
            for c, occ in zip(coords[is_leaf], occupied[is_leaf]):
                yield depth, c, bool(occ)

    @cached_property
    def n_occupied(self) -> int:
        return len(self.leaf_coords)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.origin) & (p <= self.origin + self.size), axis=-1)


def build_octree(mesh: TriangleMesh, max_depth: int, padding: float = 0.05) -> Octree:
    """Subdivide the padded bounding cube wherever a cell meets a triangle."""
    if mesh.n_triangles == 0:
        raise ValueError("cannot build an octree for an empty mesh")
    if not 1 <= max_depth <= 12:
        raise ValueError(f"max_depth must lie in [1, 12], got {max_depth}")
    if padding < 0:
        raise ValueError("padding must be non-negative")
    origin, size = bounding_cube(mesh, padding)
    corners = mesh.corners

    coords = np.zeros((1, 3), dtype=np.int64)
    # candidate (cell, triangle) pairs for the current level
    pair_cell = np.zeros(mesh.n_triangles, dtype=np.int64)
    pair_tri = np.arange(mesh.n_triangles, dtype=np.int64)
    levels = []
    for depth in range(max_depth + 1):
        h = size / (1 << depth)
        lo = origin + coords[pair_cell] * h
        hi = origin + (coords[pair_cell] + 1) * h
        hit = np.empty(len(pair_cell), dtype=bool)
        for s in range(0, len(pair_cell), _PAIR_CHUNK):
            sl = slice(s, s + _PAIR_CHUNK)
            hit[sl] = triangles_overlap_boxes(corners[pair_tri[sl]], lo[sl], hi[sl])
        pair_cell, pair_tri = pair_cell[hit], pair_tri[hit]
        occupied = np.zeros(len(coords), dtype=bool)
        occupied[pair_cell] = True
        levels.append((coords, occupied))
        if depth == max_depth:
            break
        # children of occupied cells inherit the parent's overlapping triangles
        occ_rows = np.flatnonzero(occupied)
        child_of = np.full(len(coords), -1, dtype=np.int64)
        child_of[occ_rows] = np.arange(len(occ_rows))
        coords = (2 * coords[occ_rows][:, None, :] + _CORNERS[None]).reshape(-1, 3)
        base = child_of[pair_cell] * 8
        pair_cell = (base[:, None] + np.arange(8)[None]).ravel()
        pair_tri = np.repeat(pair_tri, 8)

    n = 1 << max_depth
    occ_rows = np.flatnonzero(levels[-1][1])
    row_keys = coords[:, 0] + n * (coords[:, 1] + n * coords[:, 2])
    order = occ_rows[np.argsort(row_keys[occ_rows], kind="stable")]
    new_row = np.full(len(coords), -1, dtype=np.int64)
    new_row[order] = np.arange(len(order))
    pr = new_row[pair_cell]
    srt = np.lexsort((pair_tri, pr))
    tri_ids = pair_tri[srt]
    tri_ptr = np.concatenate([[0], np.cumsum(np.bincount(pr, minlength=len(order)))])
    log.debug("octree depth %d: %d occupied leaves, %d cell-triangle pairs",
              max_depth, len(order), len(tri_ids))
    return Octree(
        origin=origin, size=size, max_depth=max_depth, levels=levels,
        leaf_coords=coords[order], tri_ptr=tri_ptr, tri_ids=tri_ids,
        _keys=row_keys[order],
    )


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _patch_distances(points: np.ndarray, rows: np.ndarray, octree: Octree, mesh: TriangleMesh):
    """Signed distance from each point to the local patch of leaf ``rows``.

    Returns ``(signed, unsigned)``; ties between triangles go to the lowest
    triangle index.
    """
    m = len(points)
    signed = np.empty(m)
    dist = np.empty(m)
    if m == 0:
        return signed, dist
    counts = octree.tri_ptr[rows + 1] - octree.tri_ptr[rows]
    # pseudo-normals are computed per leaf, over that leaf's patch only
    uniq_rows, row_inv = np.unique(rows, return_inverse=True)
    seg = [np.arange(octree.tri_ptr[r], octree.tri_ptr[r + 1]) for r in uniq_rows]
    entry = np.concatenate(seg)
    entry_group = np.repeat(np.arange(len(uniq_rows)), [len(s) for s in seg])
    vn, en = pseudo_normals(mesh, octree.tri_ids[entry], entry_group)
    entry_pos = np.full(len(octree.tri_ids), -1, dtype=np.int64)
    entry_pos[entry] = np.arange(len(entry))

    orth = 0
    starts = np.concatenate([[0], np.cumsum(counts)])
    begin = 0
    while begin < m:
        # chunk on point boundaries so each point's pairs stay together
        end = int(np.searchsorted(starts, starts[begin] + _PAIR_CHUNK, side="right")) - 1
        end = min(max(end, begin + 1), m)
        pr = np.repeat(np.arange(begin, end), counts[begin:end])
        off = np.arange(len(pr)) - np.repeat(starts[begin:end] - starts[begin], counts[begin:end])
        ent = octree.tri_ptr[rows[pr]] + off
        tri = octree.tri_ids[ent]
        c = mesh.corners[tri]
        q, d2, feat, loc = closest_on_triangles(points[pr], c[:, 0], c[:, 1], c[:, 2])
        srt = np.lexsort((tri, d2, pr))
        first = srt[np.r_[True, pr[srt][1:] != pr[srt][:-1]]]
        k = entry_pos[ent[first]]
        n = feature_normals(mesh.face_normals[tri[first]], vn[k], en[k], feat[first], loc[first])
        p = points[pr[first]]
        dot = np.einsum("ij,ij->i", n, p - q[first])
        d = np.sqrt(d2[first])
        orth += int(np.count_nonzero((dot == 0) & (d > 0)))
        dist[begin:end] = d
        signed[begin:end] = np.where(dot >= 0, d, -d)
        begin = end
    if orth:
        log.debug("%d samples with normal orthogonal to the offset; sign set positive", orth)
    return signed, dist


def _finest_cells(points: np.ndarray, octree: Octree) -> np.ndarray:
    # half-open, low-inclusive descent; the far faces of the root belong to the last cell
    ijk = np.floor((points - octree.origin) / octree.cell_size).astype(np.int64)
    return np.clip(ijk, 0, octree.resolution - 1)


def evaluate_points(points: np.ndarray, octree: Octree, mesh: TriangleMesh) -> np.ndarray:
    """Three-pole values (NaN = null) at arbitrary points inside the root cube."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(octree.contains(points)):
        raise ValueError("point outside the octree root cube")
    rows = octree.find_leaf(_finest_cells(points, octree))
    out = np.full(len(points), np.nan)
    live = rows >= 0
    out[live], _ = _patch_distances(points[live], rows[live], octree, mesh)
    return out


def evaluate(point, octree: Octree, mesh: TriangleMesh) -> ThreePoleValue:
    """Three-pole value at one point: null in empty leaves, else the signed
    distance to the hosting leaf's patch (positive on the normal side)."""
    return ThreePoleValue.from_float(evaluate_points(np.asarray(point)[None], octree, mesh)[0])


def lattice_values(ijk: np.ndarray, octree: Octree, mesh: TriangleMesh) -> np.ndarray:
    """Values at finest-level lattice points (cell corners), NaN = null.

    A lattice point is shared by up to 8 finest cells. It is null only when
    none of them is occupied; otherwise it takes the signed distance to the
    patch of whichever adjacent occupied leaf is nearest (ties: lowest leaf
    key). Using only the low-inclusive hosting cell would null out one side
    of every thin surface.
    """
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    n = octree.resolution
    cand_pt, cand_row = [], []
    for off in _CORNERS:
        cell = ijk - off
        ok = np.all((cell >= 0) & (cell < n), axis=1)
        rows = np.full(len(ijk), -1, dtype=np.int64)
        rows[ok] = octree.find_leaf(cell[ok])
        sel = np.flatnonzero(rows >= 0)
        cand_pt.append(sel)
        cand_row.append(rows[sel])
    cand_pt = np.concatenate(cand_pt)
    cand_row = np.concatenate(cand_row)
    out = np.full(len(ijk), np.nan)
    if len(cand_pt) == 0:
        return out
    pts = octree.origin + ijk[cand_pt] * octree.cell_size
    signed, dist = _patch_distances(pts, cand_row, octree, mesh)
    srt = np.lexsort((cand_row, dist, cand_pt))
    first = srt[np.r_[True, cand_pt[srt][1:] != cand_pt[srt][:-1]]]
    out[cand_pt[first]] = signed[first]
    return out


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FieldGrid:
    """Dense lattice of three-pole values, x index fastest, NaN = null."""

    dims: tuple[int, int, int]
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if len(values) != dims[0] * dims[1] * dims[2]:
            raise ValueError("values length does not match dims")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.dims) - 1)

    def volume(self) -> np.ndarray:
        """Values as a (nz, ny, nx) view."""
        nx, ny, nz = self.dims
        return self.values.reshape(nz, ny, nx)

    def lattice_points(self) -> np.ndarray:
        nx, ny, nz = self.dims
        k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.lo + ijk * self.spacing

    def null_fraction(self) -> float:
        return float(np.isnan(self.values).mean())

    def labels(self) -> np.ndarray:
        return labels_from_values(self.values)

    @classmethod
    def from_labels(cls, dims, lo, hi, labels) -> "FieldGrid":
        return cls(dims, lo, hi, values_from_labels(labels))


def compute_grid(mesh: TriangleMesh, depth: int, padding: float = 0.05,
                 octree: Octree | None = None) -> FieldGrid:
    """Exact field on the ``(2**depth + 1)**3`` corner lattice of the octree."""
    if not 4 <= depth <= 10:
        raise ValueError(f"depth must lie in [4, 10], got {depth}")
    if octree is None:
        octree = build_octree(mesh, depth, padding)
    elif octree.max_depth != depth:
        raise ValueError("octree depth does not match the requested grid depth")
    n = octree.resolution + 1
    values = np.full(n ** 3, np.nan)
    # only corners of occupied leaves can be non-null
    ijk = (octree.leaf_coords[:, None, :] + _CORNERS[None]).reshape(-1, 3)
    keys = np.unique(ijk[:, 0] + n * (ijk[:, 1] + n * ijk[:, 2]))
    ijk = np.stack([keys % n, (keys // n) % n, keys // (n * n)], axis=1)
    values[keys] = lattice_values(ijk, octree, mesh)
    return FieldGrid((n, n, n), octree.origin, octree.origin + octree.size, values)


# --------------------------------------------------------------------------
# training samples
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Training points with labels in {0: inside, 1: outside, 2: null}.

    ``distances`` holds the exact signed value per point (NaN when null),
    the regression target for the binary + regression variant.
    """

    points: np.ndarray
    labels: np.ndarray
    strategy: str
    distances: np.ndarray | None = None

    def __post_init__(self):
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SampleBatch":
        d = None if self.distances is None else self.distances[idx]
        return SampleBatch(self.points[idx], self.labels[idx], self.strategy, d)


def octree_corner_lattice(octree: Octree) -> np.ndarray:
    """Unique finest-lattice coordinates of all leaf corners, sorted by key."""
    n = octree.resolution + 1
    chunks = []
    for depth, (coords, occupied) in enumerate(octree.levels):
        leaf = np.ones(len(coords), bool) if depth == octree.max_depth else ~occupied
        scale = 1 << (octree.max_depth - depth)
        chunks.append(((coords[leaf][:, None, :] + _CORNERS[None]) * scale).reshape(-1, 3))
    ijk = np.concatenate(chunks)
    keys = np.unique(ijk[:, 0] + n * (ijk[:, 1] + n * ijk[:, 2]))
    return np.stack([keys % n, (keys // n) % n, keys // (n * n)], axis=1)


def sample_points(mesh: TriangleMesh, octree: Octree, strategy: str,
                  count_hint: int, seed: int = 0) -> SampleBatch:
    """Draw labelled training points.

    ``random`` draws i.i.d. uniform points in the root cube, ``uniform``
    places a cell-centred lattice of about ``count_hint`` points, and
    ``octree`` uses the deduplicated corners of every leaf (``count_hint`` is
    ignored).
    """
    if count_hint <= 0:
        raise ValueError("count_hint must be positive")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        pts = octree.origin + rng.random((count_hint, 3)) * octree.size
        values = evaluate_points(pts, octree, mesh)
    elif strategy == "uniform":
        m = max(1, int(round(count_hint ** (1.0 / 3.0))))
        axis = (np.arange(m) + 0.5) * (octree.size / m)
        z, y, x = np.meshgrid(axis, axis, axis, indexing="ij")
        pts = octree.origin + np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
        values = evaluate_points(pts, octree, mesh)
    elif strategy == "octree":
        ijk = octree_corner_lattice(octree)
        pts = octree.origin + ijk * octree.cell_size
        values = lattice_values(ijk, octree, mesh)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return SampleBatch(pts, labels_from_values(values), strategy, values)

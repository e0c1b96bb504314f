"""Triangle meshes: OBJ I/O, closest-point queries and intersection tests.

Normals follow the right-hand rule on vertex order and are expected to be
consistently oriented across the mesh; nothing here repairs orientation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from os import PathLike
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DEGENERATE_AREA_FACTOR = 1e-12

# closest-feature codes
FACE, EDGE, VERTEX = 0, 1, 2
FEATURE_NAMES = {FACE: "face", EDGE: "edge", VERTEX: "vertex"}

# local edge k of a triangle joins local vertices (k, k+1 mod 3)
_EDGE_LOCAL = np.array([(0, 1), (1, 2), (2, 0)])


class MeshError(ValueError):
    """Raised for malformed or unusable mesh input."""


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh with per-face unit normals.

    ``vertices`` is (V, 3) float64, ``triangles`` is (T, 3) int64.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def corners(self) -> np.ndarray:
        """(T, 3, 3) triangle vertex positions."""
        return self.vertices[self.triangles]

    @cached_property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        n = self._cross
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    @cached_property
    def corner_angles(self) -> np.ndarray:
        """(T, 3) interior angle at each triangle corner."""
        c = self.corners
        out = np.empty((len(c), 3))
        for k in range(3):
            u = c[:, (k + 1) % 3] - c[:, k]
            w = c[:, (k + 2) % 3] - c[:, k]
            cos = np.einsum("ij,ij->i", u, w)
            sin = np.linalg.norm(np.cross(u, w), axis=1)
            out[:, k] = np.arctan2(sin, cos)
        return out

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (E, 2) and per-triangle edge ids (T, 3)."""
        pairs = self.triangles[:, _EDGE_LOCAL]  # (T, 3, 2)
        keys = np.sort(pairs.reshape(-1, 2), axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        return uniq, inverse.reshape(-1, 3)

    @cached_property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def flipped(self) -> "TriangleMesh":
        """Same surface with every winding (and normal) reversed."""
        return TriangleMesh(self.vertices, self.triangles[:, ::-1])

    def is_watertight(self) -> bool:
        if self.n_triangles == 0:
            return False
        _, tri_edges = self.edges
        counts = np.bincount(tri_edges.ravel())
        return bool(np.all(counts == 2))


def drop_degenerate(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Triangles whose area exceeds ``1e-12 * bbox_diagonal**2``."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0:
        return triangles
    diag2 = float(np.sum((vertices.max(axis=0) - vertices.min(axis=0)) ** 2))
    c = vertices[triangles]
    area = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    return triangles[area > DEGENERATE_AREA_FACTOR * diag2]


def load_obj(path: str | PathLike, flip: bool = False, allow_empty: bool = False) -> TriangleMesh:
    """Read a Wavefront OBJ file.

    Only ``v`` and ``f`` records are used. Polygons are fan-triangulated
    from their first vertex, negative (relative) indices are resolved, and
    degenerate triangles are dropped. A file left without triangles is an
    error unless ``allow_empty`` (reconstructions may legitimately be empty).
    """
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshError(f"{path}:{lineno}: malformed vertex record") from None
                if len(vertices[-1]) != 3:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: malformed face record") from None
                    if i == 0:
                        raise MeshError(f"{path}:{lineno}: face index 0 is invalid")
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise MeshError(f"{path}:{lineno}: face needs at least 3 vertices")
                if min(idx) < 0 or max(idx) >= len(vertices):
                    raise MeshError(f"{path}:{lineno}: face index out of range")
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    if not faces:
        if allow_empty:
            return TriangleMesh(v, np.zeros((0, 3), dtype=np.int64))
        raise MeshError(f"{path}: no faces")
    t = drop_degenerate(v, np.array(faces, dtype=np.int64))
    if len(t) == 0 and not allow_empty:
        raise MeshError(f"{path}: no non-degenerate triangles")
    if len(t) < len(faces):
        log.info("dropped %d degenerate triangles", len(faces) - len(t))
    if flip:
        t = t[:, ::-1]
    return TriangleMesh(v, t)


def save_obj(mesh: TriangleMesh, path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


# --------------------------------------------------------------------------
# closest point on triangles
# --------------------------------------------------------------------------

def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point on each triangle ``(a, b, c)`` to the matching ``p``.

    All inputs broadcast to (M, 3). Returns ``(q, dist2, feature, local)``
    where ``feature`` is FACE/EDGE/VERTEX and ``local`` the local edge index
    (edge k joins vertices k and k+1) or local vertex index.

    Region logic after Ericson, *Real-Time Collision Detection* (5.1.5).
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p, a, b, c)))
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - b
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - c
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    feature = np.full(n, FACE, dtype=np.int64)
    local = np.zeros(n, dtype=np.int64)
    q = np.empty_like(p)
    done = np.zeros(n, dtype=bool)

    def take(mask, point, feat, loc):
        m = mask & ~done
        q[m] = point[m] if np.ndim(point) == 2 else point
        feature[m] = feat
        local[m] = loc
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a, VERTEX, 0)
        take((d3 >= 0) & (d4 <= d3), b, VERTEX, 1)
        t = (d1 / (d1 - d3))[:, None]
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + t * ab, EDGE, 0)
        take((d6 >= 0) & (d5 <= d6), c, VERTEX, 2)
        t = (d2 / (d2 - d6))[:, None]
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + t * ac, EDGE, 2)
        t = ((d4 - d3) / ((d4 - d3) + (d5 - d6)))[:, None]
        take((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + t * (c - b), EDGE, 1)
        denom = va + vb + vc
        v = (vb / denom)[:, None]
        w = (vc / denom)[:, None]
        take(np.ones(n, dtype=bool), a + ab * v + ac * w, FACE, 0)
    diff = p - q
    return q, _dot(diff, diff), feature, local


def pseudo_normals(mesh: TriangleMesh, tri_ids: np.ndarray, groups: np.ndarray | None = None):
    """Angle-weighted pseudo-normals restricted to triangle subsets.

    Row r stands for triangle ``tri_ids[r]`` as a member of subset
    ``groups[r]``. Returns ``(vertex_n, edge_n)``, each (R, 3, 3): the unit
    pseudo-normal at each local vertex / local edge of the row's triangle,
    summing only over triangles of the same group.
    """
    tri_ids = np.asarray(tri_ids, dtype=np.int64)
    groups = np.zeros(len(tri_ids), np.int64) if groups is None else np.asarray(groups, np.int64)
    fn = mesh.face_normals[tri_ids]
    ang = mesh.corner_angles[tri_ids]
    _, tri_edges = mesh.edges

    def accumulate(keys, weights):
        uniq, inv = np.unique(keys.ravel(), return_inverse=True)
        acc = np.zeros((len(uniq), 3))
        w = weights.reshape(-1, 1) * np.repeat(fn, 3, axis=0)
        for k in range(3):
            acc[:, k] = np.bincount(inv, weights=w[:, k], minlength=len(uniq))
        acc /= np.maximum(np.linalg.norm(acc, axis=1, keepdims=True), 1e-300)
        return acc[inv].reshape(-1, 3, 3)

    vkeys = groups[:, None] * mesh.n_vertices + mesh.triangles[tri_ids]
    vertex_n = accumulate(vkeys, ang)
    n_edges = len(mesh.edges[0])
    ekeys = groups[:, None] * n_edges + tri_edges[tri_ids]
    edge_n = accumulate(ekeys, np.ones_like(ang))
    return vertex_n, edge_n


def feature_normals(face_n, vertex_n, edge_n, feature, local):
    """Select the normal of the closest feature for each row."""
    rows = np.arange(len(feature))
    n = face_n.copy()
    m = feature == EDGE
    n[m] = edge_n[rows[m], local[m]]
    m = feature == VERTEX
    n[m] = vertex_n[rows[m], local[m]]
    return n


# --------------------------------------------------------------------------
# bounding-volume hierarchy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClosestPointResult:
    point: np.ndarray
    distance: float
    normal: np.ndarray
    primitive: int
    feature: str


@dataclass(frozen=True, eq=False)
class SpatialIndex:
    """Median-split AABB tree over a subset of a mesh's triangles.

    Node ``i`` is a leaf when ``left[i] < 0``; its triangles are
    ``order[start[i]:start[i] + count[i]]``.
    """

    mesh: TriangleMesh
    order: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    leaf_size: int
    _vertex_n: np.ndarray = field(repr=False)
    _edge_n: np.ndarray = field(repr=False)
    _row_of: dict = field(repr=False)

    @property
    def triangle_ids(self) -> np.ndarray:
        return np.sort(self.order)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)


def build_index(mesh: TriangleMesh, triangle_subset: Sequence[int] | None = None,
                leaf_size: int = 8) -> SpatialIndex:
    """Build a :class:`SpatialIndex` over ``triangle_subset`` (all if None)."""
    if triangle_subset is None:
        ids = np.arange(mesh.n_triangles)
    else:
        ids = np.unique(np.asarray(triangle_subset, dtype=np.int64))
    if len(ids) == 0:
        raise MeshError("cannot index an empty triangle subset")
    if ids[0] < 0 or ids[-1] >= mesh.n_triangles:
        raise MeshError("triangle subset index out of range")

    corners = mesh.corners[ids]
    tlo, thi = corners.min(axis=1), corners.max(axis=1)
    centroid = corners.mean(axis=1)

    lo, hi, left, right, start, count = [], [], [], [], [], []
    perm = np.arange(len(ids))
    # (node, begin, end) over perm
    stack = [(0, 0, len(ids))]
    lo.append(None); hi.append(None); left.append(-1); right.append(-1)
    start.append(0); count.append(0)
    while stack:
        node, b, e = stack.pop()
        sel = perm[b:e]
        lo[node] = tlo[sel].min(axis=0)
        hi[node] = thi[sel].max(axis=0)
        if e - b <= leaf_size:
            start[node], count[node] = b, e - b
            continue
        cen = centroid[sel]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        perm[b:e] = sel[np.lexsort((ids[sel], cen[:, axis]))]
        mid = (b + e) // 2
        children = []
        for cb, ce in ((b, mid), (mid, e)):
            children.append(len(lo))
            lo.append(None); hi.append(None); left.append(-1); right.append(-1)
            start.append(0); count.append(0)
            stack.append((children[-1], cb, ce))
        left[node], right[node] = children

    vertex_n, edge_n = pseudo_normals(mesh, ids)
    return SpatialIndex(
        mesh=mesh,
        order=ids[perm],
        lo=np.array(lo), hi=np.array(hi),
        left=np.array(left), right=np.array(right),
        start=np.array(start), count=np.array(count),
        leaf_size=leaf_size,
        _vertex_n=vertex_n, _edge_n=edge_n,
        _row_of={int(t): r for r, t in enumerate(ids)},
    )


def _box_dist2(p, lo, hi):
    d = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    return float(d @ d)


def closest_point(query, index: SpatialIndex) -> ClosestPointResult:
    """Globally nearest point on the indexed triangles.

    Exact ties are resolved towards the lowest triangle index. The normal is
    the face normal for face-interior hits and the angle-weighted
    pseudo-normal (over the indexed subset) on edges and vertices.
    """
    p = np.asarray(query, dtype=np.float64).reshape(3)
    mesh = index.mesh
    best = (np.inf, -1)
    best_hit = None
    stack = [0]
    while stack:
        node = stack.pop()
        if _box_dist2(p, index.lo[node], index.hi[node]) > best[0]:
            continue
        if index.left[node] < 0:
            s = index.start[node]
            tris = index.order[s:s + index.count[node]]
            c = mesh.corners[tris]
            q, d2, feat, loc = closest_on_triangles(p[None], c[:, 0], c[:, 1], c[:, 2])
            for k in np.lexsort((tris, d2))[:1]:
                cand = (float(d2[k]), int(tris[k]))
                if cand < best:
                    best = cand
                    best_hit = (q[k], int(feat[k]), int(loc[k]))
            continue
        l, r = index.left[node], index.right[node]
        dl = _box_dist2(p, index.lo[l], index.hi[l])
        dr = _box_dist2(p, index.lo[r], index.hi[r])
        # nearer child popped first
        stack.extend((l, r) if dl > dr else (r, l))

    tri = best[1]
    q, feat, loc = best_hit
    row = index._row_of[tri]
    if feat == FACE:
        normal = mesh.face_normals[tri]
    elif feat == EDGE:
        normal = index._edge_n[row, loc]
    else:
        normal = index._vertex_n[row, loc]
    return ClosestPointResult(
        point=q, distance=float(np.sqrt(best[0])), normal=normal.copy(),
        primitive=tri, feature=FEATURE_NAMES[feat],
    )


# --------------------------------------------------------------------------
# triangle / box overlap
# --------------------------------------------------------------------------

def triangles_overlap_boxes(tris: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Separating-axis overlap test for (M, 3, 3) triangles vs (M, 3) boxes.

    Touching counts as overlap. The 13 candidate axes are the 3 box normals,
    the triangle normal and the 9 edge x box-axis cross products.
    """
    tris = np.asarray(tris, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    v = tris - center[..., None, :]
    v0, v1, v2 = v[..., 0, :], v[..., 1, :], v[..., 2, :]

    # box face normals
    sep = np.any((v.min(axis=-2) > half) | (v.max(axis=-2) < -half), axis=-1)

    e = (v1 - v0, v2 - v1, v0 - v2)
    normal = np.cross(e[0], e[1])
    r = _dot(np.abs(normal), half)
    s = _dot(normal, v0)
    sep |= (s > r) | (s < -r)

    for edge in e:
        for k in range(3):
            # axis = edge x unit_k
            axis = np.zeros_like(edge)
            axis[..., (k + 1) % 3] = edge[..., (k + 2) % 3]
            axis[..., (k + 2) % 3] = -edge[..., (k + 1) % 3]
            p0, p1, p2 = _dot(axis, v0), _dot(axis, v1), _dot(axis, v2)
            r = _dot(np.abs(axis), half)
            sep |= (np.minimum(np.minimum(p0, p1), p2) > r) | (np.maximum(np.maximum(p0, p1), p2) < -r)
    return ~sep


def triangle_cell_overlap(triangle, box_lo, box_hi) -> bool:
    """True if the triangle (3, 3) meets the closed box ``[box_lo, box_hi]``."""
    box_lo = np.asarray(box_lo, dtype=np.float64)
    box_hi = np.asarray(box_hi, dtype=np.float64)
    if np.any(box_hi <= box_lo):
        raise ValueError("box must have positive extent")
    tri = np.asarray(triangle, dtype=np.float64).reshape(1, 3, 3)
    return bool(triangles_overlap_boxes(tri, box_lo[None], box_hi[None])[0])


# --------------------------------------------------------------------------
# watertight inside test (test oracle)
# --------------------------------------------------------------------------

def _ray_hits(origin, direction, corners, eps=1e-12):
    """Moller-Trumbore against every triangle; returns (t, u, v, hit)."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    e1 = b - a
    e2 = c - a
    pvec = np.cross(direction, e2)
    det = _dot(e1, pvec)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - a
    u = _dot(tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv
    t = _dot(e2, qvec) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return t, u, v, hit, ok


def inside_by_parity(mesh: TriangleMesh, point, seed: int = 0, max_tries: int = 16) -> bool:
    """Ray-crossing parity inside test for watertight meshes.

    The ray direction is jittered; directions that graze an edge, a vertex
    or a triangle plane are rejected and redrawn.
    """
    if not mesh.is_watertight():
        raise MeshError("inside_by_parity needs a watertight mesh")
    p = np.asarray(point, dtype=np.float64).reshape(3)
    c = mesh.corners
    _, d2, _, _ = closest_on_triangles(p[None], c[:, 0], c[:, 1], c[:, 2])
    if np.sqrt(d2.min()) < 1e-9:
        raise MeshError("point lies on the surface")

    rng = np.random.default_rng(seed)
    tol = 1e-9
    for _ in range(max_tries):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        t, u, v, hit, ok = _ray_hits(p, direction, c)
        near = ok & (t > 0) & (u > -tol) & (v > -tol) & (u + v < 1 + tol)
        grazing = near & ((np.abs(u) < tol) | (np.abs(v) < tol) | (np.abs(1 - u - v) < tol))
        parallel = ~ok & _plane_reachable(p, direction, c)
        if grazing.any() or parallel.any():
            continue
        return bool(np.count_nonzero(hit) % 2)
    raise MeshError("could not find a non-degenerate ray direction")


def _plane_reachable(p, direction, corners):
    # rays lying in a triangle's plane are ambiguous
    a = corners[:, 0]
    n = np.cross(corners[:, 1] - a, corners[:, 2] - a)
    return np.abs(_dot(n, p - a)) < 1e-12 * (1 + np.linalg.norm(n, axis=1))

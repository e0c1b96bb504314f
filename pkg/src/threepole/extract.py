"""Marching cubes over three-pole grids and mesh post-processing.

Null corners count as positive when picking the cube case, so the
unmodified 256-case table applies. Any edge that would be cut and has a null
endpoint yields a vertex flagged invalid; :func:`strip_null` then removes
those vertices together with every triangle that uses them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._mc_table import CORNER_OFFSETS, EDGE_CORNERS, TRIANGLE_TABLE
from .field import FieldGrid
from .mesh import TriangleMesh

_FLAT_EPS = 1e-12

# per edge: lattice offset of its lower endpoint and its axis
_EDGE_BASE = np.minimum(CORNER_OFFSETS[EDGE_CORNERS[:, 0]], CORNER_OFFSETS[EDGE_CORNERS[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(CORNER_OFFSETS[EDGE_CORNERS[:, 1]] - CORNER_OFFSETS[EDGE_CORNERS[:, 0]]), axis=1)
_CASE_NTRI = (TRIANGLE_TABLE >= 0).sum(axis=1) // 3
# the table emits triangles facing the negative side; reverse so normals point outward
_TABLE = TRIANGLE_TABLE[:, :15].reshape(256, 5, 3)[:, :, ::-1].reshape(256, 15)


@dataclass(frozen=True, eq=False)
class RawMcMesh:
    """Marching-cubes output before null stripping.

    ``edge_keys[v]`` is ``3 * lattice_index + axis`` of the grid edge vertex
    ``v`` was placed on; ``valid[v]`` is False when that edge touches a null
    corner (the position is then the edge midpoint, never non-finite).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    valid: np.ndarray
    edge_keys: np.ndarray

    @property
    def n_invalid(self) -> int:
        return int(np.count_nonzero(~self.valid))


def marching_cubes_3p(grid: FieldGrid, iso: float = 0.0, slab: int = 16) -> RawMcMesh:
    """Classic marching cubes with null propagation.

    Triangles come out ordered by cube index (x fastest) and then by case
    table order; vertices are ordered by grid edge key.
    """
    nx, ny, nz = grid.dims
    if min(nx, ny, nz) < 2:
        raise ValueError("grid needs at least 2 lattice points per axis")
    vol = grid.volume()
    below = vol < iso  # NaN compares False: null corners are coded positive

    edge_key_chunks = []
    for k0 in range(0, nz - 1, slab):
        k1 = min(k0 + slab, nz - 1)
        case = np.zeros((k1 - k0, ny - 1, nx - 1), dtype=np.uint8)
        for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
            case |= below[k0 + dz:k1 + dz, dy:ny - 1 + dy, dx:nx - 1 + dx].astype(np.uint8) << c
        flat = case.ravel()
        cubes = np.flatnonzero((flat != 0) & (flat != 255))
        if len(cubes) == 0:
            continue
        cases = flat[cubes].astype(np.int64)
        ci = cubes % (nx - 1)
        cj = (cubes // (nx - 1)) % (ny - 1)
        ck = cubes // ((nx - 1) * (ny - 1)) + k0
        rows = _TABLE[cases]
        mask = rows >= 0
        edges = rows[mask]
        owner = np.repeat(np.arange(len(cubes)), mask.sum(axis=1))
        base = _EDGE_BASE[edges]
        li = (ci[owner] + base[:, 0]) + nx * ((cj[owner] + base[:, 1]) + ny * (ck[owner] + base[:, 2]))
        edge_key_chunks.append(3 * li + _EDGE_AXIS[edges])

    if not edge_key_chunks:
        return RawMcMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64),
                         np.zeros(0, bool), np.zeros(0, np.int64))
    keys = np.concatenate(edge_key_chunks)
    uniq, inverse = np.unique(keys, return_inverse=True)
    triangles = inverse.reshape(-1, 3).astype(np.int64)

    axis = uniq % 3
    li = uniq // 3
    i0 = li % nx
    j0 = (li // nx) % ny
    k0 = li // (nx * ny)
    step = np.eye(3, dtype=np.int64)[axis]
    f0 = vol[k0, j0, i0]
    f1 = vol[k0 + step[:, 2], j0 + step[:, 1], i0 + step[:, 0]]
    valid = ~(np.isnan(f0) | np.isnan(f1))
    diff = f1 - f0
    flat_edge = ~valid | (np.abs(diff) < _FLAT_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(flat_edge, 0.5, (iso - f0) / np.where(flat_edge, 1.0, diff))
    ijk = np.stack([i0, j0, k0], axis=1) + t[:, None] * step
    vertices = grid.lo + ijk * grid.spacing
    return RawMcMesh(vertices, triangles, valid, uniq)


def strip_null(raw: RawMcMesh) -> TriangleMesh:
    """Drop invalid vertices, every triangle using one, and unused vertices."""
    keep = raw.valid[raw.triangles].all(axis=1) if len(raw.triangles) else np.zeros(0, bool)
    tris = raw.triangles[keep]
    used = np.zeros(len(raw.vertices), dtype=bool)
    used[tris.ravel()] = True
    remap = np.cumsum(used) - 1
    return TriangleMesh(raw.vertices[used], remap[tris])


def reconstruct(grid: FieldGrid, iso: float = 0.0) -> TriangleMesh:
    return strip_null(marching_cubes_3p(grid, iso))


# --------------------------------------------------------------------------
# post-processing
# --------------------------------------------------------------------------

def _directed_edges(tris):
    return np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])


def boundary_half_edges(mesh: TriangleMesh) -> np.ndarray:
    """Directed edges (a, b) of faces whose undirected edge has one face."""
    if mesh.n_triangles == 0:
        return np.zeros((0, 2), np.int64)
    d = _directed_edges(mesh.triangles)
    und = np.sort(d, axis=1)
    _, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    return d[counts[inv.ravel()] == 1]


def boundary_loops(mesh: TriangleMesh) -> list[list[int]]:
    """Closed boundary loops, each oriented along the hole (reverse of the faces).

    Loops passing through a vertex with several outgoing boundary edges
    are skipped.
    """
    half = boundary_half_edges(mesh)
    nxt: dict[int, list[int]] = {}
    for a, b in half:
        nxt.setdefault(int(b), []).append(int(a))
    seen: set[int] = set()
    loops = []
    for start in sorted(nxt):
        if start in seen or len(nxt[start]) != 1:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start][0]
        ok = True
        while cur != start:
            if cur in seen or len(nxt.get(cur, ())) != 1:
                ok = False
                break
            loop.append(cur)
            seen.add(cur)
            cur = nxt[cur][0]
        if ok:
            loops.append(loop)
    return loops


def fill_holes(mesh: TriangleMesh, max_hole_edges: int) -> TriangleMesh:
    new = []
    for loop in boundary_loops(mesh):
        if 3 <= len(loop) <= max_hole_edges:
            new += [(loop[0], loop[i], loop[i + 1]) for i in range(1, len(loop) - 1)]
    if not new:
        return mesh
    return TriangleMesh(mesh.vertices, np.vstack([mesh.triangles, np.array(new)]))


def laplacian_smooth(mesh: TriangleMesh, iterations: int, factor: float = 0.5) -> TriangleMesh:
    """Uniform Laplacian smoothing with boundary vertices held fixed."""
    if iterations <= 0 or mesh.n_triangles == 0:
        return mesh
    d = _directed_edges(mesh.triangles)
    n = mesh.n_vertices
    adj = sp.coo_matrix((np.ones(len(d)), (d[:, 0], d[:, 1])), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    movable = deg > 0
    movable[boundary_half_edges(mesh).ravel()] = False
    v = mesh.vertices.copy()
    for _ in range(iterations):
        avg = (adj @ v)[movable] / deg[movable, None]
        v[movable] += factor * (avg - v[movable])
    return TriangleMesh(v, mesh.triangles)


def cleanup(mesh: TriangleMesh, max_hole_edges: int = 0, smooth_iters: int = 0) -> TriangleMesh:
    """Fan-fill boundary loops of at most ``max_hole_edges`` edges, then smooth."""
    if max_hole_edges < 0 or smooth_iters < 0:
        raise ValueError("cleanup parameters must be non-negative")
    if max_hole_edges:
        mesh = fill_holes(mesh, max_hole_edges)
    return laplacian_smooth(mesh, smooth_iters)

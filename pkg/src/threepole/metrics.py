"""Point-set reconstruction metrics and mesh topology statistics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .mesh import TriangleMesh

EMD_MAX_POINTS = 2048


@dataclass(frozen=True, eq=False)
class PointSample:
    points: np.ndarray
    seed: int | None = None
    triangle: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)


def _points(x) -> np.ndarray:
    p = x.points if isinstance(x, PointSample) else x
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("point set is empty")
    return p


def surface_sample(mesh: TriangleMesh, n: int, seed: int = 0) -> PointSample:
    """Area-uniform random points on a mesh."""
    if n < 1:
        raise ValueError("n must be at least 1")
    areas = mesh.areas
    total = areas.sum() if len(areas) else 0.0
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners[tri]
    pts = (1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1] + (r1 * r2)[:, None] * c[:, 2]
    return PointSample(pts, seed, tri)


def _nn_sq(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # recompute the squared distance from the neighbour's coordinates
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return (diff * diff).sum(axis=1)


def chamfer_l2(a, b) -> float:
    """Half the sum of the two directed mean squared nearest distances."""
    pa, pb = _points(a), _points(b)
    return 0.5 * (float(np.mean(_nn_sq(pa, pb))) + float(np.mean(_nn_sq(pb, pa))))


def fscore(a, b, tau: float) -> float:
    """Harmonic mean of precision (a near b) and recall (b near a) at ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    pa, pb = _points(a), _points(b)
    precision = float(np.mean(cKDTree(pb).query(pa, k=1)[0] <= tau))
    recall = float(np.mean(cKDTree(pa).query(pb, k=1)[0] <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def default_tau(reference: TriangleMesh) -> float:
    """1% of the reference bounding-box diagonal."""
    lo, hi = reference.bounds
    return 0.01 * float(np.linalg.norm(hi - lo))


def emd_exact(a, b) -> float:
    """Mean Euclidean cost of the optimal one-to-one matching."""
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise ValueError("EMD needs equally sized point sets")
    if len(pa) > EMD_MAX_POINTS:
        raise ValueError(f"EMD is capped at {EMD_MAX_POINTS} points")
    cost = cdist(pa, pb)
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum() / len(pa))


@dataclass(frozen=True)
class TopologyStats:
    boundary_edges: int
    euler: int
    components: int


def topology_stats(mesh: TriangleMesh) -> TopologyStats:
    """Boundary-edge count, V - E + F over used vertices, face components."""
    tris = mesh.triangles
    if len(tris) == 0:
        return TopologyStats(0, 0, 0)
    und = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    edges, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    n_vertices = len(np.unique(tris))
    # faces sharing an edge are adjacent
    inv = inv.ravel()
    face = np.tile(np.arange(len(tris)), 3)
    inc = coo_matrix((np.ones(len(face)), (face, inv)), shape=(len(tris), len(edges))).tocsr()
    n_comp, _ = connected_components(inc @ inc.T, directed=False)
    return TopologyStats(
        boundary_edges=int(np.count_nonzero(counts == 1)),
        euler=int(n_vertices - len(edges) + len(tris)),
        components=int(n_comp),
    )

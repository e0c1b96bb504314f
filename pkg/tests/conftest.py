import numpy as np
import pytest

from threepole import shapes
from threepole._mc_table import CORNER_OFFSETS, EDGE_CORNERS, TRIANGLE_TABLE


def ref_closest_point(p, a, b, c):
    """Closest point on a triangle via plane projection + edge fallback."""
    p, a, b, c = (np.asarray(x, dtype=float) for x in (p, a, b, c))
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    proj = p - np.dot(p - a, n) * n
    # barycentric coordinates of the projection
    m = np.column_stack([b - a, c - a])
    uv, *_ = np.linalg.lstsq(m, proj - a, rcond=None)
    if uv[0] >= 0 and uv[1] >= 0 and uv.sum() <= 1:
        return proj
    best = None
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip(np.dot(p - s, e - s) / np.dot(e - s, e - s), 0, 1)
        q = s + t * (e - s)
        if best is None or np.linalg.norm(p - q) < np.linalg.norm(p - best):
            best = q
    return best


def ref_distances(p, corners):
    """Vectorised form of :func:`ref_closest_point`: distance to every triangle."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    h = np.einsum("ij,ij->i", p - a, n)
    proj = p - h[:, None] * n
    e1, e2, w = b - a, c - a, proj - a
    g11, g12, g22 = (np.einsum("ij,ij->i", x, y) for x, y in ((e1, e1), (e1, e2), (e2, e2)))
    r1, r2 = np.einsum("ij,ij->i", w, e1), np.einsum("ij,ij->i", w, e2)
    det = g11 * g22 - g12 * g12
    u = (g22 * r1 - g12 * r2) / det
    v = (g11 * r2 - g12 * r1) / det
    inside = (u >= 0) & (v >= 0) & (u + v <= 1)
    best = np.full(len(a), np.inf)
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip(np.einsum("ij,ij->i", p - s, e - s) / np.einsum("ij,ij->i", e - s, e - s), 0, 1)
        best = np.minimum(best, np.linalg.norm(p - (s + t[:, None] * (e - s)), axis=1))
    return np.where(inside, np.abs(h), best)


def reference_mc(values, lo, spacing, iso=0.0):
    """Textbook marching cubes, one cube at a time in plain Python.

    ``values`` is indexed ``[i, j, k]``. Returns triangles as tuples of edge
    ids ``(i, j, k, axis)`` of each edge's lower endpoint, in the table's own
    winding, and a dict from edge id to the interpolated position.
    """
    f = np.asarray(values, dtype=float).tolist()
    nx, ny, nz = len(f), len(f[0]), len(f[0][0])
    lo = [float(x) for x in lo]
    table = [[int(e) for e in row if e >= 0] for row in TRIANGLE_TABLE]
    offsets = [tuple(int(x) for x in o) for o in CORNER_OFFSETS]
    edges = [(int(a), int(b)) for a, b in EDGE_CORNERS]
    tris, pos = [], {}
    for k in range(nz - 1):
        for j in range(ny - 1):
            for i in range(nx - 1):
                corner = [(i + dx, j + dy, k + dz) for dx, dy, dz in offsets]
                val = [f[x][y][z] for x, y, z in corner]
                case = 0
                for n in range(8):
                    if val[n] < iso:
                        case |= 1 << n
                row = table[case]
                for t in range(0, len(row), 3):
                    tri = []
                    for e in row[t:t + 3]:
                        a, b = edges[e]
                        ca, cb = corner[a], corner[b]
                        axis = [ca[d] != cb[d] for d in range(3)].index(True)
                        key = (min(ca[0], cb[0]), min(ca[1], cb[1]), min(ca[2], cb[2]), axis)
                        s = (iso - val[a]) / (val[b] - val[a])
                        pos[key] = tuple(lo[d] + spacing * (ca[d] + s * (cb[d] - ca[d])) for d in range(3))
                        tri.append(key)
                    tris.append(tuple(tri))
    return tris, pos


def canonical(tri):
    """Rotate a triangle so its smallest entry leads (keeps winding)."""
    r = tri.index(min(tri))
    return tri[r:] + tri[:r]


def euler_and_boundary(tris):
    """Topology by plain dictionaries (oracle for metrics.topology_stats)."""
    edges = {}
    for t in tris:
        for k in range(3):
            e = tuple(sorted((int(t[k]), int(t[(k + 1) % 3]))))
            edges[e] = edges.get(e, 0) + 1
    verts = {int(v) for t in tris for v in t}
    boundary = sum(1 for c in edges.values() if c == 1)
    return boundary, len(verts) - len(edges) + len(tris)


@pytest.fixture(scope="session")
def sphere():
    return shapes.icosphere(3, 0.5)


@pytest.fixture(scope="session")
def fine_sphere():
    return shapes.icosphere(4, 0.5)


@pytest.fixture(scope="session")
def disk():
    return shapes.disk()


@pytest.fixture(scope="session")
def cube():
    return shapes.box()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

"""Procedural test shapes, all with outward / consistently oriented normals."""
from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere (20 * 4**s faces)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    f = faces
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    vertices = np.array(v) * radius + np.asarray(center, dtype=float)
    return TriangleMesh(vertices, np.array(f))


def box(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriangleMesh:
    """Axis-aligned box, 12 triangles, outward normals."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    corners = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
    vertices = lo + corners * (hi - lo)
    quads = [(0, 2, 3, 1), (4, 5, 7, 6),  # z-, z+
             (0, 1, 5, 4), (2, 6, 7, 3),  # y-, y+
             (0, 4, 6, 2), (1, 3, 7, 5)]  # x-, x+
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(vertices, np.array(tris))


def _frame(normal):
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u), n


def disk(radius: float = 0.5, rings: int = 12, segments: int = 48,
         center=(0.013, -0.021, 0.017), normal=(0.12, 0.21, 1.0)) -> TriangleMesh:
    """Flat open disk; faces point along ``normal``.

    The default pose is slightly tilted and off-centre so the surface is in
    general position with respect to axis-aligned grids.
    """
    u, w, _ = _frame(normal)
    pts = [np.zeros(3)]
    for r in range(1, rings + 1):
        rad = radius * r / rings
        for s in range(segments):
            a = 2 * np.pi * s / segments
            pts.append(rad * (np.cos(a) * u + np.sin(a) * w))
    tris = []
    for s in range(segments):
        tris.append((0, 1 + s, 1 + (s + 1) % segments))
    for r in range(1, rings):
        base0 = 1 + (r - 1) * segments
        base1 = 1 + r * segments
        for s in range(segments):
            s1 = (s + 1) % segments
            a, b = base0 + s, base0 + s1
            c, d = base1 + s, base1 + s1
            tris += [(a, c, d), (a, d, b)]
    return TriangleMesh(np.array(pts) + np.asarray(center, dtype=float), np.array(tris))


def open_cylinder(radius: float = 0.35, height: float = 0.8, segments: int = 48, stacks: int = 12,
                  center=(0.011, 0.007, -0.013), axis=(0.1, -0.15, 1.0)) -> TriangleMesh:
    """Cylinder side wall without caps, normals pointing away from the axis."""
    u, w, n = _frame(axis)
    pts = []
    for k in range(stacks + 1):
        h = -0.5 * height + height * k / stacks
        for s in range(segments):
            a = 2 * np.pi * s / segments
            pts.append(radius * (np.cos(a) * u + np.sin(a) * w) + h * n)
    tris = []
    for k in range(stacks):
        for s in range(segments):
            s1 = (s + 1) % segments
            a, b = k * segments + s, k * segments + s1
            c, d = a + segments, b + segments
            tris += [(a, b, d), (a, d, c)]
    return TriangleMesh(np.array(pts) + np.asarray(center, dtype=float), np.array(tris))

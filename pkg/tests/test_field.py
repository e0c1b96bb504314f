import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ref_distances
from threepole import field as F
from threepole import shapes
from threepole.mesh import TriangleMesh, inside_by_parity, triangle_cell_overlap


def brute_occupied(mesh, octree, depth):
    """Every cell at ``depth`` tested against every triangle, one at a time."""
    n = 1 << depth
    occ = {}
    for ijk in itertools.product(range(n), repeat=3):
        lo, hi = octree.box(depth, ijk)
        hits = [t for t in range(mesh.n_triangles) if triangle_cell_overlap(mesh.corners[t], lo, hi)]
        if hits:
            occ[ijk] = hits
    return occ


@pytest.fixture(scope="module")
def two_triangles():
    # one triangle inside the low octant plus a speck at the far corner to set the bbox
    v = np.array([[0.1, 0.1, 0.1], [0.35, 0.12, 0.1], [0.12, 0.4, 0.3],
                  [1.0, 1.0, 1.0], [0.99, 1.0, 1.0], [1.0, 0.99, 1.0]])
    return TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))


@pytest.fixture(scope="module")
def plane():
    v = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], float)
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


# ---- octree ---------------------------------------------------------------

@pytest.mark.parametrize("depth", [1, 2, 3])
def test_octree_matches_enumeration(two_triangles, depth):
    oc = F.build_octree(two_triangles, depth)
    want = brute_occupied(two_triangles, oc, depth)
    got = {tuple(int(x) for x in c): sorted(oc.leaf_triangles(r).tolist())
           for r, c in enumerate(oc.leaf_coords)}
    assert got == want


def test_octree_single_octant(two_triangles):
    oc = F.build_octree(two_triangles, 2)
    coords, occupied = oc.levels[1]
    octants = {tuple(int(x) for x in c) for c in coords[occupied]}
    assert octants == {(0, 0, 0), (1, 1, 1)}


def test_octree_sphere_enumeration():
    sphere = shapes.icosphere(1, 0.5)
    oc = F.build_octree(sphere, 2)
    want = brute_occupied(sphere, oc, 2)
    got = {tuple(int(x) for x in c): sorted(oc.leaf_triangles(r).tolist())
           for r, c in enumerate(oc.leaf_coords)}
    assert got == want


def test_octree_subdivides_only_occupied(sphere):
    oc = F.build_octree(sphere, 4)
    for d in range(1, 5):
        parents, occ = oc.levels[d - 1]
        coords, _ = oc.levels[d]
        want = {tuple(int(x) for x in 2 * p + o) for p in parents[occ] for o in F._CORNERS}
        assert {tuple(int(x) for x in c) for c in coords} == want
    # no leaf above max depth is occupied; empty leaves hold no triangles
    assert all(depth == 4 for depth, _, occ in oc.leaves() if occ)
    assert oc.tri_ptr[-1] == len(oc.tri_ids)


def test_full_cube_shell_depth1(cube):
    oc = F.build_octree(cube, 1)
    assert oc.n_occupied == 8


def test_refinement_nesting(sphere):
    o1, o2 = F.build_octree(sphere, 1), F.build_octree(sphere, 2)
    parents = {tuple(int(x) for x in c // 2) for c in o2.leaf_coords}
    assert parents <= {tuple(int(x) for x in c) for c in o1.leaf_coords}


def test_octree_deterministic(disk):
    a, b = F.build_octree(disk, 5), F.build_octree(disk, 5)
    assert np.array_equal(a.leaf_coords, b.leaf_coords)
    assert np.array_equal(a.tri_ids, b.tri_ids) and np.array_equal(a.tri_ptr, b.tri_ptr)


def test_octree_errors(sphere):
    with pytest.raises(ValueError):
        F.build_octree(sphere, 0)
    with pytest.raises(ValueError):
        F.build_octree(sphere, 13)
    with pytest.raises(ValueError):
        F.build_octree(sphere, 3, padding=-0.1)
    with pytest.raises(ValueError):
        F.build_octree(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int)), 3)


def test_bounding_cube_is_padded_cube(disk):
    lo, size = F.bounding_cube(disk, 0.05)
    blo, bhi = disk.bounds
    assert size == pytest.approx((bhi - blo).max() * 1.05)
    assert np.allclose(lo + size / 2, (blo + bhi) / 2)


# ---- evaluate ---------------------------------------------------------------

def test_empty_leaf_is_null(two_triangles):
    oc = F.build_octree(two_triangles, 3)
    v = F.evaluate([0.9, 0.1, 0.1], oc, two_triangles)
    assert v.is_null and v.tag == "null" and F.value_to_label(v) == F.NULL


@pytest.mark.parametrize("h", [0.01, 0.05])
def test_plane_patch_signs(plane, h):
    oc = F.build_octree(plane, 4)
    up = F.evaluate([0.13, -0.27, h], oc, plane)
    down = F.evaluate([0.13, -0.27, -h], oc, plane)
    assert up.value == pytest.approx(h, rel=1e-12)
    assert down.value == pytest.approx(-h, rel=1e-12)


def test_on_surface_is_positive():
    # fan around an interior vertex, queried exactly at that vertex
    v = np.array([[0.1, 0.2, 0], [-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], float)
    fan = TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]]))
    oc = F.build_octree(fan, 4)
    val = F.evaluate(v[0], oc, fan)
    assert val.value == 0.0 and F.value_to_label(val) == F.OUTSIDE


def test_evaluate_outside_root_raises(sphere):
    oc = F.build_octree(sphere, 3)
    with pytest.raises(ValueError):
        F.evaluate([5.0, 0, 0], oc, sphere)


@pytest.fixture(scope="module")
def disk_samples(disk):
    oc = F.build_octree(disk, 5)
    rng = np.random.default_rng(3)
    pts = oc.origin + rng.random((3000, 3)) * oc.size
    return oc, pts, F.evaluate_points(pts, oc, disk)


def test_null_complement(disk, disk_samples):
    oc, pts, v = disk_samples
    ijk = np.floor((pts - oc.origin) / oc.cell_size).astype(int)
    # independent membership test: is the point in any occupied leaf box?
    in_leaf = np.zeros(len(pts), bool)
    for c in oc.leaf_coords:
        lo, hi = oc.box(oc.max_depth, c)
        in_leaf |= np.all((pts >= lo) & (pts < hi), axis=1)
    assert np.array_equal(np.isnan(v), ~in_leaf)
    assert 0 < np.isnan(v).mean() < 1
    assert (ijk >= 0).all()


def test_magnitude_is_patch_distance(disk, disk_samples):
    oc, pts, v = disk_samples
    live = np.flatnonzero(~np.isnan(v))[:300]
    for i in live:
        ijk = np.floor((pts[i] - oc.origin) / oc.cell_size).astype(int)
        row = oc.find_leaf(ijk[None])[0]
        d = ref_distances(pts[i], disk.corners[oc.leaf_triangles(row)]).min()
        assert abs(v[i]) == pytest.approx(d, rel=1e-7, abs=1e-12)


def test_flip_negates_signs(disk, disk_samples):
    oc, pts, v = disk_samples
    w = F.evaluate_points(pts, oc, disk.flipped())
    assert np.array_equal(np.isnan(v), np.isnan(w))
    live = ~np.isnan(v) & (v != 0)
    # vertex order changes rounding, so magnitudes agree to tolerance only
    assert np.array_equal(np.sign(w[live]), -np.sign(v[live]))
    assert np.allclose(np.abs(w[live]), np.abs(v[live]), rtol=1e-7, atol=0)


def test_sign_agrees_with_parity(sphere):
    oc = F.build_octree(sphere, 5)
    rng = np.random.default_rng(0)
    rows = rng.integers(0, oc.n_occupied, 500)
    pts = oc.origin + (oc.leaf_coords[rows] + rng.random((500, 3))) * oc.cell_size
    v = F.evaluate_points(pts, oc, sphere)
    inside = np.array([inside_by_parity(sphere, p) for p in pts])
    assert ((v < 0) == inside).mean() >= 0.99


# ---- labels -----------------------------------------------------------------

def test_label_examples():
    assert F.value_to_label(F.ThreePoleValue.signed(-0.3)) == 0
    assert F.label_to_value(0).value == -1.0
    assert F.value_to_label(F.NULL_VALUE) == 2 and F.label_to_value(2).is_null
    assert F.value_to_label(F.ThreePoleValue.signed(0.0)) == 1
    assert F.label_to_value(1).value == 1.0
    with pytest.raises(ValueError):
        F.label_to_value(3)


@given(st.sampled_from([0, 1, 2]))
def test_label_round_trip(label):
    assert F.value_to_label(F.label_to_value(label)) == label


@given(st.lists(st.one_of(st.floats(-1e6, 1e6), st.just(float("nan"))), min_size=1, max_size=50))
@settings(max_examples=50)
def test_array_labels_match_scalar(values):
    arr = np.array(values)
    labels = F.labels_from_values(arr)
    assert labels.tolist() == [F.value_to_label(F.ThreePoleValue.from_float(x)) for x in values]
    back = F.values_from_labels(labels)
    assert np.array_equal(np.isnan(back), np.isnan(arr))


# ---- grids ------------------------------------------------------------------

@pytest.fixture(scope="module")
def sphere_grid4(sphere):
    return F.compute_grid(sphere, 4)


def test_grid_dims_and_sparsity(sphere_grid4):
    g = sphere_grid4
    assert g.dims == (17, 17, 17) and len(g.values) == 17 ** 3
    assert g.null_fraction() > 0.5


def test_grid_deterministic(sphere, sphere_grid4):
    again = F.compute_grid(sphere, 4, octree=F.build_octree(sphere, 4))
    assert sphere_grid4.values.tobytes() == again.values.tobytes()


def test_grid_matches_lattice_values(sphere, sphere_grid4):
    g = sphere_grid4
    oc = F.build_octree(sphere, 4)
    n = 17
    ijk = np.array(list(itertools.product(range(n), repeat=3)))[:, ::-1]  # x fastest
    assert np.array_equal(F.lattice_values(ijk, oc, sphere), g.values, equal_nan=True)
    assert np.allclose(g.lattice_points(), oc.origin + ijk * oc.cell_size)


def test_grid_corner_far_from_surface_is_null(two_triangles):
    g = F.compute_grid(two_triangles, 4)
    assert np.isnan(g.volume()[0, 0, -1])


def test_lattice_nonnull_iff_incident_occupied(disk):
    oc = F.build_octree(disk, 4)
    n = oc.resolution + 1
    ijk = np.array(list(itertools.product(range(n), repeat=3)))
    v = F.lattice_values(ijk, oc, disk)
    occ = {tuple(int(x) for x in c) for c in oc.leaf_coords}
    want = np.array([any(tuple(p - o) in occ for o in F._CORNERS) for p in ijk])
    assert np.array_equal(~np.isnan(v), want)


def test_compute_grid_depth_range(sphere):
    with pytest.raises(ValueError):
        F.compute_grid(sphere, 3)
    with pytest.raises(ValueError):
        F.compute_grid(sphere, 11)


# ---- sampling ---------------------------------------------------------------

def test_octree_samples_depth1_cube(cube):
    oc = F.build_octree(cube, 1)
    b = F.sample_points(cube, oc, "octree", 1)
    assert len(b) == 27 and b.strategy == "octree"
    assert len(np.unique(b.points, axis=0)) == 27


def test_random_samples_reproducible(disk):
    oc = F.build_octree(disk, 4)
    a = F.sample_points(disk, oc, "random", 500, seed=7)
    b = F.sample_points(disk, oc, "random", 500, seed=7)
    c = F.sample_points(disk, oc, "random", 500, seed=8)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.points, c.points)
    assert len(a) == 500 and oc.contains(a.points).all()


def test_uniform_samples_lattice(cube):
    oc = F.build_octree(cube, 3)
    b = F.sample_points(cube, oc, "uniform", 1000)
    assert len(b) == 1000
    for axis in range(3):
        u = np.unique(b.points[:, axis])
        assert len(u) == 10 and np.allclose(np.diff(u), oc.size / 10)


@pytest.mark.parametrize("strategy", F.STRATEGIES)
def test_sample_labels_consistent(disk, strategy):
    oc = F.build_octree(disk, 4)
    b = F.sample_points(disk, oc, strategy, 800, seed=1)
    assert np.array_equal(b.labels, F.labels_from_values(b.distances))
    if strategy != "octree":
        assert np.array_equal(b.distances, F.evaluate_points(b.points, oc, disk), equal_nan=True)


def test_sample_bad_args(disk):
    oc = F.build_octree(disk, 3)
    with pytest.raises(ValueError):
        F.sample_points(disk, oc, "poisson", 10)
    with pytest.raises(ValueError):
        F.sample_points(disk, oc, "random", 0)

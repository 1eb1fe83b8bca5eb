"""Geometry kernel: measures, centroids, frames, quadrature exactness."""

import numpy as np
import pytest

from mixedvem import geometry as geo
from mixedvem.errors import DegenerateGeometryError



def unit_cube_faces(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    """Outward-oriented face loops of an axis-aligned box."""
    l, h = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[l[0], l[1], l[2]], [h[0], l[1], l[2]], [h[0], h[1], l[2]],
                  [l[0], h[1], l[2]], [l[0], l[1], h[2]], [h[0], l[1], h[2]],
                  [h[0], h[1], h[2]], [l[0], h[1], h[2]]])
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4),
             (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]
    return [v[list(q)] for q in quads]


L_SHAPE = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0],
                    [1.0, 2.0], [0.0, 2.0]])


def l_shape_triangles():
    # independent oracle: explicit triangulation of the L-shape
    return [np.array([[0, 0], [2, 0], [2, 1]], float),
            np.array([[0, 0], [2, 1], [1, 1]], float),
            np.array([[0, 0], [1, 1], [1, 2]], float),
            np.array([[0, 0], [1, 2], [0, 2]], float)]


def test_cube_measure_and_centroid():
    cube = geo.PolyhedronGeometry(unit_cube_faces())
    assert cube.measure == pytest.approx(1.0, rel=1e-14)
    assert np.allclose(cube.centroid, [0.5, 0.5, 0.5], atol=1e-14)

    big = geo.PolyhedronGeometry(unit_cube_faces((-1, -1, -1), (1, 1, 1)))
    c, diam = geo.centroid_diameter(big)
    assert np.allclose(c, 0.0, atol=1e-14)
    assert diam == pytest.approx(2 * np.sqrt(3.0), rel=1e-14)


def test_square_face_measure():
    square = geo.PolygonGeometry([[0, 0], [1, 0], [1, 1], [0, 1]])
    assert square.measure == pytest.approx(1.0, rel=1e-14)


def test_segment_centroid():
    seg = geo.SegmentGeometry([0, 0, 0], [2, 0, 0])
    c, diam = geo.centroid_diameter(seg)
    assert np.allclose(c, [1, 0, 0])
    assert diam == pytest.approx(2.0)


def test_l_shape_measure_matches_triangulation_oracle():
    poly = geo.PolygonGeometry(L_SHAPE)
    oracle_area = sum(0.5 * abs((t[1] - t[0])[0] * (t[2] - t[0])[1] - (t[1] - t[0])[1] * (t[2] - t[0])[0])
                      for t in l_shape_triangles())
    assert oracle_area == pytest.approx(3.0)
    assert poly.measure == pytest.approx(oracle_area, rel=1e-14)

    # area-weighted centroid of the oracle triangulation
    num = np.zeros(2)
    for t in l_shape_triangles():
        u, v = t[1] - t[0], t[2] - t[0]
        num += 0.5 * abs(u[0] * v[1] - u[1] * v[0]) * t.mean(axis=0)
    assert np.allclose(poly.centroid, num / 3.0, atol=1e-14)


def test_degenerate_polygon_raises():
    with pytest.raises(DegenerateGeometryError):
        geo.PolygonGeometry([[0, 0], [1, 0], [2, 0]])


def test_quadrature_cube_monomials():
    cube = geo.PolyhedronGeometry(unit_cube_faces())
    pts, w = geo.quadrature(cube, 3)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(1.0, rel=1e-12)
    assert np.sum(w * pts[:, 0] * pts[:, 1] * pts[:, 2]) == pytest.approx(1 / 8, rel=1e-12)


def test_quadrature_l_shape_against_triangle_oracle():
    poly = geo.PolygonGeometry(L_SHAPE)
    pts, w = geo.quadrature(poly, 2)
    got = np.sum(w * pts[:, 0] ** 2)
    oracle = 0.0
    for t in l_shape_triangles():
        tp, tw = geo.triangle_quadrature(t, 2)
        oracle += np.sum(tw * tp[:, 0] ** 2)
    assert got == pytest.approx(oracle, rel=1e-12)


@pytest.mark.parametrize("order", [1, 2, 4, 7])
def test_quadrature_exactness_random_polytopes(order):
    # random convex polygons and perturbed hexahedra vs. simplex-sum oracle
    RNG = np.random.default_rng(20240817 + order)
    for _ in range(5):
        n = RNG.integers(4, 9)
        gaps = RNG.uniform(0.5, 1.0, n)
        ang = 2 * np.pi * np.cumsum(gaps) / gaps.sum()
        r = RNG.uniform(0.5, 1.5, n)
        coords = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        poly = geo.PolygonGeometry(coords)
        pts, w = poly.quadrature(order)
        assert np.all(w > 0)
        tris = geo.triangulate_polygon_2d(coords)
        for _ in range(3):
            px, py = RNG.integers(0, order + 1, 2)
            if px + py > order:
                continue
            got = np.sum(w * pts[:, 0] ** px * pts[:, 1] ** py)
            want = sum(np.sum(tw * tp[:, 0] ** px * tp[:, 1] ** py)
                       for tp, tw in (geo.triangle_quadrature(t, order) for t in tris))
            assert got == pytest.approx(want, rel=1e-12, abs=1e-14)


def test_quadrature_perturbed_hexahedron():
    RNG = np.random.default_rng(7)
    loops = unit_cube_faces()
    verts = {tuple(v) for loop in loops for v in map(tuple, loop)}
    shift = {v: np.array(v) + RNG.uniform(-0.15, 0.15, 3) for v in verts}
    loops = [np.array([shift[tuple(v)] for v in loop]) for loop in loops]
    # faces may be warped by the perturbation; re-planarize by triangle split
    flat = []
    for loop in loops:
        flat.append(loop[[0, 1, 2]])
        flat.append(loop[[0, 2, 3]])
    cell = geo.PolyhedronGeometry(flat)
    pts, w = cell.quadrature(4)
    assert np.all(w > 0)
    assert w.sum() == pytest.approx(cell.measure, rel=1e-12)
    # oracle: tetrahedralize from a vertex instead of the centroid
    apex = flat[0][0]
    want = 0.0
    for tri in flat:
        tp, tw = geo.tet_quadrature(np.vstack([tri, apex]), 4)
        sgn = np.sign(np.dot(np.cross(tri[1] - tri[0], tri[2] - tri[0]), apex - tri[0]))
        want += -sgn * np.sum(tw * tp[:, 0] ** 2 * tp[:, 1])
    got = np.sum(w * pts[:, 0] ** 2 * pts[:, 1])
    assert got == pytest.approx(want, rel=1e-10)


def test_face_frames_of_cube():
    cube = geo.PolyhedronGeometry(unit_cube_faces())
    normals = np.array([f.normal for f in cube.faces])
    want = {(0, 0, -1), (0, 0, 1), (0, -1, 0), (0, 1, 0), (1, 0, 0), (-1, 0, 0)}
    got = {tuple(np.round(n).astype(int)) for n in normals}
    assert got == want
    for f in cube.faces:
        # outward: positive dot with centroid offset
        assert np.dot(f.normal, f.centroid - cube.centroid) > 0
        # the monomial frame is canonical: right-handed with the lex-positive normal
        t1, t2 = f.plane.t1, f.plane.t2
        lexpos = f.normal if tuple(f.normal) > tuple(-f.normal) else -f.normal
        assert np.allclose(np.cross(t1, t2), lexpos, atol=1e-14)


def test_oblique_tet_face_normal():
    tet = geo.PolyhedronGeometry([
        np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0]], float),
        np.array([[0, 0, 0], [1, 0, 0], [0, 0, 1]], float),
        np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0]], float),
        np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]], float),
    ])
    n, _ = geo.face_frame(tet, 3)
    oracle = np.cross(np.array([0, 1, 0]) - np.array([1, 0, 0]),
                      np.array([0, 0, 1]) - np.array([1, 0, 0]))
    oracle = oracle / np.linalg.norm(oracle)
    assert np.allclose(n, oracle, atol=1e-14)
    face_c = tet.faces[3].centroid
    assert np.dot(n, face_c - tet.centroid) > 0


def test_closed_surface_normal_sum():
    # divergence theorem on constants: sum of area-weighted normals vanishes
    for loops in (unit_cube_faces(), unit_cube_faces((-2, 0, 1), (0.5, 3, 4))):
        cell = geo.PolyhedronGeometry(loops)
        total = sum(f.measure * f.normal for f in cell.faces)
        area = sum(f.measure for f in cell.faces)
        assert np.linalg.norm(total) <= 1e-12 * area


def test_rigid_motion_invariance():
    coords = L_SHAPE
    poly = geo.PolygonGeometry(coords)
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    moved = coords @ R.T + np.array([3.0, -1.0])
    poly2 = geo.PolygonGeometry(moved)
    assert poly2.measure == pytest.approx(poly.measure, rel=1e-12)
    assert np.allclose(poly2.centroid, R @ poly.centroid + np.array([3.0, -1.0]), atol=1e-12)
    assert poly2.diameter == pytest.approx(poly.diameter, rel=1e-12)

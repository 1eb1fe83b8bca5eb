"""Mesh cutting, lower-dimensional extraction, domain graph, conformity."""

import numpy as np
import pytest

from mixedvem import mesh as msh
from mixedvem.errors import ConformityError
from mixedvem.mesh import (BoundaryCondition, FractureSpec, NetworkSpec,
                           box_mesh, build_domain_graph, cut_background_mesh,
                           cut_with_fracture, extract_lower_meshes,
                           read_mesh, validate_conformity, write_mesh)

DIR = BoundaryCondition("dirichlet", 0.0)


def square_fracture(axis, offset, lo=-1.0, hi=1.0, **kw):
    """Full axis-plane square fracture (axis = plane normal direction)."""
    pts = []
    for u, v in [(lo, lo), (hi, lo), (hi, hi), (lo, hi)]:
        p = [0.0, 0.0, 0.0]
        p[axis] = offset
        p[(axis + 1) % 3] = u
        p[(axis + 2) % 3] = v
        pts.append(p)
    return FractureSpec(np.array(pts), **kw)


def problem1_spec(**kw):
    return NetworkSpec(fractures=[square_fracture(2, 0.0, **kw),
                                  square_fracture(1, 0.0, **kw),
                                  square_fracture(0, 0.0, **kw)])


def test_box_mesh_basics():
    mesh = box_mesh([0, 0, 0], [1, 1, 1], (2, 2, 2))
    assert len(mesh.cells) == 8
    assert mesh.total_volume() == pytest.approx(1.0, rel=1e-13)
    tags = set(mesh.boundary_tags.values())
    assert tags == {"xmin", "xmax", "ymin", "ymax", "zmin", "zmax"}
    for cid in mesh.cells:
        geom = mesh.cell_geometry(cid)
        assert geom.measure == pytest.approx(1 / 8, rel=1e-13)


def test_single_cube_half_split():
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (1, 1, 1))
    frac = square_fracture(2, 0.0)
    cut_with_fracture(mesh, frac, 0)
    assert len(mesh.cells) == 2
    assert mesh.total_volume() == pytest.approx(8.0, rel=1e-12)
    marked = [f for f in mesh.faces if mesh.face_fracture.get(f) == 0]
    assert len(marked) == 1
    inc = mesh.face_cells()
    assert len(inc[marked[0]]) == 2


def test_cut_prolongation_two_fractures():
    # one full fracture and one ending inside the cube: 4 sub-cells with
    # prolonged-cut hanging faces, fracture geometry unaltered
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (1, 1, 1))
    full = square_fracture(2, 0.0)
    partial = FractureSpec(np.array([
        [0.0, -1.0, -1.0], [0.0, 1.0, -1.0], [0.0, 1.0, 0.5], [0.0, -1.0, 0.5]]))
    spec = NetworkSpec(fractures=[full, partial])
    md = cut_background_mesh(mesh, spec)
    assert len(mesh.cells) == 4
    assert mesh.total_volume() == pytest.approx(8.0, rel=1e-12)
    # fracture areas preserved exactly
    assert md.fractures[0].area() == pytest.approx(4.0, rel=1e-12)
    assert md.fractures[1].area() == pytest.approx(3.0, rel=1e-12)
    # the prolonged (non-physical) part of the x=0 cut exists as plain faces
    on_plane_unmarked = 0
    for fid, vids in mesh.faces.items():
        coords = mesh.face_coords(fid)
        if np.max(np.abs(coords[:, 0])) < 1e-12 and mesh.face_fracture.get(fid) is None:
            on_plane_unmarked += 1
    assert on_plane_unmarked >= 1
    assert validate_conformity(md) == []


def test_problem1_eight_cube_coplanar_detection():
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    md = cut_background_mesh(mesh, problem1_spec())
    # fractures lie on existing faces: cells stay uncut
    assert len(mesh.cells) == 8
    for fm in md.fractures:
        assert len(fm.cells) == 4
        assert fm.area() == pytest.approx(4.0, rel=1e-12)
    assert len(md.traces) == 3
    for tm in md.traces:
        assert tm.length == pytest.approx(2.0, rel=1e-12)
        assert len(tm.cells) == 2
    assert len(md.intersections) == 1
    assert np.allclose(md.intersections[0].coords, 0.0, atol=1e-12)
    assert validate_conformity(md) == []


def test_problem1_domain_graph():
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    md = cut_background_mesh(mesh, problem1_spec())
    g = md.graph
    assert g.n_fractures == 3 and g.n_traces == 3 and g.n_intersections == 1
    # each fracture carries exactly two traces
    for l in range(3):
        assert len(g.traces_of_fracture[l]) == 2
    assert g.traces_of_intersection[0] == [0, 1, 2]
    # all trace sides are two-sided inside each fracture
    for tm in md.traces:
        for cell in tm.cells:
            for l, sides in cell.sides.items():
                assert len(sides) == 2
    # 6 sides at the intersection: 2 per trace
    assert len(md.intersections[0].sides) == 6


def test_no_fractures():
    mesh = box_mesh([0, 0, 0], [1, 1, 1], (2, 2, 2))
    md = cut_background_mesh(mesh, NetworkSpec(fractures=[]))
    assert md.fractures == [] and md.traces == [] and md.intersections == []


def test_two_parallel_fractures_no_trace():
    mesh = box_mesh([0, 0, 0], [1, 1, 1], (2, 2, 2))
    spec = NetworkSpec(fractures=[
        square_fracture(2, 0.25, lo=0.0, hi=1.0),
        square_fracture(2, 0.75, lo=0.0, hi=1.0)])
    md = cut_background_mesh(mesh, spec)
    assert len(md.fractures) == 2 and len(md.traces) == 0
    assert validate_conformity(md) == []
    assert md.mesh3d.total_volume() == pytest.approx(1.0, rel=1e-12)


def test_oblique_fracture_cut():
    mesh = box_mesh([0, 0, 0], [1, 1, 1], (2, 2, 2))
    tilt = FractureSpec(np.array([
        [0.1, 0.1, 0.2], [0.9, 0.1, 0.45], [0.9, 0.9, 0.75], [0.1, 0.9, 0.5]]))
    md = cut_background_mesh(mesh, NetworkSpec(fractures=[tilt]))
    assert md.mesh3d.total_volume() == pytest.approx(1.0, rel=1e-10)
    report = validate_conformity(md)
    assert report == []


def test_partial_coplanar_face_split():
    # fracture on an existing face plane but covering only part of it
    mesh = box_mesh([0, 0, 0], [2, 1, 1], (2, 1, 1))
    frac = FractureSpec(np.array([
        [0.5, 0.0, 0.0], [1.5, 0.0, 0.0], [1.5, 1.0, 0.0], [0.5, 1.0, 0.0]]) +
        np.array([0.0, 0.0, 0.0]))
    # shift fracture onto the interior plane x=1 instead
    frac = FractureSpec(np.array([
        [1.0, 0.2, 0.2], [1.0, 0.8, 0.2], [1.0, 0.8, 0.8], [1.0, 0.2, 0.8]]))
    md = cut_background_mesh(mesh, NetworkSpec(fractures=[frac]))
    assert md.fractures[0].area() == pytest.approx(0.36, rel=1e-12)
    assert md.mesh3d.total_volume() == pytest.approx(2.0, rel=1e-12)
    assert validate_conformity(md) == []


def test_cutting_idempotent():
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    spec = NetworkSpec(fractures=[square_fracture(2, 0.0)])
    cut_background_mesh(mesh, spec)
    n_cells = len(mesh.cells)
    n_faces = len(mesh.faces)
    cut_with_fracture(mesh, spec.fractures[0], 0)
    assert len(mesh.cells) == n_cells
    assert len(mesh.faces) == n_faces


def test_deleted_fracture_face_detected():
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    md = cut_background_mesh(mesh, NetworkSpec(fractures=[square_fracture(2, 0.0)]))
    cell = md.fractures[0].cells[0]
    md.mesh3d.face_fracture.pop(cell.face_id)
    md.fractures[0].cells.remove(cell)
    report = validate_conformity(md)
    assert any("area" in line for line in report)


def test_mesh_file_roundtrip(tmp_path):
    mesh = box_mesh([0, 0, 0], [1, 2, 3], (2, 1, 2))
    path = tmp_path / "box.mesh"
    write_mesh(mesh, path)
    back = read_mesh(path)
    assert len(back.cells) == len(mesh.cells)
    assert len(back.faces) == len(mesh.faces)
    assert back.total_volume() == pytest.approx(mesh.total_volume(), rel=1e-12)
    assert sorted(back.boundary_tags.values()) == sorted(mesh.boundary_tags.values())


def random_network(rng, n_frac):
    """Random contained rectangles (fractures must fit inside the domain)."""
    fractures = []
    for _ in range(n_frac):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        t1 = np.cross(n, [1.0, 0.3, 0.7])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        a, b = rng.uniform(0.12, 0.33, 2)
        r = float(np.hypot(a, b))
        pad = r + 0.02
        c = rng.uniform(pad, 1 - pad, 3)
        pts = [c + a * t1 + b * t2, c - a * t1 + b * t2,
               c - a * t1 - b * t2, c + a * t1 - b * t2]
        fractures.append(FractureSpec(np.array(pts)))
    return NetworkSpec(fractures=fractures)


@pytest.mark.parametrize("seed", range(10))
def test_random_networks_conserve(seed):
    rng = np.random.default_rng(1000 + seed)
    mesh = box_mesh([0, 0, 0], [1, 1, 1], (4, 4, 4))
    spec = random_network(rng, int(rng.integers(1, 6)))
    md = cut_background_mesh(mesh, spec)
    assert md.mesh3d.total_volume() == pytest.approx(1.0, rel=1e-10)
    for l, fm in enumerate(md.fractures):
        area = msh.polygon_area_centroid_2d(spec.fractures[l].polygon2d)[0]
        assert fm.area() == pytest.approx(area, rel=1e-10)
    assert validate_conformity(md) == []


def test_perturbed_vertices_reported():
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    md = cut_background_mesh(mesh, problem1_spec())
    assert validate_conformity(md) == []
    # push one interior vertex well beyond the geometric tolerance
    rng = np.random.default_rng(9)
    vid = mesh.find_vertex([0.0, 0.0, 1.0])
    mesh.snap_vertex(vid, np.array([3e-4, -2e-4, 1.0 + 4e-4]))
    report = validate_conformity(md)
    assert report != []

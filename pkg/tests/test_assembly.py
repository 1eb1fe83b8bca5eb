"""Global DOF map, block structure, couplings, boundary conditions."""

import numpy as np
import pytest
import scipy.sparse as sps

from mixedvem.assembly import (apply_boundary_conditions, assemble_complete,
                               assemble_coupling_same_dim, assemble_dimension,
                               build_dof_map, _Coo)
from mixedvem.errors import ConfigError, SingularSystemError
from mixedvem.mesh import (BoundaryCondition, FractureSpec, NetworkSpec,
                           box_mesh, cut_background_mesh)
from mixedvem.solver import solve

TAGS = ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"]
DIRICHLET0 = {t: BoundaryCondition("dirichlet", 0.0) for t in TAGS}


def two_cube_mesh():
    return box_mesh([0, 0, 0], [2, 1, 1], (2, 1, 1))


def fracture_between_cubes(**kw):
    return FractureSpec(np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]],
                                 dtype=float), **kw)


def test_two_cubes_plain_face_rt0():
    md = cut_background_mesh(two_cube_mesh(), NetworkSpec(fractures=[]))
    dm = build_dof_map(md, order=0)
    assert dm.block(3).n_u == 11   # 12 faces minus 1 shared
    assert dm.block(3).n_p == 2


def test_two_cubes_fracture_face_doubled():
    spec = NetworkSpec(fractures=[fracture_between_cubes()])
    md = cut_background_mesh(two_cube_mesh(), spec)
    dm = build_dof_map(md, order=0)
    assert dm.block(3).n_u == 12   # shared face carries two DOF sets
    # the fracture block exists with its own DOFs
    blk2 = dm.block(2, 0)
    assert blk2.n_u == 4 + 0 and blk2.n_p == 1


def test_trace_edge_four_dof_sets():
    # two crossing fractures: each trace edge carries 2 sets per fracture
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    f1 = FractureSpec(np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]],
                               dtype=float))
    f2 = FractureSpec(np.array([[-1, 0, -1], [1, 0, -1], [1, 0, 1], [-1, 0, 1]],
                               dtype=float))
    md = cut_background_mesh(mesh, NetworkSpec(fractures=[f1, f2]))
    dm = build_dof_map(md, order=0)
    tm = md.traces[0]
    cell = tm.cells[0]
    key = tuple(sorted((cell.vid_a, cell.vid_b)))
    sets = [k for k in dm.edge_dofs if k[1] == key]
    assert len(sets) == 4  # (2 fractures) x (2 sides)


def test_dimension_blocks_are_block_diagonal():
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    f1 = FractureSpec(np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]],
                               dtype=float))
    f2 = FractureSpec(np.array([[-1, -1, 0.5], [1, -1, 0.5], [1, 1, 0.5],
                                [-1, 1, 0.5]]))
    md = cut_background_mesh(mesh, NetworkSpec(fractures=[f1, f2]))
    dm = build_dof_map(md, order=0)
    K2 = assemble_dimension(dm, 2).matrix(dm.total)
    a, b = dm.block(2, 0), dm.block(2, 1)
    cross = K2[a.offset:a.offset + a.n_dof, b.offset:b.offset + b.n_dof]
    assert cross.nnz == 0


def test_complete_block_skeleton():
    # zero blocks of the 4x4 skeleton stay empty; lower C blocks = -upper^T
    from tests.test_mesh import problem1_spec
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    md = cut_background_mesh(mesh, problem1_spec())
    system = assemble_complete(md, order=0)
    A = system.matrix
    dm = system.dofmap
    blk3 = dm.block(3)
    s3 = np.arange(blk3.offset, blk3.offset + blk3.n_dof)
    s1 = np.concatenate([np.arange(dm.block(1, t).offset,
                                   dm.block(1, t).offset + dm.block(1, t).n_dof)
                         for t in range(3)])
    s0 = np.array([dm.block(0, 0).offset])
    assert abs(A[np.ix_(s3, s1)]).max() == 0.0   # no 3D-1D coupling
    assert abs(A[np.ix_(s3, s0)]).max() == 0.0   # no 3D-0D coupling
    s2 = np.concatenate([np.arange(dm.block(2, l).offset,
                                   dm.block(2, l).offset + dm.block(2, l).n_dof)
                         for l in range(3)])
    assert abs(A[np.ix_(s2, s0)]).max() == 0.0   # no 2D-0D coupling
    # transpose structure of the cross-dimension blocks
    C32 = A[np.ix_(s3, s2)].toarray()
    C23 = A[np.ix_(s2, s3)].toarray()
    assert np.allclose(C23, -C32.T, atol=1e-14)
    C10 = A[np.ix_(s1, s0)].toarray()
    C01 = A[np.ix_(s0, s1)].toarray()
    assert np.allclose(C01, -C10.T, atol=1e-14)
    # Problem 1: the 1D/0D coupling touches all three traces
    touched = {t for t in range(3)
               if abs(A[np.ix_(np.arange(dm.block(1, t).offset,
                                         dm.block(1, t).offset
                                         + dm.block(1, t).n_dof), s0)]).max() > 0}
    assert touched == {0, 1, 2}


def test_same_dim_coupling_values_and_vanishing():
    spec0 = NetworkSpec(fractures=[fracture_between_cubes(inverse_eta2=0.0)])
    md0 = cut_background_mesh(two_cube_mesh(), spec0)
    dm0 = build_dof_map(md0, order=0)
    coo = _Coo()
    assemble_coupling_same_dim(dm0, md0, 3, coo)
    assert coo.matrix(dm0.total).nnz == 0  # eta -> infinity: no term at all

    eta = 10.0
    spec = NetworkSpec(fractures=[fracture_between_cubes(inverse_eta2=1 / eta)])
    md = cut_background_mesh(two_cube_mesh(), spec)
    dm = build_dof_map(md, order=0)
    coo = _Coo()
    assemble_coupling_same_dim(dm, md, 3, coo)
    C = coo.matrix(dm.total)
    # one RT0 DOF per side: diagonal entries (1/eta) * |f| (the face mass of
    # the unit normal trace); the dissipative sign is positive
    vals = C.diagonal()
    nz = vals[vals != 0]
    assert len(nz) == 2
    assert np.allclose(nz, (1 / eta) * 1.0)
    assert (C - C.T).nnz == 0


def test_cross_dim_coupling_rt0_values():
    spec = NetworkSpec(fractures=[fracture_between_cubes()])
    md = cut_background_mesh(two_cube_mesh(), spec)
    system = assemble_complete(md, order=0)
    dm = system.dofmap
    blk3, blk2 = dm.block(3), dm.block(2, 0)
    cell = md.fractures[0].cells[0]
    p2 = blk2.cell_p_dofs[0]
    rows = []
    for cid in (cell.cell_plus, cell.cell_minus):
        dof = blk3.offset + dm.face_dofs[(cell.face_id, cid)][0]
        rows.append(system.matrix[dof, p2[0]])
    # RT0/constant pressure: entry = face area for each side
    assert np.allclose(rows, 1.0)
    # equal-and-opposite outward side fluxes produce a zero jump row
    u = np.zeros(dm.total)
    d_plus = blk3.offset + dm.face_dofs[(cell.face_id, cell.cell_plus)][0]
    d_minus = blk3.offset + dm.face_dofs[(cell.face_id, cell.cell_minus)][0]
    u[d_plus], u[d_minus] = 1.0, -1.0
    jump_row = system.matrix[p2[0], :] @ u
    assert abs(jump_row) < 1e-14


def test_dirichlet_zero_gives_zero_rhs():
    spec = NetworkSpec(fractures=[], bc3=DIRICHLET0)
    md = cut_background_mesh(box_mesh([0, 0, 0], [1, 1, 1], (1, 1, 1)), spec)
    system = assemble_complete(md, order=1)
    apply_boundary_conditions(system)
    assert np.allclose(system.rhs, 0.0)


def test_missing_bc_tag_raises():
    bc = dict(DIRICHLET0)
    bc.pop("zmax")
    spec = NetworkSpec(fractures=[], bc3=bc)
    md = cut_background_mesh(box_mesh([0, 0, 0], [1, 1, 1], (1, 1, 1)), spec)
    system = assemble_complete(md, order=0)
    with pytest.raises(ConfigError):
        apply_boundary_conditions(system)


def test_all_neumann_singular_reported():
    # closed box with an incompatible source: the singular system is reported
    # with a null-space estimate instead of returning garbage
    bc = {t: BoundaryCondition("neumann") for t in TAGS}
    spec = NetworkSpec(fractures=[], bc3=bc, source3=1.0)
    md = cut_background_mesh(box_mesh([0, 0, 0], [1, 1, 1], (2, 2, 2)), spec)
    system = assemble_complete(md, order=0)
    apply_boundary_conditions(system)
    with pytest.raises(SingularSystemError) as err:
        solve(system)
    assert err.value.null_dim is None or err.value.null_dim >= 1


def test_no_fracture_system_is_pure_3d_block():
    spec = NetworkSpec(fractures=[], bc3=DIRICHLET0)
    md = cut_background_mesh(box_mesh([0, 0, 0], [1, 1, 1], (2, 2, 2)), spec)
    system = assemble_complete(md, order=0)
    dm = system.dofmap
    assert set(dm.blocks) == {(3, 0)}
    blk = dm.block(3)
    A = system.matrix
    # saddle structure: pressure-pressure block is zero
    pp = A[blk.slice_p, blk.slice_p]
    assert pp.nnz == 0
    up = A[blk.slice_u, blk.slice_p].toarray()
    pu = A[blk.slice_p, blk.slice_u].toarray()
    assert np.allclose(up, -pu.T, atol=1e-14)


def test_single_element_domain_matches_local():
    spec = NetworkSpec(fractures=[], bc3=DIRICHLET0)
    md = cut_background_mesh(box_mesh([0, 0, 0], [1, 1, 1], (1, 1, 1)), spec)
    dm = build_dof_map(md, order=1)
    K = assemble_dimension(dm, 3).matrix(dm.total).toarray()
    blk = dm.block(3)
    loc = blk.locals_[0]
    # single cell: the assembled block equals the local matrix up to the
    # outward/global sign conjugation
    s = np.concatenate([blk.cell_u_signs[0], np.ones(blk.n_p)])
    dofs = np.concatenate([blk.cell_u_dofs[0], blk.cell_p_dofs[0]])
    K_loc = loc.K * np.outer(s, s)
    assert np.allclose(K[np.ix_(dofs, dofs)], K_loc, atol=1e-13)


def test_doubling_count_matches_formula():
    from tests.test_mesh import problem1_spec
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    md = cut_background_mesh(mesh, problem1_spec())
    for k in (0, 1):
        dm = build_dof_map(md, order=k)
        per_face = dm.space(3).n_face_dofs()
        per_edge = dm.space(2).n_face_dofs()
        n_frac_faces = sum(len(fm.cells) for fm in md.fractures)
        # duplicated 3D DOFs: one extra set per fracture face
        base = build_dof_map_undoubled_count(md, dm, k)
        assert dm.block(3).n_u - base == n_frac_faces * per_face
        # each trace edge adds 2 extra sets per fracture (4 sets vs 2 shared)
        for tm in md.traces:
            for cell in tm.cells:
                key = tuple(sorted((cell.vid_a, cell.vid_b)))
                sets = [kk for kk in dm.edge_dofs if kk[1] == key]
                assert len(sets) == 4


def build_dof_map_undoubled_count(md, dm, k):
    """Flux-DOF count if fracture faces were shared like interior faces."""
    mesh = md.mesh3d
    inc = mesh.face_cells()
    per_face = dm.space(3).n_face_dofs()
    blk = dm.block(3)
    n_interior_sets = sum(1 for fid, owners in inc.items() if owners)
    cell_interior = blk.n_u - per_face * sum(
        2 if mesh.face_fracture.get(fid) is not None and len(inc[fid]) == 2 else 1
        for fid in mesh.faces if inc[fid])
    return n_interior_sets * per_face + cell_interior


def test_flux_continuity_mode():
    # without trace flow: no 1D flux DOFs, multipliers approximate the trace
    # pressure; constraint rows sum duplicated DOFs to zero for RT0
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    f1 = FractureSpec(np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]],
                               dtype=float), a2=1.0,
                      bc=BoundaryCondition("dirichlet", lambda x: x[0]))
    f2 = FractureSpec(np.array([[-1, 0, -1], [1, 0, -1], [1, 0, 1], [-1, 0, 1]],
                               dtype=float), a2=1.0,
                      bc=BoundaryCondition("dirichlet", lambda x: x[0]))
    bc3 = {t: BoundaryCondition("dirichlet", lambda x: x[0]) for t in TAGS}
    spec = NetworkSpec(fractures=[f1, f2], bc3=bc3)
    md = cut_background_mesh(mesh, spec)

    system = assemble_complete(md, order=0, trace_flow=False)
    dm = system.dofmap
    blk1 = dm.block(1, 0)
    assert blk1.n_u == 0 and blk1.n_p == len(md.traces[0].cells)
    assert (0, 0) not in dm.blocks  # no 0D block in this mode
    # constraint row: equal coefficients on the four duplicated edge DOFs
    row = system.matrix[blk1.cell_p_dofs[0][0], :].toarray().ravel()
    nz = np.nonzero(row)[0]
    assert len(nz) == 4
    assert np.allclose(row[nz], row[nz][0])

    apply_boundary_conditions(system)
    sol = solve(system)
    # multiplier approximates the trace pressure: full model in the
    # eta -> infinity, vanishing-a1 limit
    spec.trace_defaults.a1 = 1e-8
    system_full = assemble_complete(md, order=0, trace_flow=True)
    apply_boundary_conditions(system_full)
    sol_full = solve(system_full)
    lam = sol.x[blk1.cell_p_dofs[0][0]]
    blk1f = sol_full.dofmap.block(1, 0)
    p_full = sol_full.x[blk1f.cell_p_dofs[0][0]]
    assert lam == pytest.approx(p_full, abs=1e-6)


def test_determinism():
    from tests.test_mesh import problem1_spec
    results = []
    for _ in range(2):
        mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
        md = cut_background_mesh(mesh, problem1_spec(
            bc=BoundaryCondition("dirichlet", 1.0)))
        md.spec.bc3 = {t: BoundaryCondition("dirichlet", 1.0) for t in TAGS}
        md.spec.trace_defaults.bc = BoundaryCondition("dirichlet", 1.0)
        md.spec.intersection_defaults.bc = BoundaryCondition("dirichlet", 1.0)
        system = assemble_complete(md, order=1)
        apply_boundary_conditions(system)
        sol = solve(system)
        results.append((system.dofmap.total,
                        system.matrix.copy(), sol.x.copy()))
    assert results[0][0] == results[1][0]
    assert (results[0][1] != results[1][1]).nnz == 0
    assert np.array_equal(results[0][2], results[1][2])


def test_flux_continuity_conflicts_with_finite_eta1():
    from mixedvem.mesh import TraceData
    mesh = box_mesh([-1, -1, -1], [1, 1, 1], (2, 2, 2))
    f1 = FractureSpec(np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]],
                               dtype=float))
    f2 = FractureSpec(np.array([[-1, 0, -1], [1, 0, -1], [1, 0, 1], [-1, 0, 1]],
                               dtype=float))
    spec = NetworkSpec(fractures=[f1, f2],
                       trace_defaults=TraceData(inverse_eta1=0.5))
    md = cut_background_mesh(mesh, spec)
    with pytest.raises(ConfigError):
        build_dof_map(md, order=0, trace_flow=False)

"""Global saddle-point assembly over the mixed-dimensional mesh.

Global layout follows the dimension blocks

    [ h3 | h2_1 .. h2_N2 | h1_1 .. h1_N1 | h0 ]

with each domain block h = [flux dofs, pressure dofs].  Flux DOFs are shared
across neighbouring cells (H(div) conformity) except on interfaces: a face
on a fracture carries one DOF set per 3D side, an edge on a trace carries
one set per fracture side, and a trace endpoint at a trace intersection one
set per 1D side.  The assembled matrix has the block skeleton

    [ K3+C33   C32     0      0  ]
    [ -C32^T  K2+C22  C21     0  ]
    [   0    -C21^T  K1+C11  C10 ]
    [   0      0    -C10^T   0  ]

where the K blocks are the per-domain [A, -W^T; W, 0] saddle matrices, the
same-dimension C blocks carry the finite normal-transmissivity terms (they
vanish when inverse_eta = 0) and the cross-dimension C blocks pair flux
jumps with lower-dimensional pressures.

With trace flow disabled the 1D/0D equations are replaced by Lagrange
multipliers enforcing weak flux continuity across traces; the multipliers
approximate the trace pressure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

from .elements import (ElementSpace, Local1D, LocalMatrixSet, local_matrices,
                       local_matrices_1d)
from .errors import ConfigError
from .mesh import MixedDimensionalMesh, BoundaryCondition
from .polyspace import MonomialBasis, dim_poly


@dataclass
class DomainBlock:
    """One domain's slice of the global system with its scatter data."""

    dim: int
    index: int
    offset: int = 0
    n_u: int = 0
    n_p: int = 0
    geoms: list = field(default_factory=list)
    locals_: list = field(default_factory=list)
    cell_u_dofs: list = field(default_factory=list)    # global flux dof ids
    cell_u_signs: list = field(default_factory=list)   # local-outward = sign*global
    cell_p_dofs: list = field(default_factory=list)
    nu: object = 1.0
    source: object = 0.0
    # (cell, local face/edge/endpoint, bc) for external boundary parts
    boundary: list = field(default_factory=list)
    constrained: list = field(default_factory=list)    # zero-flux dof ids
    cell_ids: list = field(default_factory=list)       # 3D: mesh cell ids
    cell_index_of: dict = field(default_factory=dict)

    @property
    def n_dof(self):
        return self.n_u + self.n_p

    @property
    def slice_u(self):
        return slice(self.offset, self.offset + self.n_u)

    @property
    def slice_p(self):
        return slice(self.offset + self.n_u, self.offset + self.n_dof)


@dataclass
class GlobalDofMap:
    """DOF numbering with interface duplication plus per-domain blocks."""

    blocks: dict
    total: int
    order: int
    family3d: str
    trace_flow: bool
    # registries used by the coupling assembly and post-processing
    face_dofs: dict = field(default_factory=dict)     # (fid, cid) -> ids
    face_signs: dict = field(default_factory=dict)    # (fid, cid) -> +-1
    edge_dofs: dict = field(default_factory=dict)     # (frac, ekey, ci) -> ids
    edge_signs: dict = field(default_factory=dict)
    vertex_dofs: dict = field(default_factory=dict)   # (trace, vid, ci) -> id
    vertex_signs: dict = field(default_factory=dict)

    def block(self, dim, index=0):
        return self.blocks[(dim, index)]

    def space(self, dim) -> ElementSpace:
        if dim == 3:
            return ElementSpace(3, self.order, self.family3d)
        return ElementSpace(dim, self.order, "RT")

    def counts(self):
        """Flux/pressure totals per dimension (diagnostic, manifest)."""
        out = {}
        for (d, _), blk in self.blocks.items():
            u, p = out.get(d, (0, 0))
            out[d] = (u + blk.n_u, p + blk.n_p)
        return out


def _local_quad_order(order, override):
    return override if override is not None else 2 * (order + 1)


def build_dof_map(md: MixedDimensionalMesh, order: int, family3d: str = "RT",
                  trace_flow: bool = True, quad_order: int = None,
                  data_quad_order: int = None) -> GlobalDofMap:
    """Number all DOFs, duplicate interface DOFs, build local matrices."""
    if not trace_flow:
        for tm in md.traces:
            if md.spec.trace_data(tm.index).inverse_eta1 > 0:
                raise ConfigError(
                    "trace-flow-neglected mode conflicts with a finite trace "
                    "normal transmissivity (eta1)")
    dm = GlobalDofMap(blocks={}, total=0, order=order, family3d=family3d,
                      trace_flow=trace_flow)
    offset = 0
    offset = _build_3d_block(dm, md, offset, quad_order)
    for fm in md.fractures:
        offset = _build_2d_block(dm, md, fm, offset, quad_order)
    for tm in md.traces:
        offset = _build_1d_block(dm, md, tm, offset, quad_order)
    if trace_flow:
        for ip in md.intersections:
            blk = DomainBlock(dim=0, index=ip.index, offset=offset, n_u=0, n_p=1)
            idata = md.spec.intersection_data(ip.index)
            blk.source = idata.source
            dm.blocks[(0, ip.index)] = blk
            offset += 1
    dm.total = offset
    return dm


def _build_3d_block(dm, md, offset, quad_order):
    mesh = md.mesh3d
    space = dm.space(3)
    per_face = space.n_face_dofs()
    blk = DomainBlock(dim=3, index=0, offset=offset)
    blk.nu = 1.0 / md.spec.a3
    blk.source = md.spec.source3

    inc = mesh.face_cells()
    cids = sorted(mesh.cells)
    next_u = 0
    for fid in sorted(mesh.faces):
        owners = inc[fid]
        if not owners:
            continue
        if mesh.face_fracture.get(fid) is not None:
            for cid, s in sorted(owners):
                dm.face_dofs[(fid, cid)] = np.arange(next_u, next_u + per_face)
                dm.face_signs[(fid, cid)] = 1
                next_u += per_face
        elif len(owners) == 1:
            cid, s = owners[0]
            dm.face_dofs[(fid, cid)] = np.arange(next_u, next_u + per_face)
            dm.face_signs[(fid, cid)] = 1
            next_u += per_face
        else:
            ids = np.arange(next_u, next_u + per_face)
            next_u += per_face
            from .geometry import fit_plane
            intrinsic = fit_plane(mesh.face_coords(fid)).normal
            canon = 1 if tuple(intrinsic) > tuple(-intrinsic) else -1
            for cid, s in owners:
                dm.face_dofs[(fid, cid)] = ids
                dm.face_signs[(fid, cid)] = s * canon

    interior_of = {}
    lay_ii = dim_poly(3, space.grad_order) - 1
    lay_iii = 3 * dim_poly(3, space.order) - (dim_poly(3, space.order + 1) - 1)
    for cid in cids:
        interior_of[cid] = np.arange(next_u, next_u + lay_ii + lay_iii)
        next_u += lay_ii + lay_iii
    blk.n_u = next_u
    n_p_cell = dim_poly(3, space.grad_order)
    blk.n_p = n_p_cell * len(cids)

    qo = _local_quad_order(dm.order, quad_order)
    for i, cid in enumerate(cids):
        geom = mesh.cell_geometry(cid)
        blk.geoms.append(geom)
        blk.locals_.append(local_matrices(space, geom, nu=blk.nu, quad_order=qo))
        u_ids, u_sgn = [], []
        for (fid, s) in mesh.cells[cid]:
            u_ids.append(dm.face_dofs[(fid, cid)])
            u_sgn.append(np.full(per_face, dm.face_signs[(fid, cid)], dtype=float))
        u_ids.append(interior_of[cid])
        u_sgn.append(np.ones(lay_ii + lay_iii))
        blk.cell_u_dofs.append(offset + np.concatenate(u_ids) if u_ids else np.zeros(0, int))
        blk.cell_u_signs.append(np.concatenate(u_sgn))
        blk.cell_p_dofs.append(offset + blk.n_u + n_p_cell * i + np.arange(n_p_cell))
        # external boundary faces of this cell
        for lf, (fid, s) in enumerate(mesh.cells[cid]):
            if len(inc[fid]) == 1:
                tag = mesh.boundary_tags.get(fid)
                blk.boundary.append((i, lf, fid, tag))
    blk.cell_index_of = {cid: i for i, cid in enumerate(cids)}
    blk.cell_ids = cids
    dm.blocks[(3, 0)] = blk
    return offset + blk.n_dof


def _build_2d_block(dm, md, fm, offset, quad_order):
    space = dm.space(2)
    per_edge = space.n_face_dofs()
    blk = DomainBlock(dim=2, index=fm.index, offset=offset)
    blk.nu = 1.0 / fm.spec.a2
    blk.source = fm.spec.source

    next_u = 0
    # edges in deterministic order: by (cell index, local edge) first use
    edge_order = []
    seen = set()
    for ci, cell in enumerate(fm.cells):
        n = len(cell.vids)
        for k in range(n):
            key = tuple(sorted((cell.vids[k], cell.vids[(k + 1) % n])))
            if key not in seen:
                seen.add(key)
                edge_order.append(key)
    for key in edge_order:
        users = fm.edge_cells[key]
        cls = fm.edge_class.get(key, ("interior",))
        if cls[0] == "trace":
            for ci, k in sorted(users):
                dm.edge_dofs[(fm.index, key, ci)] = np.arange(next_u, next_u + per_edge)
                dm.edge_signs[(fm.index, key, ci)] = 1
                next_u += per_edge
        elif len(users) == 1:
            ci, k = users[0]
            dm.edge_dofs[(fm.index, key, ci)] = np.arange(next_u, next_u + per_edge)
            dm.edge_signs[(fm.index, key, ci)] = 1
            next_u += per_edge
        else:
            ids = np.arange(next_u, next_u + per_edge)
            next_u += per_edge
            a2, b2 = None, None
            for ci, k in users:
                cell = fm.cells[ci]
                ta = cell.coords2d[(k + 1) % len(cell.vids)] - cell.coords2d[k]
                ta = ta / np.linalg.norm(ta)
                canon = 1 if tuple(ta) > tuple(-ta) else -1
                # sign relates the cell's outward normal to the canonical one:
                # outward normal = rot(-90 deg) of the traversal tangent
                dm.edge_dofs[(fm.index, key, ci)] = ids
                dm.edge_signs[(fm.index, key, ci)] = canon
    lay_ii = dim_poly(2, space.grad_order) - 1
    lay_iii = 2 * dim_poly(2, space.order) - (dim_poly(2, space.order + 1) - 1)
    interior_of = {}
    for ci in range(len(fm.cells)):
        interior_of[ci] = np.arange(next_u, next_u + lay_ii + lay_iii)
        next_u += lay_ii + lay_iii
    blk.n_u = next_u
    n_p_cell = dim_poly(2, space.grad_order)
    blk.n_p = n_p_cell * len(fm.cells)

    qo = _local_quad_order(dm.order, quad_order)
    for ci, cell in enumerate(fm.cells):
        geom = cell.geometry
        blk.geoms.append(geom)
        blk.locals_.append(local_matrices(space, geom, nu=blk.nu, quad_order=qo))
        u_ids, u_sgn = [], []
        n = len(cell.vids)
        for k in range(n):
            key = tuple(sorted((cell.vids[k], cell.vids[(k + 1) % n])))
            u_ids.append(dm.edge_dofs[(fm.index, key, ci)]
                         if (fm.index, key, ci) in dm.edge_dofs
                         else dm.edge_dofs[(fm.index, key, _shared_user(fm, key))])
            u_sgn.append(np.full(per_edge,
                                 dm.edge_signs.get((fm.index, key, ci), 1), dtype=float))
        u_ids.append(interior_of[ci])
        u_sgn.append(np.ones(lay_ii + lay_iii))
        blk.cell_u_dofs.append(offset + np.concatenate(u_ids))
        blk.cell_u_signs.append(np.concatenate(u_sgn))
        blk.cell_p_dofs.append(offset + blk.n_u + n_p_cell * ci + np.arange(n_p_cell))
        for k in range(n):
            key = tuple(sorted((cell.vids[k], cell.vids[(k + 1) % n])))
            cls = fm.edge_class.get(key, ("interior",))
            if cls[0] == "external":
                blk.boundary.append((ci, k, key, None))
            elif cls[0] == "tip":
                ids = offset + dm.edge_dofs[(fm.index, key, ci)]
                blk.constrained.extend(int(v) for v in ids)
    dm.blocks[(2, fm.index)] = blk
    return offset + blk.n_dof


def _shared_user(fm, key):
    # shared edges register the same dof ids under every user cell index
    return fm.edge_cells[key][0][0]


def _build_1d_block(dm, md, tm, offset, quad_order):
    space = dm.space(1)
    blk = DomainBlock(dim=1, index=tm.index, offset=offset)
    tdata = md.spec.trace_data(tm.index)
    blk.nu = 1.0 / tdata.a1
    blk.source = tdata.source

    if not dm.trace_flow:
        # multiplier-only block: no 1D flux, one multiplier per pressure dof
        n_p_cell = dim_poly(1, space.grad_order)
        blk.n_u = 0
        blk.n_p = n_p_cell * len(tm.cells)
        for ci, cell in enumerate(tm.cells):
            blk.geoms.append(cell.geometry)
            blk.locals_.append(None)
            blk.cell_u_dofs.append(np.zeros(0, dtype=int))
            blk.cell_u_signs.append(np.zeros(0))
            blk.cell_p_dofs.append(offset + n_p_cell * ci + np.arange(n_p_cell))
        dm.blocks[(1, tm.index)] = blk
        return offset + blk.n_dof

    # duplicated endpoints at trace intersections
    duplicated = {}
    for ip in md.intersections:
        for s in ip.sides:
            if s.trace == tm.index:
                duplicated.setdefault(ip.vid, []).append((s.cell_index, s.endpoint))

    next_u = 0
    for ci, cell in enumerate(tm.cells):
        for endpoint, vid in ((0, cell.vid_a), (1, cell.vid_b)):
            if vid in duplicated and (ci, endpoint) in duplicated[vid]:
                dm.vertex_dofs[(tm.index, vid, ci)] = next_u
                next_u += 1
            elif (tm.index, vid, None) not in dm.vertex_dofs:
                dm.vertex_dofs[(tm.index, vid, None)] = next_u
                next_u += 1
    n_ii = space.grad_order  # interior gradient moments per cell
    interior_of = {}
    for ci in range(len(tm.cells)):
        interior_of[ci] = np.arange(next_u, next_u + n_ii)
        next_u += n_ii
    blk.n_u = next_u
    n_p_cell = dim_poly(1, space.grad_order)
    blk.n_p = n_p_cell * len(tm.cells)

    qo = quad_order
    for ci, cell in enumerate(tm.cells):
        geom = cell.geometry
        blk.geoms.append(geom)
        blk.locals_.append(local_matrices_1d(space, geom, nu=blk.nu, quad_order=qo))
        ids, sgn = [], []
        for endpoint, vid in ((0, cell.vid_a), (1, cell.vid_b)):
            key = (tm.index, vid, ci) if (tm.index, vid, ci) in dm.vertex_dofs \
                else (tm.index, vid, None)
            ids.append(dm.vertex_dofs[key])
            # global convention: flux value along +tangent; outward at the
            # start of a cell is the -tangent direction
            sgn.append(-1.0 if endpoint == 0 else 1.0)
        blk.cell_u_dofs.append(offset + np.concatenate(
            [np.array(ids, dtype=int), interior_of[ci]]))
        blk.cell_u_signs.append(np.concatenate([np.array(sgn), np.ones(n_ii)]))
        blk.cell_p_dofs.append(offset + blk.n_u + n_p_cell * ci + np.arange(n_p_cell))

    # external / tip endpoints (the extreme vertices not at intersections)
    for endpoint_vid, s_param, ci, endpoint in _trace_extremes(tm):
        if (tm.index, endpoint_vid, ci) in dm.vertex_dofs:
            continue  # duplicated: intersection side, no external BC
        kind = tm.endpoint_class.get(endpoint_vid, "tip")
        if kind == "intersection":
            continue
        if kind == "external":
            blk.boundary.append((ci, endpoint, endpoint_vid, None))
        else:
            dof = offset + dm.vertex_dofs[(tm.index, endpoint_vid, None)]
            blk.constrained.append(int(dof))
    dm.blocks[(1, tm.index)] = blk
    return offset + blk.n_dof


def _trace_extremes(tm):
    first, last = tm.cells[0], tm.cells[-1]
    return [(first.vid_a, first.s_a, 0, 0), (last.vid_b, last.s_b, len(tm.cells) - 1, 1)]


# ---------------------------------------------------------------------------
# Matrix assembly
# ---------------------------------------------------------------------------


class _Coo:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, mat):
        r, c = np.meshgrid(rows, cols, indexing="ij")
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(np.asarray(mat, dtype=float).ravel())

    def matrix(self, n):
        if not self.rows:
            return sps.csr_matrix((n, n))
        mat = sps.csr_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(n, n))
        mat.eliminate_zeros()
        return mat


@dataclass
class GlobalSystem:
    matrix: sps.csr_matrix
    rhs: np.ndarray
    dofmap: GlobalDofMap
    md: MixedDimensionalMesh
    bc_applied: bool = False
    constrained: np.ndarray = None

    def export_coo(self, path):
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v:.17e}\n")


def assemble_dimension(dm: GlobalDofMap, dim: int) -> _Coo:
    """K^{dD}: block-diagonal saddle matrices of all domains of one dimension."""
    coo = _Coo()
    for (d, idx), blk in dm.blocks.items():
        if d != dim:
            continue
        for ci in range(len(blk.geoms)):
            loc = blk.locals_[ci]
            if loc is None:
                continue
            u, s, p = blk.cell_u_dofs[ci], blk.cell_u_signs[ci], blk.cell_p_dofs[ci]
            n_u = len(u)
            K = loc.K
            S = np.concatenate([s, np.ones(len(p))])
            Ksc = K * np.outer(S, S)
            dofs = np.concatenate([u, p])
            coo.add(dofs, dofs, Ksc)
    return coo


def assemble_coupling_same_dim(dm: GlobalDofMap, md, dim: int, coo: _Coo,
                               quad_order=None):
    """(1/eta) face/edge/point mass terms on duplicated interface DOFs.

    A finite normal transmissivity penalizes inter-dimensional exchange: the
    term enters the flux rows with a positive (dissipative) sign, so the flux
    block stays positive definite and any nonzero exchange costs a pressure
    drop proportional to 1/eta.  It vanishes identically when inverse_eta = 0.
    """
    qo = _local_quad_order(dm.order, quad_order)
    if dim == 3:
        blk3 = dm.block(3)
        for fm in md.fractures:
            inv_eta = fm.spec.inverse_eta2
            if inv_eta == 0.0:
                continue
            for cell in fm.cells:
                for cid in (cell.cell_plus, cell.cell_minus):
                    ci3 = blk3.cell_index_of[cid]
                    loc = blk3.locals_[ci3]
                    lf = [k for k, (fid, _) in
                          enumerate(md.mesh3d.cells[cid]) if fid == cell.face_id][0]
                    face = blk3.geoms[ci3].faces[lf]
                    fpts, fw = face.quadrature(qo)
                    vals = loc.face_dual_values(lf, face.to_face_coords(fpts))
                    N = vals.T @ (fw[:, None] * vals)
                    ids = blk3.offset + dm.face_dofs[(cell.face_id, cid)]
                    coo.add(ids, ids, inv_eta * N)
    elif dim == 2:
        for tm in md.traces:
            inv_eta = md.spec.trace_data(tm.index).inverse_eta1
            if inv_eta == 0.0:
                continue
            for cell in tm.cells:
                for l, sides in cell.sides.items():
                    blk2 = dm.block(2, l)
                    for side in sides:
                        loc = blk2.locals_[side.cell_index]
                        edge = blk2.geoms[side.cell_index].faces[side.local_edge]
                        epts, ew = edge.quadrature(qo)
                        vals = loc.face_dual_values(side.local_edge,
                                                    edge.to_face_coords(epts))
                        N = vals.T @ (ew[:, None] * vals)
                        key = tuple(sorted((cell.vid_a, cell.vid_b)))
                        ids = blk2.offset + dm.edge_dofs[(l, key, side.cell_index)]
                        coo.add(ids, ids, inv_eta * N)
    elif dim == 1:
        for ip in md.intersections:
            inv_eta = md.spec.intersection_data(ip.index).inverse_eta0
            if inv_eta == 0.0:
                continue
            for s in ip.sides:
                tm = md.traces[s.trace]
                blk1 = dm.block(1, s.trace)
                cell = tm.cells[s.cell_index]
                vid = cell.vid_a if s.endpoint == 0 else cell.vid_b
                key = (s.trace, vid, s.cell_index)
                if key not in dm.vertex_dofs:
                    key = (s.trace, vid, None)
                dof = blk1.offset + dm.vertex_dofs[key]
                coo.add([dof], [dof], [[inv_eta]])


def assemble_coupling_cross_dim(dm: GlobalDofMap, md, dim: int, coo: _Coo,
                                quad_order=None):
    """Pair dim-flux jumps with (dim-1)-pressures: +C and -C^T blocks."""
    qo = _local_quad_order(dm.order + 1, quad_order)
    if dim == 3:
        blk3 = dm.block(3)
        for fm in md.fractures:
            blk2 = dm.block(2, fm.index)
            for ci2, cell in enumerate(fm.cells):
                loc2 = blk2.locals_[ci2]
                p2 = blk2.cell_p_dofs[ci2]
                for cid in (cell.cell_plus, cell.cell_minus):
                    ci3 = blk3.cell_index_of[cid]
                    loc3 = blk3.locals_[ci3]
                    lf = [k for k, (fid, _) in
                          enumerate(md.mesh3d.cells[cid]) if fid == cell.face_id][0]
                    face = blk3.geoms[ci3].faces[lf]
                    fpts, fw = face.quadrature(qo)
                    dual = loc3.face_dual_values(lf, face.to_face_coords(fpts))
                    mu = loc2.basis_p.evaluate(fm.plane.to_2d(fpts))
                    C = dual.T @ (fw[:, None] * mu)       # (per_face, n_p2)
                    u3 = blk3.offset + dm.face_dofs[(cell.face_id, cid)]
                    coo.add(u3, p2, C)
                    coo.add(p2, u3, -C.T)
    elif dim == 2:
        for tm in md.traces:
            blk1 = dm.block(1, tm.index)
            for ci1, cell in enumerate(tm.cells):
                p1 = blk1.cell_p_dofs[ci1]
                mid = 0.5 * (cell.s_a + cell.s_b)
                L = cell.s_b - cell.s_a
                basis_p1 = MonomialBasis(1, dm.space(1).grad_order, np.zeros(1), L)
                key = tuple(sorted((cell.vid_a, cell.vid_b)))
                for l, sides in cell.sides.items():
                    blk2 = dm.block(2, l)
                    fm = md.fractures[l]
                    for side in sides:
                        loc2 = blk2.locals_[side.cell_index]
                        edge = blk2.geoms[side.cell_index].faces[side.local_edge]
                        epts, ew = edge.quadrature(qo)
                        dual = loc2.face_dual_values(side.local_edge,
                                                     edge.to_face_coords(epts))
                        pts3 = fm.plane.to_3d(epts)
                        s_par = (pts3 - tm.p0) @ tm.tangent - mid
                        mu = basis_p1.evaluate(s_par[:, None])
                        C = dual.T @ (ew[:, None] * mu)
                        u2 = blk2.offset + dm.edge_dofs[(l, key, side.cell_index)]
                        coo.add(u2, p1, C)
                        coo.add(p1, u2, -C.T)
    elif dim == 1:
        for ip in md.intersections:
            blk0 = dm.block(0, ip.index)
            p0 = [blk0.offset]
            for s in ip.sides:
                tm = md.traces[s.trace]
                blk1 = dm.block(1, s.trace)
                cell = tm.cells[s.cell_index]
                vid = cell.vid_a if s.endpoint == 0 else cell.vid_b
                key = (s.trace, vid, s.cell_index)
                if key not in dm.vertex_dofs:
                    key = (s.trace, vid, None)
                dof = blk1.offset + dm.vertex_dofs[key]
                # outward flux at the endpoint in global (+tangent) convention
                val = s.outward_tangent
                coo.add([dof], p0, [[val]])
                coo.add(p0, [dof], [[-val]])


def _domain_point_map(md, blk):
    """Map quadrature points of a domain's cells to physical coordinates."""
    if blk.dim == 3:
        return lambda ci, pts: pts
    if blk.dim == 2:
        plane = md.fractures[blk.index].plane
        return lambda ci, pts: plane.to_3d(pts)
    if blk.dim == 1:
        tm = md.traces[blk.index]

        def to_phys(ci, pts):
            cell = tm.cells[ci]
            mid3 = 0.5 * (np.asarray(md.mesh3d.verts[cell.vid_a]) +
                          np.asarray(md.mesh3d.verts[cell.vid_b]))
            return mid3[None, :] + pts[:, :1] * tm.tangent[None, :]
        return to_phys
    return None


def assemble_rhs(dm: GlobalDofMap, md) -> np.ndarray:
    """Source moments on the pressure rows (physical convention)."""
    rhs = np.zeros(dm.total)
    qo = 2 * (dm.order + 2)
    for (d, idx), blk in dm.blocks.items():
        if d == 0:
            src = blk.source
            rhs[blk.offset] = src if not callable(src) else src(md.intersections[idx].coords)
            continue
        src = blk.source
        if not callable(src) and float(src) == 0.0:
            continue
        to_phys = _domain_point_map(md, blk)
        for ci, geom in enumerate(blk.geoms):
            loc = blk.locals_[ci]
            basis = loc.basis_p if loc is not None else None
            if basis is None:
                continue
            pts, w = geom.quadrature(qo)
            phys = to_phys(ci, pts)
            f = np.asarray([src(x) for x in phys]) if callable(src) \
                else np.full(len(w), float(src))
            rhs[blk.cell_p_dofs[ci]] += basis.evaluate(pts).T @ (w * f)
    return rhs


def assemble_complete(md: MixedDimensionalMesh, order: int, family3d="RT",
                      trace_flow=True, quad_order=None) -> GlobalSystem:
    """Assemble the full block system (boundary conditions NOT yet applied)."""
    dm = build_dof_map(md, order, family3d=family3d, trace_flow=trace_flow,
                       quad_order=quad_order)
    coo = _Coo()
    for d in (3, 2, 1):
        part = assemble_dimension(dm, d)
        coo.rows += part.rows
        coo.cols += part.cols
        coo.vals += part.vals
        assemble_coupling_same_dim(dm, md, d, coo)
    assemble_coupling_cross_dim(dm, md, 3, coo)
    assemble_coupling_cross_dim(dm, md, 2, coo)
    if trace_flow:
        assemble_coupling_cross_dim(dm, md, 1, coo)
    rhs = assemble_rhs(dm, md)
    return GlobalSystem(matrix=coo.matrix(dm.total), rhs=rhs, dofmap=dm, md=md)


# ---------------------------------------------------------------------------
# Boundary conditions
# ---------------------------------------------------------------------------


def apply_boundary_conditions(system: GlobalSystem) -> GlobalSystem:
    """Dirichlet data into the flux RHS; homogeneous Neumann DOFs eliminated."""
    dm, md = system.dofmap, system.md
    rhs = system.rhs
    qo = 2 * (dm.order + 2)
    constrained = []
    mesh = md.mesh3d

    blk3 = dm.block(3)
    for ci, lf, fid, tag in blk3.boundary:
        bc = md.spec.bc3.get(tag)
        if bc is None:
            raise ConfigError(f"external face {fid} has boundary tag {tag!r} "
                              f"with no boundary condition")
        ids = blk3.cell_u_dofs[ci][_face_dof_slice(blk3, ci, lf, dm)]
        sgn = blk3.cell_u_signs[ci][_face_dof_slice(blk3, ci, lf, dm)]
        if bc.kind == "neumann":
            constrained.extend(int(i) for i in ids)
            continue
        loc = blk3.locals_[ci]
        face = blk3.geoms[ci].faces[lf]
        fpts, fw = face.quadrature(qo)
        dual = loc.face_dual_values(lf, face.to_face_coords(fpts))
        g = np.asarray([bc.datum(x) for x in fpts])
        r_loc = -dual.T @ (fw * g)
        rhs[ids] += sgn * r_loc

    for fm in md.fractures:
        blk2 = dm.block(2, fm.index)
        bc = fm.spec.bc
        for ci, k, key, _ in blk2.boundary:
            ids_local = dm.edge_dofs[(fm.index, key, ci)]
            ids = blk2.offset + ids_local
            if bc.kind == "neumann":
                constrained.extend(int(i) for i in ids)
                continue
            loc = blk2.locals_[ci]
            edge = blk2.geoms[ci].faces[k]
            epts, ew = edge.quadrature(qo)
            dual = loc.face_dual_values(k, edge.to_face_coords(epts))
            phys = fm.plane.to_3d(epts)
            g = np.asarray([bc.datum(x) for x in phys])
            rhs[ids] += -dual.T @ (ew * g)

    for tm in md.traces:
        if not dm.trace_flow:
            break
        blk1 = dm.block(1, tm.index)
        bc = md.spec.trace_data(tm.index).bc
        for ci, endpoint, vid, _ in blk1.boundary:
            key = (tm.index, vid, None)
            dof = blk1.offset + dm.vertex_dofs[key]
            sgn = -1.0 if endpoint == 0 else 1.0
            if bc.kind == "neumann":
                constrained.append(int(dof))
                continue
            g = bc.datum(mesh.verts[vid])
            # local outward-flux dof r = -g; scatter with the sign map
            rhs[dof] += sgn * (-g)

    constrained.extend(int(i) for blk in dm.blocks.values() for i in blk.constrained)

    A = system.matrix.tolil()
    # 0D Dirichlet: substitute the data and keep unit rows
    if dm.trace_flow:
        pinned = []
        for ip in md.intersections:
            idata = md.spec.intersection_data(ip.index)
            if idata.bc is None or idata.bc.kind != "dirichlet":
                continue
            pinned.append((dm.block(0, ip.index).offset, idata.bc.datum(ip.coords)))
        if pinned:
            dofs = [d for d, _ in pinned]
            vals = np.array([v for _, v in pinned])
            rhs -= system.matrix[:, dofs] @ vals
            for dof, val in pinned:
                A[dof, :] = 0.0
                A[:, dof] = 0.0
                A[dof, dof] = 1.0
                rhs[dof] = val

    cset = np.array(sorted(set(constrained)), dtype=int)
    for dof in cset:
        A[dof, :] = 0.0
        A[:, dof] = 0.0
        A[dof, dof] = 1.0
        rhs[dof] = 0.0

    system.matrix = A.tocsr()
    system.rhs = rhs
    system.bc_applied = True
    system.constrained = cset
    return system


def _face_dof_slice(blk, ci, lf, dm):
    per = dm.space(blk.dim).n_face_dofs()
    return slice(lf * per, (lf + 1) * per)

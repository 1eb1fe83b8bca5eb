"""Geometry kernel for arbitrary polygons and polyhedra.

Polytopes may be non-convex and may carry collinear (hanging) vertices or
co-planar (hanging) faces.  Measures and centroids are computed from signed
simplicial decompositions and are therefore exact for any simple polygon /
closed polyhedron; quadrature rules are built from positively oriented
triangulations only, so weights are guaranteed positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateGeometryError

# Relative coplanarity/degeneracy tolerance: eps = EPS_GEO_FACTOR * (scale).
EPS_GEO_FACTOR = 1e-9


def geo_eps(scale: float) -> float:
    """Absolute tolerance for a geometric feature of the given size."""
    return EPS_GEO_FACTOR * max(scale, 1.0)


# ---------------------------------------------------------------------------
# 1D Gauss rules and simplex rules with positive weights
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _gauss01(n: int):
    """n-point Gauss-Legendre rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def segment_quadrature(a, b, order: int):
    """Rule exact for polynomials of degree <= order on the segment a-b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x, w = _gauss01(max(1, (order + 2) // 2))
    pts = a[None, :] + np.outer(x, b - a)
    return pts, w * np.linalg.norm(b - a)


@lru_cache(maxsize=None)
def _triangle_ref_rule(order: int):
    """Duffy rule on the reference triangle, exact for total degree <= order.

    Returns barycentric coordinates (n, 3) and weights summing to 1.
    """
    na = (order + 3) // 2
    nb = (order + 2) // 2
    xa, wa = _gauss01(max(1, na))
    xb, wb = _gauss01(max(1, nb))
    A, B = np.meshgrid(xa, xb, indexing="ij")
    WA, WB = np.meshgrid(wa, wb, indexing="ij")
    l1 = (A * (1.0 - B)).ravel()
    l2 = (A * B).ravel()
    l0 = 1.0 - l1 - l2
    # Jacobian of (a,b) -> (l1,l2) is a; factor 2 normalizes to unit area.
    w = (2.0 * A * WA * WB).ravel()
    return np.column_stack([l0, l1, l2]), w


@lru_cache(maxsize=None)
def _tet_ref_rule(order: int):
    """Duffy rule on the reference tetrahedron (barycentric, weights sum 1)."""
    na = (order + 4) // 2
    nb = (order + 3) // 2
    nc = (order + 2) // 2
    xa, wa = _gauss01(max(1, na))
    xb, wb = _gauss01(max(1, nb))
    xc, wc = _gauss01(max(1, nc))
    A, B, C = np.meshgrid(xa, xb, xc, indexing="ij")
    WA, WB, WC = np.meshgrid(wa, wb, wc, indexing="ij")
    l1 = (A * (1.0 - B)).ravel()
    l2 = (A * B * (1.0 - C)).ravel()
    l3 = (A * B * C).ravel()
    l0 = 1.0 - l1 - l2 - l3
    w = (6.0 * (A * A * B) * WA * WB * WC).ravel()
    return np.column_stack([l0, l1, l2, l3]), w


def triangle_quadrature(verts, order: int):
    """Quadrature on a triangle given by a (3, dim) vertex array."""
    verts = np.asarray(verts, dtype=float)
    bary, w = _triangle_ref_rule(order)
    pts = bary @ verts
    if verts.shape[1] == 2:
        u, v = verts[1] - verts[0], verts[2] - verts[0]
        area = 0.5 * abs(u[0] * v[1] - u[1] * v[0])
    else:
        area = 0.5 * np.linalg.norm(np.cross(verts[1] - verts[0], verts[2] - verts[0]))
    return pts, w * area


def tet_quadrature(verts, order: int):
    """Quadrature on a tetrahedron given by a (4, 3) vertex array."""
    verts = np.asarray(verts, dtype=float)
    bary, w = _tet_ref_rule(order)
    pts = bary @ verts
    vol = np.dot(np.cross(verts[1] - verts[0], verts[2] - verts[0]), verts[3] - verts[0]) / 6.0
    return pts, w * abs(vol)


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------


def polygon_area_centroid_2d(coords):
    """Signed area and centroid of a simple 2D polygon (shoelace)."""
    coords = np.asarray(coords, dtype=float)
    x, y = coords[:, 0], coords[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-300:
        return 0.0, coords.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy])


def _is_star_shaped_fan(coords, center):
    """True if fanning from center gives only positively oriented triangles."""
    n = len(coords)
    for i in range(n):
        a = coords[i] - center
        b = coords[(i + 1) % n] - center
        if a[0] * b[1] - a[1] * b[0] <= 0.0:
            return False
    return True


def triangulate_polygon_2d(coords, eps=1e-12):
    """Triangulate a simple CCW polygon into positively oriented triangles.

    Uses a centroid fan when the polygon is star-shaped with respect to its
    centroid, ear clipping otherwise.  Returns a list of (3, 2) arrays.
    Collinear (hanging) vertices are tolerated.
    """
    coords = np.asarray(coords, dtype=float)
    area, centroid = polygon_area_centroid_2d(coords)
    if area < 0:
        raise ValueError("polygon must be counter-clockwise")
    scale = max(np.ptp(coords[:, 0]), np.ptp(coords[:, 1]))
    if area <= (geo_eps(scale)) * scale:
        raise DegenerateGeometryError("polygon area is zero within tolerance")
    n = len(coords)
    if _is_star_shaped_fan(coords, centroid):
        tris = []
        for i in range(n):
            tri = np.array([centroid, coords[i], coords[(i + 1) % n]])
            a = tri[1] - tri[0]
            b = tri[2] - tri[0]
            if a[0] * b[1] - a[1] * b[0] > eps * scale * scale:
                tris.append(tri)
        return tris
    return _ear_clip(coords, scale)


def _ear_clip(coords, scale):
    verts = list(range(len(coords)))
    tris = []
    tol = 1e-12 * scale * scale
    guard = 0
    while len(verts) > 3:
        guard += 1
        if guard > 10 * len(coords) ** 2:
            raise DegenerateGeometryError("ear clipping failed; polygon not simple?")
        clipped = False
        m = len(verts)
        for j in range(m):
            i0, i1, i2 = verts[j - 1], verts[j], verts[(j + 1) % m]
            a, b, c = coords[i0], coords[i1], coords[i2]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross <= tol:
                continue
            # no other active vertex strictly inside the candidate ear
            ok = True
            for k in verts:
                if k in (i0, i1, i2):
                    continue
                if _point_in_triangle(coords[k], a, b, c, tol):
                    ok = False
                    break
            if ok:
                tris.append(np.array([a, b, c]))
                verts.pop(j)
                clipped = True
                break
        if not clipped:
            # only degenerate ears remain: drop a collinear vertex
            dropped = False
            for j in range(len(verts)):
                i0, i1, i2 = verts[j - 1], verts[j], verts[(j + 1) % len(verts)]
                a, b, c = coords[i0], coords[i1], coords[i2]
                cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
                if abs(cross) <= tol:
                    verts.pop(j)
                    dropped = True
                    break
            if not dropped:
                raise DegenerateGeometryError("ear clipping failed to make progress")
    a, b, c = (coords[i] for i in verts)
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if cross > tol:
        tris.append(np.array([a, b, c]))
    return tris


def _point_in_triangle(p, a, b, c, tol):
    d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    d2 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
    d3 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
    return d1 > tol and d2 > tol and d3 > tol


def polygon_quadrature_2d(coords, order: int):
    """Quadrature over a simple CCW polygon, exact for degree <= order."""
    tris = triangulate_polygon_2d(np.asarray(coords, dtype=float))
    pts, wts = [], []
    for tri in tris:
        p, w = triangle_quadrature(tri, order)
        pts.append(p)
        wts.append(w)
    return np.vstack(pts), np.concatenate(wts)


def plane_frame(normal):
    """Deterministic orthonormal in-plane axes (t1, t2) with t1 x t2 = n."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(n @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    t1 = np.cross(ref, n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2


@dataclass(frozen=True)
class Plane:
    """Oriented plane n . x = offset with an attached 2D frame."""

    normal: np.ndarray
    offset: float
    origin: np.ndarray
    t1: np.ndarray
    t2: np.ndarray

    @classmethod
    def from_normal_point(cls, normal, point):
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        point = np.asarray(point, dtype=float)
        t1, t2 = plane_frame(n)
        return cls(n, float(n @ point), point, t1, t2)

    def signed_distance(self, points):
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def to_2d(self, points):
        rel = np.asarray(points, dtype=float) - self.origin
        return np.column_stack([rel @ self.t1, rel @ self.t2])

    def to_3d(self, coords2d):
        coords2d = np.atleast_2d(np.asarray(coords2d, dtype=float))
        return self.origin + np.outer(coords2d[:, 0], self.t1) + np.outer(coords2d[:, 1], self.t2)


def fit_plane(coords, eps=None):
    """Best plane through a vertex loop (Newell normal); checks planarity.

    The normal follows the loop orientation (right-hand rule).
    """
    coords = np.asarray(coords, dtype=float)
    nxt = np.roll(coords, -1, axis=0)
    normal = np.array([
        np.sum((coords[:, 1] - nxt[:, 1]) * (coords[:, 2] + nxt[:, 2])),
        np.sum((coords[:, 2] - nxt[:, 2]) * (coords[:, 0] + nxt[:, 0])),
        np.sum((coords[:, 0] - nxt[:, 0]) * (coords[:, 1] + nxt[:, 1])),
    ])
    nrm = np.linalg.norm(normal)
    scale = max(np.ptp(coords, axis=0).max(), 1e-300)
    if nrm <= geo_eps(scale) * scale:
        raise DegenerateGeometryError("degenerate vertex loop (zero area)")
    plane = Plane.from_normal_point(normal / nrm, coords.mean(axis=0))
    if eps is None:
        eps = geo_eps(scale)
    dist = plane.signed_distance(coords)
    if np.max(np.abs(dist)) > eps:
        raise DegenerateGeometryError(
            f"vertex loop non-planar: max deviation {np.max(np.abs(dist)):.3e} > {eps:.3e}")
    return plane


# ---------------------------------------------------------------------------
# Element geometry views used by the local VEM machinery
# ---------------------------------------------------------------------------


def _diameter(coords):
    coords = np.asarray(coords, dtype=float)
    d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    return float(np.sqrt(d2.max()))


@dataclass
class SegmentGeometry:
    """1D element: a straight segment parameterized by arc length."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if np.linalg.norm(self.b - self.a) <= geo_eps(1.0):
            raise DegenerateGeometryError("zero-length segment")

    @property
    def dim(self):
        return 1

    @property
    def measure(self):
        return float(np.linalg.norm(self.b - self.a))

    @property
    def centroid(self):
        return 0.5 * (self.a + self.b)

    @property
    def diameter(self):
        return self.measure

    @property
    def tangent(self):
        t = self.b - self.a
        return t / np.linalg.norm(t)

    def quadrature(self, order):
        # returned points are 1D arc-length coordinates centered at the midpoint
        x, w = _gauss01(max(1, (order + 2) // 2))
        L = self.measure
        return ((x - 0.5) * L)[:, None], w * L


class PolygonGeometry:
    """2D element living in its own planar frame.

    ``coords`` are the 2D in-frame vertex coordinates (CCW).  The element's
    "faces" are its edges; each edge carries the outward in-plane normal and a
    1D frame (signed arc length from the edge midpoint) for edge monomials.
    """

    def __init__(self, coords2d):
        self.coords = np.asarray(coords2d, dtype=float)
        area, centroid = polygon_area_centroid_2d(self.coords)
        scale = _diameter(self.coords)
        if area <= geo_eps(scale) * scale:
            raise DegenerateGeometryError("polygon area not positive")
        self.measure = float(area)
        self.centroid = centroid
        self.diameter = scale
        self._faces = None

    dim = 2

    @property
    def n_faces(self):
        return len(self.coords)

    @property
    def faces(self):
        if self._faces is None:
            self._faces = [self._edge_view(i) for i in range(len(self.coords))]
        return self._faces

    def _edge_view(self, i):
        a = self.coords[i]
        b = self.coords[(i + 1) % len(self.coords)]
        t = b - a
        L = np.linalg.norm(t)
        if L <= geo_eps(self.diameter):
            raise DegenerateGeometryError("zero-length polygon edge")
        t = t / L
        normal = np.array([t[1], -t[0]])  # outward for a CCW loop
        return _EdgeView(a=a, b=b, normal=normal, tangent=t)

    def quadrature(self, order):
        return polygon_quadrature_2d(self.coords, order)


@dataclass
class _EdgeView:
    """Edge of a PolygonGeometry, acting as a (d-1)-face.

    Edge monomials use the lexicographically positive tangent so neighbouring
    cells agree on the edge coordinate.
    """

    a: np.ndarray
    b: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        self.frame_tangent = _lex_positive(self.tangent.copy())

    @property
    def measure(self):
        return float(np.linalg.norm(self.b - self.a))

    @property
    def centroid(self):
        return 0.5 * (self.a + self.b)

    @property
    def diameter(self):
        return self.measure

    def quadrature(self, order):
        x, w = _gauss01(max(1, (order + 2) // 2))
        pts = self.a[None, :] + np.outer(x, self.b - self.a)
        return pts, w * self.measure

    def to_face_coords(self, points):
        rel = np.atleast_2d(points) - self.centroid
        return (rel @ self.frame_tangent)[:, None]


def _lex_positive(n):
    for c in n:
        if c > 0:
            return n
        if c < 0:
            return -n
    return n


class _FaceView:
    """Planar face of a PolyhedronGeometry with outward normal and 2D frame.

    The 2D frame (used for face monomials) is anchored at the face centroid
    and built from the lexicographically positive normal, so the two cells
    sharing a face see identical face coordinates.
    """

    def __init__(self, coords3d, outward_normal):
        self.coords = np.asarray(coords3d, dtype=float)
        raw = fit_plane(self.coords)
        n_out = raw.normal if raw.normal @ outward_normal > 0 else -raw.normal
        area, c2 = polygon_area_centroid_2d(raw.to_2d(self.coords))
        centroid3d = raw.to_3d(c2)[0]
        self.plane = Plane.from_normal_point(_lex_positive(n_out), centroid3d)
        self.normal = n_out
        coords2d = self.plane.to_2d(self.coords)
        if polygon_area_centroid_2d(coords2d)[0] < 0:
            coords2d = coords2d[::-1]
        self.coords2d = coords2d
        self.measure = abs(area)
        self.centroid = centroid3d
        self.diameter = _diameter(self.coords)

    def quadrature(self, order):
        pts2d, w = polygon_quadrature_2d(self.coords2d, order)
        return self.plane.to_3d(pts2d), w

    def to_face_coords(self, points3d):
        return self.plane.to_2d(points3d)


class PolyhedronGeometry:
    """3D element defined by oriented planar faces.

    ``face_loops`` is a list of (n_i, 3) vertex arrays, each ordered so the
    right-hand rule gives the OUTWARD normal.  The boundary must be closed.
    """

    def __init__(self, face_loops):
        self.face_loops = [np.asarray(f, dtype=float) for f in face_loops]
        vol, centroid = self._volume_centroid()
        allv = np.vstack(self.face_loops)
        scale = _diameter(allv)
        if vol <= geo_eps(scale) * scale ** 2:
            raise DegenerateGeometryError("polyhedron volume not positive")
        self.measure = float(vol)
        self.centroid = centroid
        self.diameter = scale
        self._faces = None

    dim = 3

    @property
    def n_faces(self):
        return len(self.face_loops)

    @property
    def faces(self):
        if self._faces is None:
            self._faces = []
            for loop in self.face_loops:
                plane = fit_plane(loop)
                self._faces.append(_FaceView(loop, plane.normal))
        return self._faces

    def _signed_tets(self, apex):
        """Signed tetrahedra (apex, face fan triangles); exact for volume."""
        tets = []
        for loop in self.face_loops:
            base = loop.mean(axis=0)
            n = len(loop)
            for i in range(n):
                tets.append((apex, base, loop[i], loop[(i + 1) % n]))
        return tets

    def _volume_centroid(self):
        apex = np.vstack(self.face_loops).mean(axis=0)
        vol = 0.0
        mom = np.zeros(3)
        for a, b, c, d in self._signed_tets(apex):
            v = np.dot(np.cross(b - a, c - a), d - a) / 6.0
            vol += v
            mom += v * (a + b + c + d) / 4.0
        if abs(vol) < 1e-300:
            return 0.0, apex
        return abs(vol), mom / vol

    def quadrature(self, order):
        """Positive-weight rule from a centroid cone over face triangles.

        Requires the element to be star-shaped with respect to its centroid
        (always true for the convex cells produced by plane cutting).
        """
        apex = self.centroid
        pts, wts = [], []
        tol = geo_eps(self.diameter) * self.diameter ** 2
        for face in self.faces:
            # face 2D loops are CCW in the canonical frame; flip the cone sign
            # when the canonical normal opposes the outward one
            orient = 1.0 if face.plane.normal @ face.normal > 0 else -1.0
            tris2d = triangulate_polygon_2d(face.coords2d)
            for tri2d in tris2d:
                tri3d = face.plane.to_3d(tri2d)
                v = np.dot(np.cross(tri3d[1] - tri3d[0], tri3d[2] - tri3d[0]),
                           apex - tri3d[0]) / 6.0
                v = -v * orient
                if v < -tol:
                    raise DegenerateGeometryError(
                        "cell not star-shaped w.r.t. centroid; cannot build a "
                        "positive quadrature rule")
                if v <= tol:
                    continue
                p, w = tet_quadrature(np.vstack([tri3d, apex[None, :]]), order)
                pts.append(p)
                wts.append(w)
        return np.vstack(pts), np.concatenate(wts)


# ---------------------------------------------------------------------------
# Spec-level convenience operations
# ---------------------------------------------------------------------------


def measure(polytope):
    """Length / area / volume of a geometry view."""
    return polytope.measure


def centroid_diameter(polytope):
    return np.asarray(polytope.centroid), polytope.diameter


def quadrature(polytope, exactness_order: int):
    """Rule integrating all monomials of total degree <= exactness_order."""
    if exactness_order < 0:
        raise ValueError("exactness_order must be >= 0")
    return polytope.quadrature(exactness_order)


def face_frame(polyhedron: PolyhedronGeometry, face_index: int):
    """Outward unit normal and in-plane frame of one face of a polyhedron."""
    face = polyhedron.faces[face_index]
    return face.normal, (face.plane.t1, face.plane.t2)

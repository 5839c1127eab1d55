"""Triangulations of smooth planar domains and their boundary geometry.

Boundary loops are stored with the domain on the left, so the outer loop runs
counterclockwise and holes run clockwise.  With that orientation the outward
normal of a loop with unit tangent ``T`` is ``(T_y, -T_x)`` and the signed
curvature is positive where the domain is locally convex.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from matplotlib.path import Path as MplPath
from scipy.integrate import cumulative_trapezoid
from scipy.spatial import Delaunay, cKDTree

__all__ = [
    "Mesh",
    "MeshError",
    "DomainSpec",
    "BoundaryPiece",
    "generate",
    "load_mesh",
    "save_mesh",
    "boundary_quadrature",
    "polyline_geometry",
]


class MeshError(ValueError):
    """Invalid mesh geometry, connectivity or file contents."""


@dataclass(eq=False)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_loops: list
    # per-boundary-node data, aligned with ``boundary_nodes``
    boundary_normal: np.ndarray
    boundary_curvature: np.ndarray
    boundary_arclength: np.ndarray
    h: float = float("nan")
    name: str = ""

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_loops = [np.asarray(l, dtype=np.int64) for l in self.boundary_loops]
        self.boundary_normal = np.asarray(self.boundary_normal, dtype=float)
        self.boundary_curvature = np.asarray(self.boundary_curvature, dtype=float)
        self.boundary_arclength = np.asarray(self.boundary_arclength, dtype=float)
        for arr in (self.nodes, self.triangles, self.boundary_normal,
                    self.boundary_curvature, self.boundary_arclength):
            arr.flags.writeable = False
        for loop in self.boundary_loops:
            loop.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.concatenate(self.boundary_loops)

    @cached_property
    def boundary_position(self) -> np.ndarray:
        """Map node index -> position in ``boundary_nodes`` (-1 for interior)."""
        pos = np.full(self.n_nodes, -1, dtype=np.int64)
        pos[self.boundary_nodes] = np.arange(self.boundary_nodes.size)
        return pos

    @cached_property
    def is_boundary(self) -> np.ndarray:
        return self.boundary_position >= 0

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """``(E, 2)`` node pairs following the loops."""
        return np.concatenate(
            [np.column_stack([l, np.roll(l, -1)]) for l in self.boundary_loops]
        )

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def area(self) -> float:
        return float(self.signed_areas.sum())

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """``(T, 3, 2)`` gradients of the three P1 hat functions per triangle."""
        p = self.nodes[self.triangles]
        # grad phi_i = rot90(p_{i+2} - p_{i+1}) / (2 area)
        e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        g = np.stack([-e[..., 1], e[..., 0]], axis=-1)
        return g / (2.0 * self.signed_areas)[:, None, None]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def perimeter(self) -> float:
        e = self.boundary_edges
        return float(np.linalg.norm(self.nodes[e[:, 1]] - self.nodes[e[:, 0]], axis=1).sum())

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return np.stack(
            [np.linalg.norm(p[:, (i + 1) % 3] - p[:, i], axis=1) for i in range(3)], axis=1
        )

    @cached_property
    def adjacency(self):
        """Node-to-node adjacency as a CSR boolean matrix (no self loops)."""
        import scipy.sparse as sp

        t = self.triangles
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2], t[:, 1], t[:, 2], t[:, 0]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0], t[:, 0], t[:, 1], t[:, 2]])
        A = sp.coo_matrix(
            (np.ones(rows.size, dtype=bool), (rows, cols)), shape=(self.n_nodes,) * 2
        ).tocsr()
        A.sum_duplicates()
        return A

    @property
    def is_convex(self) -> bool:
        return len(self.boundary_loops) == 1 and bool(np.all(self.boundary_curvature >= 0))

    @property
    def strictly_convex(self) -> bool:
        return len(self.boundary_loops) == 1 and bool(np.all(self.boundary_curvature > 0))

    def boundary_polygons(self) -> list:
        return [self.nodes[l] for l in self.boundary_loops]

    def contains(self, points) -> np.ndarray:
        """Even-odd point-in-domain test against the boundary polylines."""
        points = np.atleast_2d(points)
        inside = np.zeros(len(points), dtype=bool)
        for poly in self.boundary_polygons():
            inside ^= MplPath(poly).contains_points(points)
        return inside

    def validate(self) -> "Mesh":
        _validate(self)
        return self

    def permuted(self, perm) -> "Mesh":
        """Same mesh with node ``i`` moved to position ``perm[i]``."""
        perm = np.asarray(perm)
        nodes = np.empty_like(self.nodes)
        nodes[perm] = self.nodes
        return Mesh(
            nodes=nodes,
            triangles=perm[self.triangles],
            boundary_loops=[perm[l] for l in self.boundary_loops],
            boundary_normal=self.boundary_normal,
            boundary_curvature=self.boundary_curvature,
            boundary_arclength=self.boundary_arclength,
            h=self.h,
            name=self.name,
        )

    def transformed(self, rotation: float = 0.0, shift=(0.0, 0.0)) -> "Mesh":
        """Rigidly moved copy (rotation angle in radians, then translation)."""
        c, s = math.cos(rotation), math.sin(rotation)
        R = np.array([[c, -s], [s, c]])
        return Mesh(
            nodes=self.nodes @ R.T + np.asarray(shift),
            triangles=self.triangles,
            boundary_loops=self.boundary_loops,
            boundary_normal=self.boundary_normal @ R.T,
            boundary_curvature=self.boundary_curvature,
            boundary_arclength=self.boundary_arclength,
            h=self.h,
            name=self.name,
        )


def _validate(mesh: Mesh) -> None:
    n = mesh.n_nodes
    t = mesh.triangles
    if t.ndim != 2 or t.shape[1] != 3:
        raise MeshError("triangles must be an (T, 3) index array")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise MeshError("triangle references a node index out of range")
    bad = np.flatnonzero(mesh.signed_areas <= 0)
    if bad.size:
        raise MeshError(
            f"triangle {int(bad[0])} has nonpositive signed area "
            f"({mesh.signed_areas[bad[0]]:.3e}); {bad.size} inverted triangle(s)"
        )
    # directed edges: every interior edge appears once in each direction
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    keys = directed[:, 0] * n + directed[:, 1]
    uniq, counts = np.unique(keys, return_counts=True)
    if np.any(counts > 1):
        k = uniq[counts > 1][0]
        raise MeshError(f"non-manifold or duplicated edge ({k // n}, {k % n})")
    rev = directed[:, 1] * n + directed[:, 0]
    boundary_directed = set(keys[~np.isin(keys, rev)].tolist())
    loop_edges = set()
    for li, loop in enumerate(mesh.boundary_loops):
        if loop.size < 3:
            raise MeshError(f"boundary loop {li} is not closed (fewer than 3 nodes)")
        if np.unique(loop).size != loop.size:
            raise MeshError(f"boundary loop {li} is not simple")
        for a, b in zip(loop, np.roll(loop, -1)):
            key = int(a) * n + int(b)
            if key not in boundary_directed:
                raise MeshError(
                    f"boundary loop {li}: ({a}, {b}) is not a boundary edge with the "
                    "domain on its left"
                )
            loop_edges.add(key)
    if loop_edges != boundary_directed:
        raise MeshError(
            f"{len(boundary_directed - loop_edges)} boundary edge(s) are not covered by "
            "the boundary loops"
        )
    nb = sum(l.size for l in mesh.boundary_loops)
    for name in ("boundary_normal", "boundary_curvature", "boundary_arclength"):
        if len(getattr(mesh, name)) != nb:
            raise MeshError(f"{name} has wrong length")
    norms = np.linalg.norm(mesh.boundary_normal, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise MeshError("boundary normals are not unit vectors")


# -- boundary curves -----------------------------------------------------------


@dataclass
class BoundaryPiece:
    """A C^2 curve segment ``tau in [0, 1] -> R^2``.

    ``fn(tau)`` returns ``(x, dx/dtau, d2x/dtau2)``, each of shape ``(n, 2)``.
    """

    fn: Callable
    min_segments: int = 1

    def __call__(self, tau):
        return self.fn(np.atleast_1d(np.asarray(tau, dtype=float)))

    def transformed(self, M, reverse: bool = False) -> "BoundaryPiece":
        M = np.asarray(M, dtype=float)
        fn = self.fn

        def g(tau):
            tt = 1.0 - tau if reverse else tau
            x, d1, d2 = fn(tt)
            if reverse:
                d1 = -d1
            return x @ M.T, d1 @ M.T, d2 @ M.T

        return BoundaryPiece(g, self.min_segments)


def line_piece(p0, p1) -> BoundaryPiece:
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)

    def fn(tau):
        x = p0 + tau[:, None] * (p1 - p0)
        return x, np.broadcast_to(p1 - p0, x.shape).copy(), np.zeros_like(x)

    return BoundaryPiece(fn)


def arc_piece(center, radius, th0, th1, min_segments: int = 1) -> BoundaryPiece:
    c = np.asarray(center, dtype=float)
    dth = th1 - th0

    def fn(tau):
        th = th0 + dth * tau
        u = np.column_stack([np.cos(th), np.sin(th)])
        du = np.column_stack([-np.sin(th), np.cos(th)])
        return c + radius * u, radius * dth * du, -radius * dth * dth * u

    return BoundaryPiece(fn, min_segments)


def ellipse_piece(ax, ay) -> BoundaryPiece:
    def fn(tau):
        th = 2 * np.pi * tau
        w = 2 * np.pi
        x = np.column_stack([ax * np.cos(th), ay * np.sin(th)])
        d1 = w * np.column_stack([-ax * np.sin(th), ay * np.cos(th)])
        return x, d1, -w * w * x

    return BoundaryPiece(fn, 8)


def graph_piece(coef, x0, x1) -> BoundaryPiece:
    """Curve ``(x, q(x))`` for ``x`` from ``x0`` to ``x1``, q a polynomial."""
    q = np.polynomial.Polynomial(coef)
    dq, ddq = q.deriv(1), q.deriv(2)
    L = x1 - x0

    def fn(tau):
        x = x0 + L * tau
        pos = np.column_stack([x, q(x)])
        d1 = np.column_stack([np.full_like(x, L), L * dq(x)])
        d2 = np.column_stack([np.zeros_like(x), L * L * ddq(x)])
        return pos, d1, d2

    return BoundaryPiece(fn, 4)


def _sample_piece(piece: BoundaryPiece, h: float, n_dense: int = 4001):
    """Parameters of nodes spaced ~h in arc length (endpoint excluded)."""
    tau = np.linspace(0.0, 1.0, n_dense)
    _, d1, _ = piece(tau)
    speed = np.linalg.norm(d1, axis=1)
    s = cumulative_trapezoid(speed, tau, initial=0.0)
    length = s[-1]
    n = max(piece.min_segments, int(math.ceil(length / h - 1e-9)))
    targets = np.arange(n) * length / n
    return np.interp(targets, s, tau), length


def _geometry_from_derivs(d1, d2):
    speed = np.linalg.norm(d1, axis=1)
    T = d1 / speed[:, None]
    normal = np.column_stack([T[:, 1], -T[:, 0]])
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed**3
    return normal, kappa


def _junction_curvature(pieces, params, points, kappa):
    """Curvature at piece joints as the length-weighted mean of the one-sided values.

    Lines meeting arcs are only C^{1,1}; weighting each one-sided curvature by
    the adjacent edge length keeps the lumped turning angle exact.
    """
    kappa = kappa.copy()
    m = len(params)
    for j, (k, tau) in enumerate(params):
        if tau == 0.0:
            prev = pieces[(k - 1) % len(pieces)]
            _, d1, d2 = prev(1.0)
            _, k_prev = _geometry_from_derivs(d1, d2)
            l_prev = np.linalg.norm(points[j] - points[(j - 1) % m])
            l_next = np.linalg.norm(points[(j + 1) % m] - points[j])
            kappa[j] = (l_prev * k_prev[0] + l_next * kappa[j]) / (l_prev + l_next)
    return kappa


def sample_loop(pieces, h: float):
    """Sample a closed chain of pieces.  Returns points, normals, curvature, tau."""
    pts, nrm, kap, params = [], [], [], []
    for k, piece in enumerate(pieces):
        tau, _ = _sample_piece(piece, h)
        x, d1, d2 = piece(tau)
        n_, k_ = _geometry_from_derivs(d1, d2)
        pts.append(x)
        nrm.append(n_)
        kap.append(k_)
        params.extend((k, t) for t in tau)
    return np.vstack(pts), np.vstack(nrm), np.concatenate(kap), params


def _arclength(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_geometry(points: np.ndarray):
    """Normals and curvature of a closed polyline by 5-point arc-length differences.

    A degree-4 polynomial is interpolated through each node and its two
    neighbours on either side, in the local arc-length coordinate, for each
    coordinate; its first two derivatives at the node give the tangent and
    curvature.
    """
    points = np.asarray(points, dtype=float)
    m = len(points)
    if m < 5:
        raise MeshError("a boundary loop needs at least 5 nodes for curvature stencils")
    seg = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    s_cum = np.concatenate([[0.0], np.cumsum(seg)])
    offs = np.arange(-2, 3)
    d1 = np.empty((m, 2))
    d2 = np.empty((m, 2))
    total = s_cum[-1]
    for i in range(m):
        idx = (i + offs) % m
        # arc-length offsets of the stencil relative to node i, unwrapped
        s = s_cum[(i + offs)] if 2 <= i < m - 2 else None
        if s is None:
            raw = i + offs
            s = np.array([s_cum[r % m] + total * (r // m) for r in raw])
        s = s - s_cum[i]
        V = np.vander(s, 5, increasing=True)
        coef = np.linalg.solve(V, points[idx])
        d1[i] = coef[1]
        d2[i] = 2.0 * coef[2]
    normal, kappa = _geometry_from_derivs(d1, d2)
    return normal, kappa


# -- domain specs ----------------------------------------------------------------


@dataclass
class DomainSpec:
    """Parameters of a generated domain.

    ``kind`` is one of ``disk``, ``ellipse``, ``annulus``, ``rectangle``,
    ``dumbbell`` or ``file`` (then ``path`` names a mesh file).
    """

    kind: str = "disk"
    h: float = 0.1
    radius: float = 1.0
    inner_radius: float = 0.5
    half_axes: tuple = (1.0, 0.5)
    width: float = 1.0
    height: float = 1.0
    origin: tuple = (0.0, 0.0)
    rounding: float = 0.05
    bulb_radius: float = 1.0
    neck_width: float = 0.1
    neck_length: float = 1.0
    flare_height: float = 0.5
    flare_length: float = 0.5
    path: Optional[str] = None

    def check(self) -> None:
        if not self.h > 0:
            raise MeshError("mesh size h must be positive")
        k = self.kind
        if k == "disk" and not self.radius > 0:
            raise MeshError("disk radius must be positive")
        if k == "annulus" and not 0 < self.inner_radius < self.radius:
            raise MeshError("annulus needs 0 < inner_radius < radius")
        if k == "ellipse" and not min(self.half_axes) > 0:
            raise MeshError("ellipse half axes must be positive")
        if k == "rectangle":
            if not self.rounding > 0:
                raise MeshError("rectangle corners must be rounded (rounding > 0)")
            if 2 * self.rounding > min(self.width, self.height):
                raise MeshError("rounding radius exceeds half the rectangle side")
        if k == "dumbbell":
            if not self.neck_width > 0:
                raise MeshError("dumbbell neck width must be positive")
            if self.neck_width + 2 * self.flare_height >= 2 * self.bulb_radius:
                raise MeshError("dumbbell neck (with flares) is wider than the bulbs")
            if not self.neck_length > 0 or not self.flare_length > 0:
                raise MeshError("dumbbell neck and flare lengths must be positive")
        if k == "file" and not self.path:
            raise MeshError("file domain needs a path")
        if k not in ("disk", "annulus", "ellipse", "rectangle", "dumbbell", "file"):
            raise MeshError(f"unknown domain kind {k!r}")

    def effective_h(self) -> float:
        if self.kind == "dumbbell":
            return min(self.h, self.neck_width / 4.0)
        return self.h


def generate(spec: DomainSpec) -> Mesh:
    spec.check()
    if spec.kind == "disk":
        mesh = _ring_mesh(0.0, spec.radius, spec.h)
    elif spec.kind == "annulus":
        mesh = _ring_mesh(spec.inner_radius, spec.radius, spec.h)
    elif spec.kind == "ellipse":
        mesh = _ellipse_mesh(spec.half_axes, spec.h)
    elif spec.kind == "rectangle":
        mesh = _cdt_mesh([_rounded_rectangle(spec)], spec.h)
    elif spec.kind == "dumbbell":
        mesh = _cdt_mesh([_dumbbell(spec)], spec.effective_h())
    else:
        mesh = load_mesh(spec.path)
    mesh.name = spec.kind
    return mesh


#: outer fraction of a disk meshed with the same node count on every ring
_BAND = 0.3


def _ring_points(r_in: float, r_out: float, h: float):
    """Concentric rings of nodes; returns points, (ring, angle) labels, ring count.

    Ring ``k`` is rotated by half a spacing when ``m - k`` is odd, so the
    outermost ring has a node at angle 0 and neighbouring rings interlace.
    Disks keep the boundary node count on the outer ``_BAND`` of the radius,
    which makes the triangulation there a smooth image of a regular grid.
    """
    pts, rings, angles = [], [], []
    if r_in == 0.0:
        m = max(2, int(math.ceil(r_out / h - 1e-9)))
        radii = np.linspace(0.0, r_out, m + 1)
        c = max(1, int(round(2 * np.pi * r_out / h / (6 * m))))
        counts = [1] + [6 * m * c if radii[k] >= (1 - _BAND) * r_out - 1e-12 else 6 * k * c
                        for k in range(1, m + 1)]
    else:
        m = max(2, int(math.ceil((r_out - r_in) / h - 1e-9)))
        radii = np.linspace(r_in, r_out, m + 1)
        counts = [2 * max(3, int(round(np.pi * r / h))) for r in radii]
    for k in range(m + 1):
        n_k = counts[k]
        if n_k == 1:
            th = np.zeros(1)
        else:
            th = (np.arange(n_k) + 0.5 * ((m - k) % 2)) * 2 * np.pi / n_k
        pts.append(np.column_stack([np.cos(th), np.sin(th)]) * radii[k])
        rings.append(np.full(n_k, k))
        angles.append(th)
    return np.vstack(pts), np.concatenate(rings), np.concatenate(angles), m


def _strip(points, a, ta, b, tb):
    """Triangulate the band between two closed rings ``a`` and ``b``.

    Nodes are joined when their angular cells (half way to each neighbour)
    overlap; the rule is invariant under reflections, so mirror-symmetric
    rings give a mirror-symmetric strip.  Exact cell ties take the shorter
    diagonal.
    """
    na, nb = a.size, b.size
    da, db = 2 * np.pi / na, 2 * np.pi / nb
    ua = ta + 0.5 * da  # upper cell edge
    ub = tb + 0.5 * db
    tris = []
    i = j = 0
    for _ in range(na + nb):
        ia, ja = i % na, j % nb
        ea = ua[ia] + 2 * np.pi * (i // na)
        eb = ub[ja] + 2 * np.pi * (j // nb)
        an, bn = a[(i + 1) % na], b[(j + 1) % nb]
        if abs(ea - eb) < 1e-12:
            la = np.linalg.norm(points[an] - points[b[ja]])
            lb = np.linalg.norm(points[a[ia]] - points[bn])
            if abs(la - lb) > 1e-9 * (la + lb):
                step_a = la < lb
            else:
                # quad symmetric about a radial line: decide by x so the
                # choice is invariant under y -> -y
                step_a = points[an, 0] > points[a[ia], 0]
        else:
            step_a = ea < eb
        if step_a:
            tris.append((a[ia], an, b[ja]))
            i += 1
        else:
            tris.append((a[ia], bn, b[ja]))
            j += 1
    return tris


def _ring_triangles(points, rings, angles, m):
    tris = []
    members = [np.flatnonzero(rings == k) for k in range(m + 1)]
    for k in range(m):
        a, b = members[k], members[k + 1]
        a = a[np.argsort(angles[a])]
        b = b[np.argsort(angles[b])]
        if a.size == 1:
            tris += [(a[0], b[i], b[(i + 1) % b.size]) for i in range(b.size)]
        else:
            tris += _strip(points, a, angles[a], b, angles[b])
    return _orient(points, np.array(tris, dtype=np.int64))


def _orient(points, tri):
    p = points[tri]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    flip = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def _triangulate(points: np.ndarray) -> np.ndarray:
    tri = Delaunay(points, qhull_options="Qbb Qc Qz Q12").simplices.astype(np.int64)
    p = points[tri]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def _drop_unused(points, tri, loops):
    used = np.zeros(len(points), dtype=bool)
    used[tri.ravel()] = True
    for l in loops:
        used[l] = True
    new = np.cumsum(used) - 1
    return points[used], new[tri], [new[l] for l in loops]


def _ring_mesh(r_in: float, r_out: float, h: float) -> Mesh:
    pts, rings, angles, m = _ring_points(r_in, r_out, h)
    tri = _ring_triangles(pts, rings, angles, m)
    outer = np.flatnonzero(rings == m)
    outer = outer[np.argsort(angles[outer])]
    loops = [outer]
    normals = [np.column_stack([np.cos(angles[outer]), np.sin(angles[outer])])]
    curv = [np.full(outer.size, 1.0 / r_out)]
    arcl = [r_out * (angles[outer] - angles[outer][0])]
    if r_in > 0:
        inner = np.flatnonzero(rings == 0)
        inner = inner[np.argsort(-angles[inner])]
        loops.append(inner)
        normals.append(-np.column_stack([np.cos(angles[inner]), np.sin(angles[inner])]))
        curv.append(np.full(inner.size, -1.0 / r_in))
        arcl.append(r_in * (angles[inner][0] - angles[inner]))
    pts, tri, loops = _drop_unused(pts, tri, loops)
    mesh = Mesh(pts, tri, loops, np.vstack(normals), np.concatenate(curv),
                np.concatenate(arcl), h=h)
    return mesh.validate()


def _ellipse_mesh(half_axes, h: float) -> Mesh:
    ax, ay = half_axes
    # structured disk mesh in the reference circle, stretched onto the ellipse
    ref_h = h / max(ax, ay)
    pts, rings, angles, m = _ring_points(0.0, 1.0, ref_h)
    tri = _ring_triangles(pts, rings, angles, m)
    pts = pts * np.array([ax, ay])
    outer = np.flatnonzero(rings == m)
    outer = outer[np.argsort(angles[outer])]
    th = angles[outer]
    d1 = np.column_stack([-ax * np.sin(th), ay * np.cos(th)])
    d2 = -np.column_stack([ax * np.cos(th), ay * np.sin(th)])
    normal, kappa = _geometry_from_derivs(d1, d2)
    mesh = Mesh(pts, tri, [outer], normal, kappa, _arclength(pts[outer])[: outer.size], h=h)
    return mesh.validate()


def _rounded_rectangle(spec: DomainSpec):
    x0, y0 = spec.origin
    W, H, r = spec.width, spec.height, spec.rounding
    x1, y1 = x0 + W, y0 + H
    # turning per segment <= 4h so the polygonal corner error is O(h^2)
    arcs = max(4, int(math.ceil(0.5 * np.pi * r / spec.h)), int(math.ceil(0.5 * np.pi / (4 * spec.h))))
    return [
        line_piece((x0 + r, y0), (x1 - r, y0)),
        arc_piece((x1 - r, y0 + r), r, -np.pi / 2, 0.0, arcs),
        line_piece((x1, y0 + r), (x1, y1 - r)),
        arc_piece((x1 - r, y1 - r), r, 0.0, np.pi / 2, arcs),
        line_piece((x1 - r, y1), (x0 + r, y1)),
        arc_piece((x0 + r, y1 - r), r, np.pi / 2, np.pi, arcs),
        line_piece((x0, y1 - r), (x0, y0 + r)),
        arc_piece((x0 + r, y0 + r), r, np.pi, 1.5 * np.pi, arcs),
    ]


def _quintic_blend(x_a, y_a, x_b, y_b, dy_b, ddy_b):
    """Coefficients of q with q(x_a)=y_a, q'(x_a)=q''(x_a)=0 and matching
    value, slope and second derivative of the target at x_b."""
    rows, rhs = [], []
    P = np.polynomial.polynomial
    for x, order, val in [
        (x_a, 0, y_a), (x_a, 1, 0.0), (x_a, 2, 0.0),
        (x_b, 0, y_b), (x_b, 1, dy_b), (x_b, 2, ddy_b),
    ]:
        row = []
        for k in range(6):
            e = np.zeros(6)
            e[k] = 1.0
            row.append(P.polyval(x, P.polyder(e, order)) if order else x**k)
        rows.append(row)
        rhs.append(val)
    return np.linalg.solve(np.array(rows), np.array(rhs))


def _dumbbell(spec: DomainSpec):
    """Two disks joined by a straight neck; C^2 quintic flares at the joints."""
    R = spec.bulb_radius
    w2 = 0.5 * spec.neck_width
    c = R + 0.5 * spec.neck_length  # bulb centres at (+-c, 0)
    y_b = w2 + spec.flare_height
    beta = math.asin(y_b / R)
    x_b = c - R * math.cos(beta)
    x_a = x_b - spec.flare_length
    if x_a <= 0:
        raise MeshError("dumbbell flares overlap: increase neck_length or shorten flares")
    # upper-left part of the right circle as a graph y(x) = sqrt(R^2 - (x-c)^2)
    X = x_b - c
    Y = math.sqrt(R * R - X * X)
    dy = -X / Y
    ddy = -(R * R) / Y**3
    coef = _quintic_blend(x_a, w2, x_b, y_b, dy, ddy)
    q = np.polynomial.Polynomial(coef)
    xs = np.linspace(x_a, x_b, 2001)
    if np.any(np.diff(q(xs)) < -1e-12) or np.any(q(xs) < w2 - 1e-12):
        raise MeshError("dumbbell flare is not monotone; adjust flare parameters")
    arcs = max(16, int(math.ceil(2 * np.pi * R / spec.effective_h())))
    flare = graph_piece(coef, x_a, x_b)
    I = np.eye(2)
    Fx = np.diag([-1.0, 1.0])
    Fy = np.diag([1.0, -1.0])
    return [
        line_piece((-x_a, -w2), (x_a, -w2)),
        flare.transformed(Fy, reverse=False),  # lower right, left to right
        arc_piece((c, 0.0), R, -(np.pi - beta), np.pi - beta, arcs),
        flare.transformed(I, reverse=True),  # upper right, right to left
        line_piece((x_a, w2), (-x_a, w2)),
        flare.transformed(Fx, reverse=False),  # upper left, right to left
        arc_piece((-c, 0.0), R, beta, 2 * np.pi - beta, arcs),
        flare.transformed(-I, reverse=True),  # lower left, left to right
    ]


def _hex_lattice(lo, hi, h):
    dy = h * math.sqrt(3) / 2
    ys = np.arange(lo[1], hi[1] + dy, dy)
    rows = []
    for j, y in enumerate(ys):
        xs = np.arange(lo[0] + (0.5 * h if j % 2 else 0.0), hi[0] + h, h)
        rows.append(np.column_stack([xs, np.full_like(xs, y)]))
    return np.vstack(rows)


def _cdt_mesh(loops_pieces, h: float, max_rounds: int = 30) -> Mesh:
    """Boundary-conforming Delaunay mesh of a region bounded by analytic loops.

    Boundary segments missing from the Delaunay triangulation are split at
    their analytic midpoint until every segment is an edge.
    """
    # per loop: list of (piece index, tau) node parameters
    loop_params = []
    for pieces in loops_pieces:
        _, _, _, params = sample_loop(pieces, h)
        loop_params.append(params)

    def evaluate(pieces, params):
        xs, d1s, d2s = [], [], []
        for k, tau in params:
            x, d1, d2 = pieces[k](tau)
            xs.append(x[0]); d1s.append(d1[0]); d2s.append(d2[0])
        return np.array(xs), np.array(d1s), np.array(d2s)

    interior_all = None
    for _ in range(max_rounds):
        bpts = [evaluate(p, prm)[0] for p, prm in zip(loops_pieces, loop_params)]
        boundary = np.vstack(bpts)
        if interior_all is None:
            lo = boundary.min(axis=0)
            hi = boundary.max(axis=0)
            lat = _hex_lattice(lo, hi, h)
            inside = np.zeros(len(lat), dtype=bool)
            for b in bpts:
                inside ^= MplPath(b).contains_points(lat)
            interior_all = lat[inside]
        dist, _ = cKDTree(boundary).query(interior_all)
        interior = interior_all[dist >= 0.7 * h]
        offsets = np.cumsum([0] + [len(b) for b in bpts])
        loops = [np.arange(offsets[i], offsets[i + 1]) for i in range(len(bpts))]
        pts = np.vstack([boundary, interior])
        tri = _triangulate(pts)
        edges = set()
        for a, b in [(0, 1), (1, 2), (2, 0)]:
            edges.update(zip(tri[:, a].tolist(), tri[:, b].tolist()))
            edges.update(zip(tri[:, b].tolist(), tri[:, a].tolist()))
        missing = False
        new_params = []
        for li, loop in enumerate(loops):
            prm = loop_params[li]
            out = []
            for j in range(len(loop)):
                out.append(prm[j])
                a, b = int(loop[j]), int(loop[(j + 1) % len(loop)])
                if (a, b) not in edges:
                    missing = True
                    k0, t0 = prm[j]
                    k1, t1 = prm[(j + 1) % len(loop)]
                    if k1 != k0:
                        t1 = 1.0
                    out.append((k0, 0.5 * (t0 + t1)))
            new_params.append(out)
        if not missing:
            break
        loop_params = new_params
    else:
        raise MeshError("could not recover boundary segments in the triangulation")

    c = pts[tri].mean(axis=1)
    inside = np.zeros(len(c), dtype=bool)
    for b in bpts:
        inside ^= MplPath(b).contains_points(c)
    tri = tri[inside]
    normals, curv, arcl = [], [], []
    for pieces, prm, b in zip(loops_pieces, loop_params, bpts):
        _, d1, d2 = evaluate(pieces, prm)
        n_, k_ = _geometry_from_derivs(d1, d2)
        k_ = _junction_curvature(pieces, prm, b, k_)
        normals.append(n_)
        curv.append(k_)
        arcl.append(_arclength(b)[: len(b)])
    pts, tri, loops = _drop_unused(pts, tri, loops)
    mesh = Mesh(pts, tri, loops, np.vstack(normals), np.concatenate(curv),
                np.concatenate(arcl), h=h)
    return mesh.validate()


# -- file I/O ------------------------------------------------------------------


def save_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format (see :func:`load_mesh`)."""
    lines = [f"nodes {mesh.n_nodes} triangles {mesh.n_triangles}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    for loop in mesh.boundary_loops:
        lines.append("bloop " + str(loop.size) + " " + " ".join(map(str, loop.tolist())))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    """Read a mesh file.

    Format: ``nodes N triangles T``, then N lines ``x y``, T lines ``i j k``
    (0-based, counterclockwise), then one ``bloop n i1 ... in`` line per
    boundary loop, ordered with the domain on the left.  Boundary normals and
    curvature are computed from the polyline by 5-point arc-length stencils.
    """
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise MeshError(f"{path}: empty mesh file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "nodes" or head[2] != "triangles":
        raise MeshError(f"{path}:1: expected 'nodes N triangles T'")
    try:
        n, t = int(head[1]), int(head[3])
        nodes = np.array([[float(v) for v in ln.split()] for ln in lines[1 : 1 + n]])
        tris = np.array([[int(v) for v in ln.split()] for ln in lines[1 + n : 1 + n + t]])
    except ValueError as exc:
        raise MeshError(f"{path}: {exc}") from None
    if nodes.shape != (n, 2) or tris.shape != (t, 3):
        raise MeshError(f"{path}: node/triangle block has the wrong shape")
    loops = []
    for ln in lines[1 + n + t :]:
        parts = ln.split()
        if parts[0] != "bloop":
            raise MeshError(f"{path}: unexpected line {ln[:40]!r}")
        m = int(parts[1])
        idx = [int(v) for v in parts[2:]]
        if len(idx) != m:
            raise MeshError(f"{path}: bloop declares {m} nodes but lists {len(idx)}")
        loops.append(np.array(idx))
    if not loops:
        raise MeshError(f"{path}: no boundary loops")
    normals, curv, arcl = [], [], []
    for loop in loops:
        if loop.size < 5:
            raise MeshError(f"{path}: boundary loop with fewer than 5 nodes")
        n_, k_ = polyline_geometry(nodes[loop])
        normals.append(n_)
        curv.append(k_)
        arcl.append(_arclength(nodes[loop])[: loop.size])
    mesh = Mesh(nodes, tris, loops, np.vstack(normals), np.concatenate(curv),
                np.concatenate(arcl), name=path.stem)
    mesh.validate()
    e = mesh.edge_lengths
    mesh.h = float(e.mean())
    return mesh


def boundary_quadrature(mesh: Mesh):
    """Lumped boundary weights: each node gets half of each adjacent edge length.

    Returns ``(nodes, weights)`` aligned with ``mesh.boundary_nodes``.
    """
    w = np.zeros(mesh.boundary_nodes.size)
    pos = mesh.boundary_position
    e = mesh.boundary_edges
    length = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    np.add.at(w, pos[e[:, 0]], 0.5 * length)
    np.add.at(w, pos[e[:, 1]], 0.5 * length)
    return mesh.boundary_nodes.copy(), w

"""P1 finite elements for ``div(a(|grad u|) grad u) + f(u) = 0`` with Robin data.

The weak residual of node ``i`` is

    R_i = int a(|grad u|) grad u . grad phi_i + oint h(u) phi_i - int f(u) phi_i

(plus an optional manufactured source added to ``f``).  ``grad u`` is constant
per triangle, so the flux term is integrated exactly with one point; the
reaction terms use the three edge midpoints and the boundary terms two Gauss
points per edge.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .coeff import EPS_GRAD, CoefficientFamily, DomainError
from .mesh import Mesh

__all__ = [
    "ScalarFunction",
    "NonlinearProblem",
    "Field",
    "DegenerateGradientError",
    "element_gradients",
    "assemble_residual",
    "assemble_jacobian",
    "mass_matrix",
    "stiffness_matrix",
    "boundary_mass_matrix",
    "lumped_mass",
    "recover_gradient",
    "averaged_gradient",
    "recover_derivatives",
    "save_field",
    "load_field",
]


class DegenerateGradientError(DomainError):
    """Vanishing gradient for a family that is not defined at zero."""

    def __init__(self, triangles, eps_grad):
        self.triangles = np.asarray(triangles)
        shown = ", ".join(map(str, self.triangles[:10].tolist()))
        more = "" if self.triangles.size <= 10 else f", ... ({self.triangles.size} total)"
        super().__init__(
            f"|grad u| < {eps_grad:g} on triangle(s) {shown}{more}; "
            "the coefficient family is not defined at zero gradient"
        )


@dataclass(frozen=True)
class ScalarFunction:
    """A C^1 scalar nonlinearity together with its derivative."""

    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"

    def __call__(self, u):
        return self.fn(np.asarray(u, dtype=float))

    @classmethod
    def zero(cls):
        return cls(lambda u: np.zeros_like(u), lambda u: np.zeros_like(u), "zero")

    @classmethod
    def constant(cls, c: float):
        c = float(c)
        return cls(lambda u: np.full_like(u, c), lambda u: np.zeros_like(u), f"const({c:g})")

    @classmethod
    def linear(cls, lam: float, shift: float = 0.0):
        """``lam * u + shift``."""
        lam, shift = float(lam), float(shift)
        return cls(lambda u: lam * u + shift, lambda u: np.full_like(u, lam), f"linear({lam:g})")

    @classmethod
    def bistable(cls, scale: float = 1.0):
        """``scale * (u - u^3)``."""
        s = float(scale)
        return cls(lambda u: s * (u - u**3), lambda u: s * (1.0 - 3.0 * u**2), f"bistable({s:g})")

    @classmethod
    def polynomial(cls, coefficients):
        """``sum_k c_k u^k`` with coefficients in increasing degree."""
        P = np.polynomial.Polynomial(np.asarray(coefficients, dtype=float))
        dP = P.deriv()
        return cls(lambda u: P(u), lambda u: dP(u), f"poly{list(P.coef)}")


@dataclass(frozen=True)
class NonlinearProblem:
    family: CoefficientFamily
    f: ScalarFunction
    h: ScalarFunction
    #: optional x-dependent forcing added to f (manufactured solutions)
    source: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eps_grad: float = EPS_GRAD

    @property
    def is_neumann(self) -> bool:
        return self.h.name == "zero"

    def with_family(self, family: CoefficientFamily) -> "NonlinearProblem":
        return replace(self, family=family)


@dataclass
class Field:
    mesh: Mesh
    values: np.ndarray
    recovered_gradient: Optional[np.ndarray] = None
    recovered_hessian: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = self.mesh.n_nodes
        if self.values.shape != (n,):
            raise ValueError(f"field has {self.values.shape} values, mesh has {n} nodes")
        if self.recovered_gradient is not None and len(self.recovered_gradient) != n:
            raise ValueError("recovered gradient does not match the node count")
        if self.recovered_hessian is not None and len(self.recovered_hessian) != n:
            raise ValueError("recovered Hessian does not match the node count")

    @classmethod
    def from_function(cls, mesh: Mesh, fn) -> "Field":
        return cls(mesh, np.asarray(fn(mesh.nodes[:, 0], mesh.nodes[:, 1]), dtype=float)
                   * np.ones(mesh.n_nodes))

    @classmethod
    def constant(cls, mesh: Mesh, c: float) -> "Field":
        return cls(mesh, np.full(mesh.n_nodes, float(c)))

    @property
    def has_derivatives(self) -> bool:
        return self.recovered_gradient is not None and self.recovered_hessian is not None

    def with_derivatives(self) -> "Field":
        return self if self.has_derivatives else recover_derivatives(self)

    def oscillation(self) -> float:
        """``max |u - mean(u)|`` with the area-weighted mean."""
        mean = float(lumped_mass(self.mesh) @ self.values) / self.mesh.area
        return float(np.max(np.abs(self.values - mean)))


# -- element kernels -------------------------------------------------------------


def element_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """``(T, 2)`` constant gradient of the P1 interpolant per triangle."""
    return np.einsum("tk,tkd->td", values[mesh.triangles], mesh.basis_gradients)


def _flux_coefficients(problem: NonlinearProblem, g: np.ndarray):
    """``a(|g|)`` and ``a'(|g|)/|g|`` per triangle, honouring the zero-gradient rules."""
    fam = problem.family
    t = np.linalg.norm(g, axis=1)
    small = t < problem.eps_grad
    if np.any(small) and not fam.regular_at_zero:
        raise DegenerateGradientError(np.flatnonzero(small), problem.eps_grad)
    ts = np.where(small, 1.0, t)
    a = np.where(small, fam.zero_limit if fam.regular_at_zero else 0.0, fam.a(ts))
    coef = np.where(small, 0.0, fam.a_prime(ts) / ts)
    return a, coef


# edge midpoint rule: barycentric coordinates of the three midpoints
_MID = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
# two-point Gauss rule on [0, 1]
_G1 = 0.5 - 0.5 / np.sqrt(3.0)
_GAUSS = np.array([[1.0 - _G1, _G1], [_G1, 1.0 - _G1]])


def _reaction(problem: NonlinearProblem, mesh: Mesh, u: np.ndarray):
    """Midpoint values of ``f(u) + source`` and ``f'(u)``: shapes ``(T, 3)``."""
    uq = u[mesh.triangles] @ _MID.T
    fq = problem.f(uq)
    if problem.source is not None:
        xq = np.einsum("qk,tkd->tqd", _MID, mesh.nodes[mesh.triangles])
        fq = fq + problem.source(xq[..., 0], xq[..., 1])
    return fq, problem.f.deriv(uq)


def _boundary_terms(problem: NonlinearProblem, mesh: Mesh, u: np.ndarray):
    e = mesh.boundary_edges
    length = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    uq = u[e] @ _GAUSS.T  # (E, 2) Gauss-point values
    return e, length, problem.h(uq), problem.h.deriv(uq)


def _element_pattern(mesh: Mesh):
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return rows, cols


def _boundary_pattern(mesh: Mesh):
    e = mesh.boundary_edges
    rows = np.repeat(e, 2, axis=1).ravel()
    cols = np.tile(e, (1, 2)).ravel()
    return rows, cols


def _to_csr(mesh: Mesh, parts) -> sp.csr_matrix:
    n = mesh.n_nodes
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    M = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    M.sum_duplicates()
    # exact symmetry: element blocks are symmetric up to rounding of the products
    return ((M + M.T) * 0.5).tocsr()


def assemble_residual(problem: NonlinearProblem, u: Field) -> np.ndarray:
    mesh = u.mesh
    vals = u.values
    area = mesh.signed_areas
    G = mesh.basis_gradients
    g = element_gradients(mesh, vals)
    a, _ = _flux_coefficients(problem, g)
    R = np.zeros(mesh.n_nodes)
    flux = (area * a)[:, None] * g
    np.add.at(R, mesh.triangles, np.einsum("td,tkd->tk", flux, G))
    fq, _ = _reaction(problem, mesh, vals)
    np.add.at(R, mesh.triangles, -(area / 3.0)[:, None] * (fq @ _MID))
    e, length, hq, _ = _boundary_terms(problem, mesh, vals)
    np.add.at(R, e, 0.5 * length[:, None] * (hq @ _GAUSS))
    return R


def assemble_jacobian(problem: NonlinearProblem, u: Field) -> sp.csr_matrix:
    """``int <A(grad u) grad phi_j, grad phi_i> + oint h'(u) phi_i phi_j - int f'(u) phi_i phi_j``."""
    mesh = u.mesh
    vals = u.values
    area = mesh.signed_areas
    G = mesh.basis_gradients
    g = element_gradients(mesh, vals)
    a, coef = _flux_coefficients(problem, g)
    # A grad phi_j = a grad phi_j + (a'/|g|) (g . grad phi_j) g
    Gg = np.einsum("tkd,td->tk", G, g)
    K = a[:, None, None] * np.einsum("tid,tjd->tij", G, G)
    K += coef[:, None, None] * Gg[:, :, None] * Gg[:, None, :]
    K *= area[:, None, None]
    _, dfq = _reaction(problem, mesh, vals)
    # midpoint rule: sum_q w f'_q phi_i(q) phi_j(q)
    Mf = np.einsum("tq,qi,qj->tij", dfq, _MID, _MID) * (area / 3.0)[:, None, None]
    rows, cols = _element_pattern(mesh)
    e, length, _, dhq = _boundary_terms(problem, mesh, vals)
    Bh = np.einsum("eq,qi,qj->eij", dhq, _GAUSS, _GAUSS) * (0.5 * length)[:, None, None]
    brows, bcols = _boundary_pattern(mesh)
    return _to_csr(mesh, [(rows, cols, (K - Mf).ravel()), (brows, bcols, Bh.ravel())])


def stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    G = mesh.basis_gradients
    K = np.einsum("tid,tjd->tij", G, G) * mesh.signed_areas[:, None, None]
    rows, cols = _element_pattern(mesh)
    return _to_csr(mesh, [(rows, cols, K.ravel())])


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix (diagonal T/6, off-diagonal T/12 per triangle)."""
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    M = mesh.signed_areas[:, None, None] * local
    rows, cols = _element_pattern(mesh)
    return _to_csr(mesh, [(rows, cols, M.ravel())])


def boundary_mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix of the boundary curve, ``oint phi_i phi_j``."""
    e = mesh.boundary_edges
    length = np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1)
    local = (np.ones((2, 2)) + np.eye(2)) / 6.0
    B = length[:, None, None] * local
    rows, cols = _boundary_pattern(mesh)
    return _to_csr(mesh, [(rows, cols, B.ravel())])


def lumped_mass(mesh: Mesh) -> np.ndarray:
    """``int phi_i``: one third of the area of each incident triangle."""
    m = np.zeros(mesh.n_nodes)
    np.add.at(m, mesh.triangles, np.repeat((mesh.signed_areas / 3.0)[:, None], 3, axis=1))
    return m


# -- derivative recovery -----------------------------------------------------------


def _node_patches(mesh: Mesh, nodes: np.ndarray, rings: int = 2):
    A = mesh.adjacency.astype(np.int8)
    reach = sp.identity(mesh.n_nodes, dtype=np.int8, format="csr")
    R = reach
    for _ in range(rings):
        R = (R + R @ A).astype(bool).astype(np.int8)
    R = R.tocsr()
    return [R.indices[R.indptr[i] : R.indptr[i + 1]] for i in nodes]


class _Recovery:
    """Linear recovery operators for one mesh, stored as sparse matrices.

    ``grad``: gradient at each node of the quadratic least-squares fit to the
    nodal values in its 2-ring (one-sided at boundary nodes).  Exact for
    quadratics, O(h^2) for smooth fields.

    ``avg``: area-weighted average of the element gradients of the P1
    interpolant over the 1-ring.  Exact for affine fields, O(h) otherwise;
    used for the second derivative pass.
    """

    def __init__(self, mesh: Mesh):
        n, T = mesh.n_nodes, mesh.n_triangles
        area = mesh.signed_areas
        G = mesh.basis_gradients
        tri = mesh.triangles
        rows = np.repeat(np.arange(T), 3)
        Ex = sp.csr_matrix((G[:, :, 0].ravel(), (rows, tri.ravel())), shape=(T, n))
        Ey = sp.csr_matrix((G[:, :, 1].ravel(), (rows, tri.ravel())), shape=(T, n))
        W = sp.csr_matrix((np.repeat(area, 3), (tri.ravel(), rows)), shape=(n, T))
        W = sp.diags(1.0 / np.asarray(W.sum(axis=1)).ravel()) @ W
        self.avg = ((W @ Ex).tocsr(), (W @ Ey).tocsr())

        patches = _node_patches(mesh, np.arange(n), rings=2)
        sizes = np.array([len(p) for p in patches])
        br, bc, bx, by = [], [], [], []
        for m in np.unique(sizes):
            idx = np.flatnonzero(sizes == m)
            P = np.stack([patches[i] for i in idx])  # (k, m)
            d = mesh.nodes[P] - mesh.nodes[idx][:, None, :]
            scale = np.abs(d).max(axis=(1, 2))
            d = d / scale[:, None, None]
            x, y = d[..., 0], d[..., 1]
            V = np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=-1)
            Pinv = np.linalg.pinv(V)  # (k, 6, m)
            br.append(np.repeat(idx, m))
            bc.append(P.ravel())
            bx.append((Pinv[:, 1, :] / scale[:, None]).ravel())
            by.append((Pinv[:, 2, :] / scale[:, None]).ravel())
        br, bc = np.concatenate(br), np.concatenate(bc)
        self.grad = (
            sp.csr_matrix((np.concatenate(bx), (br, bc)), shape=(n, n)),
            sp.csr_matrix((np.concatenate(by), (br, bc)), shape=(n, n)),
        )

    @staticmethod
    def _apply(ops, values):
        return np.column_stack([ops[0] @ values, ops[1] @ values])

    def gradient(self, values):
        return self._apply(self.grad, values)

    def averaged(self, values):
        return self._apply(self.avg, values)


_RECOVERY_CACHE: "dict[int, tuple]" = {}


def _recovery(mesh: Mesh) -> _Recovery:
    key = id(mesh)
    hit = _RECOVERY_CACHE.get(key)
    if hit is not None and hit[0] is mesh:
        return hit[1]
    rec = _Recovery(mesh)
    if len(_RECOVERY_CACHE) > 16:
        _RECOVERY_CACHE.clear()
    _RECOVERY_CACHE[key] = (mesh, rec)
    return rec


def recover_gradient(mesh: Mesh, values) -> np.ndarray:
    """``(n, 2)`` recovered nodal gradient of a nodal scalar field (quadratic fit)."""
    return _recovery(mesh).gradient(np.asarray(values, dtype=float))


def averaged_gradient(mesh: Mesh, values) -> np.ndarray:
    """``(n, 2)`` area-weighted average of element gradients around each node."""
    return _recovery(mesh).averaged(np.asarray(values, dtype=float))


def recover_derivatives(u: Field) -> Field:
    """Nodal gradient by quadratic patch fit, Hessian by averaging its element gradients."""
    rec = _recovery(u.mesh)
    g = rec.gradient(u.values)
    H = np.empty((u.mesh.n_nodes, 2, 2))
    H[:, 0, :] = rec.averaged(g[:, 0])
    H[:, 1, :] = rec.averaged(g[:, 1])
    H = 0.5 * (H + H.transpose(0, 2, 1))
    return Field(u.mesh, u.values, g, H)


# -- plain-text field tables ---------------------------------------------------------


def save_field(u: Field, path, column: str = "value") -> None:
    lines = [f"# node {column}"]
    lines += [f"{i} {v!r}" for i, v in enumerate(u.values.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_field(mesh: Mesh, path) -> Field:
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected 'node value' columns")
    values = np.empty(mesh.n_nodes)
    idx = data[:, 0].astype(int)
    if sorted(idx.tolist()) != list(range(mesh.n_nodes)):
        raise ValueError(f"{path}: node indices do not cover the mesh")
    values[idx] = data[:, 1]
    return Field(mesh, values)

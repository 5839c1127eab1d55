"""Level-set geometry of a discrete field and a term-by-term Poincare check.

For a field ``u`` with recovered gradient ``g`` and Hessian ``H`` the level
curve through a node has curvature

    k1 = (u_y^2 u_xx - 2 u_x u_y u_xy + u_x^2 u_yy) / |g|^3

and ``grad |g| = H g / |g|`` splits into a part along ``g`` and a tangential
part.  In two dimensions

    |H|_F^2 - |grad|g||^2 - |grad_T |g||^2 = |g|^2 k1^2

holds pointwise, which is what :func:`curvature_identity_residual` measures.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coeff import eval_a, matrix_A
from .fem import (
    DegenerateGradientError,
    Field,
    NonlinearProblem,
    averaged_gradient,
    element_gradients,
    lumped_mass,
)
from .mesh import boundary_quadrature

__all__ = [
    "LevelSetData",
    "PoincareBreakdown",
    "levelset_quantities",
    "curvature_identity_residual",
    "poincare_breakdown",
    "instability_witness",
    "dump_levelset",
    "random_smooth_test_function",
]


@dataclass
class LevelSetData:
    """Per-node level-set quantities; entries at masked nodes are zero."""

    grad_norm: np.ndarray
    grad_of_grad_norm: np.ndarray
    tangential_grad_norm: np.ndarray
    curvature: np.ndarray
    mask: np.ndarray  # True where |grad u| < eps_grad

    @property
    def active(self) -> np.ndarray:
        return ~self.mask


@dataclass
class PoincareBreakdown:
    interior_lhs: float
    boundary_term: float
    rhs: float
    slack: float
    hessian_form_lhs: float
    # boundary nodes where h(u) = 0 and the h(u) Lap u term drops out
    critical_boundary_nodes: tuple = ()

    COLUMNS = ("interior_lhs", "boundary_term", "rhs", "slack", "hessian_form_lhs")

    def as_row(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def _derivs(u: Field):
    u = u.with_derivatives()
    return u, u.recovered_gradient, u.recovered_hessian


def levelset_quantities(u: Field, eps_grad: float = 1e-10) -> LevelSetData:
    u, g, H = _derivs(u)
    t = np.linalg.norm(g, axis=1)
    mask = t < eps_grad
    ts = np.where(mask, 1.0, t)
    n = g / ts[:, None]
    G = np.einsum("nij,nj->ni", H, n)
    GT = G - np.sum(G * n, axis=1)[:, None] * n
    k1 = (g[:, 1] ** 2 * H[:, 0, 0] - 2 * g[:, 0] * g[:, 1] * H[:, 0, 1]
          + g[:, 0] ** 2 * H[:, 1, 1]) / ts**3
    G[mask] = 0.0
    GT[mask] = 0.0
    k1[mask] = 0.0
    return LevelSetData(
        grad_norm=np.where(mask, 0.0, t),
        grad_of_grad_norm=G,
        tangential_grad_norm=np.linalg.norm(GT, axis=1),
        curvature=k1,
        mask=mask,
    )


def _independent_grad_of_grad_norm(u: Field, data: LevelSetData) -> np.ndarray:
    """``grad |grad u|`` recovered directly from the nodal ``|grad u|`` field.

    The chain-rule value ``H g/|g|`` makes the curvature identity hold to
    rounding, so the residual would test nothing; this one does not.
    """
    G = averaged_gradient(u.mesh, np.linalg.norm(u.recovered_gradient, axis=1))
    G[data.mask] = 0.0
    return G


def curvature_identity_residual(u: Field, eps_grad: float = 1e-10) -> np.ndarray:
    """``|H|^2 - |grad|g||^2 - |grad_T|g||^2 - |g|^2 k1^2`` per node (0 where masked)."""
    u, g, H = _derivs(u)
    data = levelset_quantities(u, eps_grad)
    G = _independent_grad_of_grad_norm(u, data)
    t = np.where(data.mask, 1.0, data.grad_norm)
    n = g / t[:, None]
    GT = G - np.sum(G * n, axis=1)[:, None] * n
    res = (np.sum(H * H, axis=(1, 2)) - np.sum(G * G, axis=1) - np.sum(GT * GT, axis=1)
           - data.grad_norm**2 * data.curvature**2)
    res[data.mask] = 0.0
    return res


def _quad_form(A, v):
    return np.einsum("ni,nij,nj->n", v, A, v)


def poincare_breakdown(problem: NonlinearProblem, u: Field, phi: Field) -> PoincareBreakdown:
    """Evaluate both sides of the weighted Poincare inequality for test field ``phi``.

    Interior and boundary integrals use nodal (lumped) quadrature of the
    recovered derivatives; the right-hand side uses the exact P1 element
    gradients of ``u`` and ``phi``.
    """
    u, g, H = _derivs(u)
    mesh = u.mesh
    fam = problem.family
    data = levelset_quantities(u, problem.eps_grad)
    act = data.active
    if not fam.regular_at_zero and np.any(data.mask):
        raise DegenerateGradientError(np.flatnonzero(data.mask).tolist(), problem.eps_grad)
    w = lumped_mass(mesh) * phi.values**2

    t = data.grad_norm[act]
    a = np.asarray(fam.a(t))
    lam1 = a + np.asarray(fam.a_prime(t)) * t
    interior = lam1 * data.tangential_grad_norm[act] ** 2 + a * t**2 * data.curvature[act] ** 2
    interior_lhs = float(np.sum(w[act] * interior))

    A = matrix_A(fam, g[act], problem.eps_grad)
    Gi = _independent_grad_of_grad_norm(u, data)[act]
    rows = _quad_form(A, H[act, 0, :]) + _quad_form(A, H[act, 1, :])
    hessian_form_lhs = float(np.sum(w[act] * (rows - _quad_form(A, Gi))))

    bn, bw = boundary_quadrature(mesh)
    nu = mesh.boundary_normal
    ub = u.values[bn]
    # gradients below eps_grad count as zero, as in the coefficient evaluation
    keep = act[bn][:, None]
    gb, Hb = np.where(keep, g[bn], 0.0), np.where(keep[:, :, None], H[bn], 0.0)
    tb = np.linalg.norm(gb, axis=1)
    ab = eval_a(fam, tb, problem.eps_grad) if fam.regular_at_zero else fam.a(tb)
    hu = problem.h(ub)
    integrand = (
        problem.f(ub) * np.sum(gb * nu, axis=1)
        - ab * np.einsum("ni,nij,nj->n", gb, Hb, nu)
        - hu * np.trace(Hb, axis1=1, axis2=2)
        - problem.h.deriv(ub) * tb**2
    )
    boundary_term = float(np.sum(bw * phi.values[bn] ** 2 * integrand))
    critical = tuple(int(i) for i in bn[(np.abs(hu) == 0.0) & (tb >= problem.eps_grad)])
    if problem.is_neumann:
        critical = ()

    ge = element_gradients(mesh, u.values)
    gp = element_gradients(mesh, phi.values)
    te = np.linalg.norm(ge, axis=1)
    ge[te < problem.eps_grad] = 0.0
    te[te < problem.eps_grad] = 0.0
    Ae = matrix_A(fam, ge, problem.eps_grad) if fam.regular_at_zero or np.all(te > 0) else None
    if Ae is None:
        raise DegenerateGradientError(np.flatnonzero(te == 0).tolist(), problem.eps_grad)
    rhs = float(np.sum(mesh.areas * te**2 * _quad_form(Ae, gp)))

    return PoincareBreakdown(
        interior_lhs=interior_lhs,
        boundary_term=boundary_term,
        rhs=rhs,
        slack=rhs - interior_lhs - boundary_term,
        hessian_form_lhs=hessian_form_lhs,
        critical_boundary_nodes=critical,
    )


def instability_witness(u: Field, eigenfunction: Field, floor: float = 1e-3,
                        eps_grad: float = 1e-10) -> Field:
    """Test field ``psi / |grad u|`` built from an unstable eigenfunction ``psi``.

    ``|grad u|`` is floored at ``floor * max|grad u|`` so the quotient stays
    bounded near critical points.
    """
    u = u.with_derivatives()
    t = np.linalg.norm(u.recovered_gradient, axis=1)
    top = float(t.max())
    if top < eps_grad:
        return Field(u.mesh, np.zeros(u.mesh.n_nodes))
    return Field(u.mesh, eigenfunction.values / np.maximum(t, floor * top))


def random_smooth_test_function(mesh, rng: np.random.Generator, modes: int = 4) -> Field:
    """Random trigonometric polynomial of low degree, scaled to max 1."""
    x, y = mesh.nodes.T
    v = np.full(mesh.n_nodes, rng.normal())
    for _ in range(modes):
        k = rng.normal(size=2) * 2.0
        v += rng.normal() * np.cos(k[0] * x + k[1] * y + rng.uniform(0, 2 * np.pi))
    return Field(mesh, v / np.max(np.abs(v)))


def dump_levelset(u: Field, path, eps_grad: float = 1e-10) -> None:
    """Write ``node grad_norm k1 tgrad residual`` rows, masked nodes as ``nan``."""
    data = levelset_quantities(u, eps_grad)
    res = curvature_identity_residual(u, eps_grad)
    cols = [data.grad_norm, data.curvature, data.tangential_grad_norm, res]
    lines = ["# node grad_norm[1] k1[1/length] tgrad[1/length] residual[1/length^2]"]
    for i in range(u.mesh.n_nodes):
        if data.mask[i]:
            lines.append(f"{i} nan nan nan nan")
        else:
            lines.append(f"{i} " + " ".join(f"{c[i]:.12e}" for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")

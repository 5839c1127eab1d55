"""Boundary sign checks, the Robin instability certificate and rigidity runs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .coeff import eval_a, laplacian
from .fem import (
    Field,
    NonlinearProblem,
    ScalarFunction,
    boundary_mass_matrix,
    mass_matrix,
    stiffness_matrix,
)
from .mesh import Mesh, MeshError, boundary_quadrature
from .solver import NewtonOptions, solve
from .stability import classify, smallest_eigenpairs

__all__ = [
    "RobinCertificate",
    "BoundaryFrameData",
    "RigidityRow",
    "RigidityReport",
    "SweepRow",
    "SweepReport",
    "convex_boundary_sign",
    "boundary_frame",
    "robin_certificate",
    "robin_problem",
    "robin_eigenpairs",
    "certificate_sweep",
    "rigidity_experiment",
    "blended_seed",
]


@dataclass
class RobinCertificate:
    alpha: float
    boundary_integral: float
    min_alpha_plus_kappa: float
    fires: bool

    def to_text(self) -> str:
        state = "fires" if self.fires else (
            "vacuous (integral = 0)" if self.boundary_integral == 0.0 else "silent")
        return (f"alpha = {self.alpha:.12g}\n"
                f"boundary_integral = {self.boundary_integral:.12g}\n"
                f"min_alpha_plus_kappa = {self.min_alpha_plus_kappa:.12g}\n"
                f"certificate = {state}\n")


@dataclass
class BoundaryFrameData:
    nodes: np.ndarray
    u_s: np.ndarray
    u_ss: np.ndarray
    u_t: np.ndarray
    residual_robin: np.ndarray
    residual_metric: np.ndarray
    residual_expansion: np.ndarray

    def max_residuals(self) -> dict:
        return {
            "residual_robin": float(np.max(np.abs(self.residual_robin))),
            "residual_metric": float(np.max(np.abs(self.residual_metric))),
            "residual_expansion": float(np.max(np.abs(self.residual_expansion))),
        }


def convex_boundary_sign(problem: NonlinearProblem, u: Field) -> np.ndarray:
    """``a(|grad u|) <grad u, H nu>`` at each boundary node (order of ``boundary_nodes``).

    Only meaningful for Neumann solutions on convex domains; it is
    nonpositive in the continuum limit.
    """
    if not problem.is_neumann:
        raise ValueError("convex_boundary_sign requires a Neumann problem (h == 0)")
    mesh = u.mesh
    if not mesh.is_convex:
        raise ValueError(f"mesh {mesh.name!r} is not convex")
    u = u.with_derivatives()
    bn = mesh.boundary_nodes
    g = u.recovered_gradient[bn]
    H = u.recovered_hessian[bn]
    t = np.linalg.norm(g, axis=1)
    out = np.zeros(bn.size)
    ok = t >= problem.eps_grad
    if np.any(ok):
        a = eval_a(problem.family, t[ok], problem.eps_grad)
        out[ok] = a * np.einsum("ni,nij,nj->n", g[ok], H[ok], mesh.boundary_normal[ok])
    return out


def _loop_derivatives(mesh: Mesh, loop: np.ndarray, values: np.ndarray):
    """First and second arc-length derivatives by periodic nonuniform differences."""
    if loop.size < 3:
        raise MeshError("boundary loop has fewer than 3 nodes")
    p = mesh.nodes[loop]
    hp = np.linalg.norm(np.roll(p, -1, axis=0) - p, axis=1)  # to next node
    hm = np.roll(hp, 1)  # from previous node
    if np.any(hp == 0):
        raise MeshError("boundary loop has repeated nodes")
    v = values[loop]
    vp, vm = np.roll(v, -1), np.roll(v, 1)
    d1 = (hm**2 * (vp - v) + hp**2 * (v - vm)) / (hp * hm * (hp + hm))
    d2 = 2.0 * ((vp - v) / hp - (v - vm) / hm) / (hp + hm)
    return d1, d2


def _check_closed(mesh: Mesh, loop: np.ndarray) -> None:
    edges = {tuple(sorted(e)) for e in mesh.triangles[:, [0, 1]].tolist()}
    edges |= {tuple(sorted(e)) for e in mesh.triangles[:, [1, 2]].tolist()}
    edges |= {tuple(sorted(e)) for e in mesh.triangles[:, [2, 0]].tolist()}
    for i, j in zip(loop, np.roll(loop, -1)):
        if (min(i, j), max(i, j)) not in edges:
            raise MeshError(f"boundary loop is not closed: no edge {i}-{j}")


def boundary_frame(u: Field, alpha: float, f: ScalarFunction, check: bool = True) -> BoundaryFrameData:
    """Arc-length/normal decomposition of ``u`` on the boundary.

    ``s`` runs counter-clockwise, ``t`` is the inward normal, so
    ``u_t = -grad u . nu``.
    """
    mesh = u.mesh
    u = u.with_derivatives()
    us, uss = [], []
    for loop in mesh.boundary_loops:
        if check:
            _check_closed(mesh, loop)
        d1, d2 = _loop_derivatives(mesh, loop, u.values)
        us.append(d1)
        uss.append(d2)
    u_s, u_ss = np.concatenate(us), np.concatenate(uss)
    bn = mesh.boundary_nodes
    nu = mesh.boundary_normal
    kappa = mesh.boundary_curvature
    g = u.recovered_gradient[bn]
    H = u.recovered_hessian[bn]
    ub = u.values[bn]
    u_t = -np.sum(g * nu, axis=1)
    expansion = (np.einsum("ni,nij,nj->n", g, H, nu) + (alpha + kappa) * u_s**2
                 + kappa * alpha**2 * ub**2 - alpha * ub * u_ss - alpha * f(ub) * ub)
    return BoundaryFrameData(
        nodes=bn.copy(),
        u_s=u_s,
        u_ss=u_ss,
        u_t=u_t,
        residual_robin=u_t - alpha * ub,
        residual_metric=np.sum(g * g, axis=1) - u_s**2 - u_t**2,
        residual_expansion=expansion,
    )


def robin_certificate(u: Field, alpha: float, f: ScalarFunction) -> RobinCertificate:
    """Boundary test ``oint alpha f(u) u - kappa alpha^2 u^2 + alpha^3 u^2 < 0`` with ``alpha + kappa >= 0``.

    The integrand is the quotient form multiplied through by ``alpha^2 u^2``,
    so boundary zeros of ``u`` need no special treatment.
    """
    mesh = u.mesh
    bn, w = boundary_quadrature(mesh)
    ub = u.values[bn]
    kappa = mesh.boundary_curvature
    integrand = alpha * f(ub) * ub - kappa * alpha**2 * ub**2 + alpha**3 * ub**2
    integral = float(np.sum(w * integrand))
    m = float(np.min(alpha + kappa))
    return RobinCertificate(float(alpha), integral, m, bool(integral < 0.0 and m >= 0.0))


def robin_problem(alpha: float, lam: float) -> NonlinearProblem:
    """``Lap u + lam u = 0`` with ``du/dnu + alpha u = 0``."""
    return NonlinearProblem(laplacian(), ScalarFunction.linear(lam), ScalarFunction.linear(alpha))


def robin_eigenpairs(mesh: Mesh, alpha: float, k: int):
    """The ``k`` lowest eigenpairs of ``-Lap u = lam u, du/dnu + alpha u = 0``."""
    L = stiffness_matrix(mesh) + alpha * boundary_mass_matrix(mesh)
    return smallest_eigenpairs(L, mass_matrix(mesh), k=k)


@dataclass
class SweepRow:
    alpha: float
    mode: int
    lam: float
    boundary_integral: float
    min_alpha_plus_kappa: float
    fires: bool
    lambda_min: float
    classification: str

    @property
    def sound(self) -> bool:
        return (not self.fires) or self.classification == "unstable"


@dataclass
class SweepReport:
    rows: list

    @property
    def fired(self) -> list:
        return [r for r in self.rows if r.fires]

    @property
    def vacuous(self) -> bool:
        return not self.fired

    @property
    def sound(self) -> bool:
        return all(r.sound for r in self.rows)

    HEADER = "alpha,mode,lambda,boundary_integral,min_alpha_plus_kappa,fires,lambda_min,classification"

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.alpha:.12g},{r.mode},{r.lam:.12g},{r.boundary_integral:.12g},"
                         f"{r.min_alpha_plus_kappa:.12g},{int(r.fires)},{r.lambda_min:.12g},"
                         f"{r.classification}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        if self.vacuous:
            return "vacuous at tested parameters"
        return f"{len(self.fired)} firing configurations, sound = {self.sound}"


def certificate_sweep(mesh: Mesh, alphas: Sequence[float], modes: int = 6) -> SweepReport:
    """Evaluate the certificate on Robin eigenfunctions and classify each one."""
    rows = []
    for alpha in alphas:
        vals, vecs = robin_eigenpairs(mesh, alpha, modes)
        for j in range(len(vals)):
            lam = float(vals[j])
            u = Field(mesh, vecs[:, j])
            cert = robin_certificate(u, alpha, ScalarFunction.linear(lam))
            rep = classify(robin_problem(alpha, lam), u)
            rows.append(SweepRow(float(alpha), j, lam, cert.boundary_integral,
                                 cert.min_alpha_plus_kappa, cert.fires, rep.lambda_min,
                                 rep.classification))
    return SweepReport(rows)


@dataclass
class RigidityRow:
    seed: int
    converged: bool
    iterations: int
    oscillation: float
    lambda_min: float
    classification: str
    violation: bool


@dataclass
class RigidityReport:
    rows: list
    convex: bool
    strictly_convex: bool
    delta_const: float
    solutions: list = field(default_factory=list, repr=False)
    solve_reports: list = field(default_factory=list, repr=False)

    HEADER = "seed,converged,iterations,oscillation,lambda_min,classification,violation"

    @property
    def violations(self) -> list:
        return [r for r in self.rows if r.violation]

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r.seed},{int(r.converged)},{r.iterations},{r.oscillation:.6e},"
                         f"{r.lambda_min:.12g},{r.classification},{int(r.violation)}")
        return "\n".join(lines) + "\n"


def rigidity_experiment(problem: NonlinearProblem, mesh: Mesh, seeds: Sequence[Field],
                        opts: Optional[NewtonOptions] = None, delta_const: float = 1e-4,
                        weakly_convex: bool = False) -> RigidityReport:
    """Solve from each seed, classify, and flag stable nonconstant solutions.

    Flags are raised only when the domain satisfies the convexity hypothesis
    (strict, or weak if ``weakly_convex``); otherwise rows are recorded only.
    """
    if not problem.is_neumann:
        raise ValueError("rigidity experiment needs a Neumann problem (h == 0)")
    convex = mesh.is_convex
    strict = mesh.strictly_convex
    applies = strict or (weakly_convex and convex)
    rows, sols, reps = [], [], []
    for i, seed in enumerate(seeds):
        u, rep = solve(problem, mesh, seed, opts)
        reps.append(rep)
        if not rep.converged:
            rows.append(RigidityRow(i, False, rep.iterations, float("nan"), float("nan"),
                                    "n/a", False))
            sols.append(None)
            continue
        st = classify(problem, u)
        osc = u.oscillation()
        violation = applies and osc > delta_const and st.lambda_min > st.tolerance
        rows.append(RigidityRow(i, True, rep.iterations, osc, st.lambda_min,
                                st.classification, bool(violation)))
        sols.append(u)
    return RigidityReport(rows, convex, strict, delta_const, sols, reps)


def blended_seed(mesh: Mesh, width: float = 0.2, axis: int = 0) -> Field:
    """``+1`` on one side of the plane ``x_axis = 0``, ``-1`` on the other, smoothed."""
    return Field(mesh, np.tanh(mesh.nodes[:, axis] / width))

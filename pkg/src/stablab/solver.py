"""Damped Newton iteration for the discrete weak problem."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import p_laplacian
from .fem import (
    Field,
    NonlinearProblem,
    assemble_jacobian,
    assemble_residual,
    boundary_mass_matrix,
    mass_matrix,
    stiffness_matrix,
)
from .mesh import Mesh

__all__ = [
    "NewtonOptions",
    "SolveReport",
    "LinearSolverError",
    "solve",
    "solve_linear_robin",
    "cosine_seed",
]

log = logging.getLogger(__name__)

_PIVOT_TOL = 1e-12


class LinearSolverError(RuntimeError):
    """The Newton linear system could not be solved."""


@dataclass(frozen=True)
class NewtonOptions:
    max_iterations: int = 50
    residual_tolerance: float = 1e-10
    damping: float = 0.5
    max_halvings: int = 30
    continuation_steps: int = 1

    def __post_init__(self):
        if self.max_iterations < 1 or self.max_halvings < 0 or self.continuation_steps < 1:
            raise ValueError("Newton iteration counts must be positive")
        if not self.residual_tolerance > 0:
            raise ValueError("residual_tolerance must be positive")
        if not 0.0 < self.damping < 1.0:
            raise ValueError("damping factor must lie in (0, 1)")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list = field(default_factory=list)
    step_lengths: list = field(default_factory=list)
    final_residual: float = float("nan")
    message: str = ""

    def history_csv(self) -> str:
        lines = ["iter,residual,step_length"]
        steps = [float("nan")] + list(self.step_lengths)
        for k, (r, s) in enumerate(zip(self.residual_history, steps)):
            lines.append(f"{k},{r:.17g},{s:.17g}")
        return "\n".join(lines) + "\n"


def _linear_solve(J: sp.csr_matrix, rhs: np.ndarray, iteration: int) -> np.ndarray:
    try:
        lu = spla.splu(J.tocsc())
    except RuntimeError as exc:
        raise LinearSolverError(f"singular Jacobian at Newton iteration {iteration}: {exc}") from exc
    d = np.abs(lu.U.diagonal())
    # an exactly singular matrix leaves a rounding-size pivot behind
    if d.min() <= _PIVOT_TOL * d.max():
        raise LinearSolverError(
            f"singular Jacobian at Newton iteration {iteration}: "
            f"pivot {d.min():.3e} at position {int(d.argmin())} (largest {d.max():.3e})"
        )
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise LinearSolverError(f"singular Jacobian at Newton iteration {iteration}: non-finite step")
    return x


def _newton(problem: NonlinearProblem, u0: Field, opts: NewtonOptions,
            report: SolveReport) -> Field:
    u = Field(u0.mesh, u0.values.copy())
    R = assemble_residual(problem, u)
    r = float(np.max(np.abs(R)))
    report.residual_history.append(r)
    for k in range(opts.max_iterations):
        if r <= opts.residual_tolerance:
            report.converged = True
            break
        J = assemble_jacobian(problem, u)
        du = _linear_solve(J, -R, report.iterations)
        t = 1.0
        for _ in range(opts.max_halvings + 1):
            trial = Field(u.mesh, u.values + t * du)
            R_trial = assemble_residual(problem, trial)
            r_trial = float(np.max(np.abs(R_trial)))
            if np.isfinite(r_trial) and r_trial <= (1.0 - 1e-4 * t) * r:
                break
            t *= opts.damping
        else:
            report.message = f"line search failed at iteration {report.iterations}"
            log.debug(report.message)
            return u
        u, R, r = trial, R_trial, r_trial
        report.iterations += 1
        report.residual_history.append(r)
        report.step_lengths.append(t)
    if r <= opts.residual_tolerance:
        report.converged = True
    elif not report.message:
        report.message = f"no convergence after {opts.max_iterations} iterations"
    return u


def solve(problem: NonlinearProblem, mesh: Mesh, initial_guess: Field,
          opts: Optional[NewtonOptions] = None):
    """Solve ``R(u) = 0``; returns ``(field, SolveReport)``.

    Non-convergence is reported, not raised.  For p-Laplacian families with
    ``continuation_steps > 1`` the exponent is stepped linearly from 2.
    """
    opts = opts or NewtonOptions()
    if initial_guess.mesh is not mesh:
        raise ValueError("initial guess lives on a different mesh")
    report = SolveReport(converged=False, iterations=0)
    fam = problem.family
    stages = [problem]
    if opts.continuation_steps > 1 and fam.name == "p-laplacian":
        p = fam.parameters["p"]
        ps = 2.0 + (p - 2.0) * np.arange(1, opts.continuation_steps + 1) / opts.continuation_steps
        stages = [problem.with_family(p_laplacian(q)) for q in ps[:-1]] + [problem]
    u = initial_guess
    for i, stage in enumerate(stages):
        report.converged = False
        report.message = ""
        u = _newton(stage, u, opts, report)
        if not report.converged and i < len(stages) - 1:
            report.message = f"continuation stage {i + 1} failed: {report.message}"
            break
    report.final_residual = report.residual_history[-1]
    return u, report


def solve_linear_robin(alpha: float, lam: float, mesh: Mesh):
    """Test whether ``lam`` is an eigenvalue of ``-Lap u = lam u, du/dnu + alpha u = 0``.

    Returns the M-normalised vector of the shifted operator
    ``K + alpha B - lam M`` closest to its kernel, and the defect
    ``min_k |lam_k(alpha) - lam|``, the smallest generalised singular value of
    the shifted pencil.
    """
    K = stiffness_matrix(mesh)
    B = boundary_mass_matrix(mesh)
    M = mass_matrix(mesh)
    L = (K + alpha * B).tocsc()
    # stay off the spectrum so the shift-invert factorisation exists
    sigma = lam - 1e-7 * (1.0 + abs(lam))
    vals, vecs = spla.eigsh(L, k=1, M=M.tocsc(), sigma=sigma, which="LM")
    phi = vecs[:, 0]
    phi = phi / np.sqrt(phi @ (M @ phi))
    if phi[np.argmax(np.abs(phi))] < 0:
        phi = -phi
    return Field(mesh, phi), float(abs(vals[0] - lam))


def cosine_seed(mesh: Mesh, offset: float, amplitude: float, wavevector) -> Field:
    """``offset + amplitude * cos(k . x)`` at the mesh nodes."""
    k = np.asarray(wavevector, dtype=float)
    return Field(mesh, offset + amplitude * np.cos(mesh.nodes @ k))

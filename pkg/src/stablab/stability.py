"""Second-variation form of a discrete solution and its smallest eigenvalue.

The form is

    Q(phi) = int <A(grad u) grad phi, grad phi> + oint h'(u) phi^2 - int f'(u) phi^2

on the P1 space, and ``u`` is classified by the smallest eigenvalue of
``Q phi = lambda M phi``.  The P1 space is a subspace of the continuous test
space, so a negative discrete eigenvalue certifies instability.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import Field, NonlinearProblem, assemble_jacobian, mass_matrix

__all__ = [
    "StabilityReport",
    "EigenSolverError",
    "assemble_stability_form",
    "smallest_eigenpair",
    "smallest_eigenpairs",
    "negative_count",
    "classify",
    "default_tolerance",
]

STABLE, UNSTABLE, MARGINAL = "stable", "unstable", "marginal"


class EigenSolverError(RuntimeError):
    def __init__(self, message, best=None, residual=float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.best = best
        self.residual = residual


@dataclass
class StabilityReport:
    lambda_min: float
    eigenfunction: Field
    classification: str
    eig_residual: float
    tolerance: float

    @property
    def weakly_stable(self) -> bool:
        """Nonnegative form up to tolerance (stable or marginal)."""
        return self.classification != UNSTABLE

    def as_dict(self) -> dict:
        return {
            "classification": self.classification,
            "eig_residual": self.eig_residual,
            "lambda_min": self.lambda_min,
            "tolerance": self.tolerance,
        }

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.as_dict().items()))


def _fmt(v):
    return f"{v:.12g}" if isinstance(v, float) else str(v)


def assemble_stability_form(problem: NonlinearProblem, u: Field) -> sp.csr_matrix:
    # the second variation is the Jacobian of the weak residual
    return assemble_jacobian(problem, u)


def negative_count(A: sp.spmatrix) -> int:
    """Number of negative eigenvalues of a symmetric matrix (Sylvester inertia).

    Uses a symmetric-mode sparse LU with diagonal pivoting, i.e. an LDL^T
    factorisation with a symmetric fill-reducing ordering.
    """
    lu = spla.splu(
        sp.csc_matrix(A),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise EigenSolverError("LU factorisation used off-diagonal pivots; inertia unavailable")
    return int(np.count_nonzero(lu.U.diagonal() < 0))


def _lower_shift(Q, M) -> float:
    """A shift strictly below the spectrum of ``(Q, M)``, verified by inertia."""
    d = Q.diagonal() / M.diagonal()
    # Rayleigh quotients of nodal hats bound the minimum from above; start below
    sigma = min(0.0, float(d.min())) - 1.0
    offdiag = abs(Q - sp.diags(Q.diagonal())).sum(axis=1)
    sigma = min(sigma, -float(np.max(np.asarray(offdiag).ravel() / M.diagonal())) * 1e-3 - 1.0)
    for _ in range(60):
        try:
            if negative_count(Q - sigma * M) == 0:
                return sigma
        except RuntimeError:
            pass
        sigma = 2.0 * sigma - 1.0
    raise EigenSolverError("could not find a shift below the spectrum")


def smallest_eigenpairs(Q, M, k: int = 1):
    """The ``k`` smallest eigenpairs of ``Q x = lambda M x`` (M-orthonormal)."""
    Q = sp.csr_matrix(Q)
    M = sp.csr_matrix(M)
    n = Q.shape[0]
    sigma = _lower_shift(Q, M)
    lu = spla.splu((Q - sigma * M).tocsc())
    OPinv = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    v0 = np.ones(n) + 0.01 * np.cos(np.arange(n))
    try:
        vals, vecs = spla.eigsh(Q, k=k, M=M, sigma=sigma, which="LM", OPinv=OPinv,
                                v0=v0, ncv=max(2 * k + 1, 20), maxiter=5000)
    except spla.ArpackNoConvergence as exc:
        best = exc.eigenvectors[:, 0] if exc.eigenvectors.size else None
        raise EigenSolverError("eigensolver stagnated", best=best) from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    for j in range(vecs.shape[1]):
        v = vecs[:, j]
        v = v / np.sqrt(v @ (M @ v))
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vecs[:, j] = v
    return vals, vecs


def _residual(Q, M, lam, v) -> float:
    Mv = M @ v
    return float(np.linalg.norm(Q @ v - lam * Mv) / np.linalg.norm(Mv))


def smallest_eigenpair(Q, M, mesh=None):
    """``(lambda_min, eigenvector)``; a Field if ``mesh`` is given."""
    vals, vecs = smallest_eigenpairs(Q, M, k=1)
    lam, v = float(vals[0]), vecs[:, 0]
    res = _residual(Q, M, lam, v)
    if res > 1e-8:
        raise EigenSolverError("eigenpair residual above 1e-8", best=v, residual=res)
    return lam, (Field(mesh, v) if mesh is not None else v)


def default_tolerance(problem: NonlinearProblem, u: Field) -> float:
    """``1e-6`` times the size of the zeroth-order coefficients (at least 1)."""
    scale = max(1.0, float(np.max(np.abs(problem.f.deriv(u.values)))))
    b = u.values[u.mesh.boundary_nodes]
    scale = max(scale, float(np.max(np.abs(problem.h.deriv(b)))))
    return 1e-6 * scale


def classify(problem: NonlinearProblem, u: Field, tolerance: float = None) -> StabilityReport:
    Q = assemble_stability_form(problem, u)
    M = mass_matrix(u.mesh)
    tol = default_tolerance(problem, u) if tolerance is None else float(tolerance)
    lam, phi = smallest_eigenpair(Q, M, mesh=u.mesh)
    if lam < -tol:
        label = UNSTABLE
    elif lam > tol:
        label = STABLE
    else:
        label = MARGINAL
    return StabilityReport(
        lambda_min=lam,
        eigenfunction=phi,
        classification=label,
        eig_residual=_residual(Q, M, lam, phi.values),
        tolerance=tol,
    )

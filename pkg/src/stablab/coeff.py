"""Quasilinear coefficient families ``a(t)`` and the operator matrix ``A(xi)``.

A family describes the scalar diffusion coefficient of the operator
``div(a(|grad u|) grad u)``.  Three families are built in (Laplacian,
p-Laplacian, mean curvature); arbitrary families can be supplied as tables.

All callables on a family accept numpy arrays and are vectorised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "CoefficientFamily",
    "DomainError",
    "StructuralReport",
    "EPS_GRAD",
    "laplacian",
    "p_laplacian",
    "mean_curvature",
    "tabulated",
    "load_tabulated",
    "family_from_name",
    "eval_a",
    "eval_a_prime",
    "eval_lambda1",
    "matrix_A",
    "check_structural",
]

#: gradients with magnitude below this are treated as zero
EPS_GRAD = 1e-10


class DomainError(ValueError):
    """Coefficient evaluated outside the set where it is defined."""


@dataclass(frozen=True)
class CoefficientFamily:
    name: str
    a: Callable[[np.ndarray], np.ndarray]
    a_prime: Callable[[np.ndarray], np.ndarray]
    zero_limit: Optional[float] = None
    regular_at_zero: bool = False
    parameters: dict = field(default_factory=dict)
    # (t_min, t_max) of a tabulated family; evaluation outside is clamped
    table_range: Optional[tuple] = None
    # closed form of ``a(t) + a'(t) t`` where the sum would cancel
    lambda1: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.regular_at_zero and (
            self.zero_limit is None or not math.isfinite(self.zero_limit)
        ):
            raise ValueError(
                f"family {self.name!r}: regular_at_zero requires a finite zero_limit"
            )

    def describe(self) -> str:
        params = " ".join(f"{k}={v}" for k, v in sorted(self.parameters.items()))
        return f"{self.name} {params}".strip()


# -- built-in families --------------------------------------------------------


def laplacian() -> CoefficientFamily:
    return CoefficientFamily(
        name="laplacian",
        a=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        a_prime=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        zero_limit=1.0,
        regular_at_zero=True,
        lambda1=lambda t: np.ones_like(np.asarray(t, dtype=float)),
    )


def p_laplacian(p: float) -> CoefficientFamily:
    """``a(t) = t**(p-2)``.

    For ``p < 2`` the coefficient blows up at the origin, so only
    nondegenerate gradients are admissible.  For ``p >= 2`` the map
    ``t -> t a(t)`` is C^1 up to zero and ``a(0)`` is finite.
    """
    p = float(p)
    if not p > 1.0:
        raise ValueError(f"p-Laplacian needs p > 1, got {p}")
    if p == 2.0:
        fam = laplacian()
        return CoefficientFamily(
            name="p-laplacian",
            a=fam.a,
            a_prime=fam.a_prime,
            zero_limit=1.0,
            regular_at_zero=True,
            parameters={"p": p},
            lambda1=fam.lambda1,
        )

    def a(t):
        return np.power(np.asarray(t, dtype=float), p - 2.0)

    def a_prime(t):
        return (p - 2.0) * np.power(np.asarray(t, dtype=float), p - 3.0)

    def lambda1(t):
        return (p - 1.0) * np.power(np.asarray(t, dtype=float), p - 2.0)

    regular = p > 2.0
    return CoefficientFamily(
        name="p-laplacian",
        a=a,
        a_prime=a_prime,
        zero_limit=0.0 if regular else None,
        regular_at_zero=regular,
        parameters={"p": p},
        lambda1=lambda1,
    )


def mean_curvature() -> CoefficientFamily:
    def a(t):
        t = np.asarray(t, dtype=float)
        return 1.0 / np.sqrt(1.0 + t * t)

    def a_prime(t):
        t = np.asarray(t, dtype=float)
        return -t / (1.0 + t * t) ** 1.5

    def lambda1(t):
        t = np.asarray(t, dtype=float)
        return (1.0 + t * t) ** -1.5

    return CoefficientFamily(
        name="mean-curvature", a=a, a_prime=a_prime, zero_limit=1.0, regular_at_zero=True,
        lambda1=lambda1,
    )


def tabulated(t, a, a_prime, name: str = "tabulated") -> CoefficientFamily:
    """Family interpolated from samples with monotone cubic (PCHIP) splines.

    Queries outside the sampled range are clamped to the nearest sample;
    :func:`check_structural` flags grid points where that happened.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    a_prime = np.asarray(a_prime, dtype=float)
    if t.ndim != 1 or t.size < 2 or a.shape != t.shape or a_prime.shape != t.shape:
        raise ValueError("tabulated family needs matching 1-D arrays with >= 2 rows")
    if np.any(np.diff(t) <= 0):
        raise ValueError("tabulated family: t must be strictly increasing")
    if t[0] < 0:
        raise ValueError("tabulated family: t must be nonnegative")
    lo, hi = float(t[0]), float(t[-1])
    a_int = PchipInterpolator(t, a, extrapolate=False)
    ap_int = PchipInterpolator(t, a_prime, extrapolate=False)

    def a_fn(s):
        return a_int(np.clip(np.asarray(s, dtype=float), lo, hi))

    def ap_fn(s):
        return ap_int(np.clip(np.asarray(s, dtype=float), lo, hi))

    regular = lo == 0.0
    return CoefficientFamily(
        name=name,
        a=a_fn,
        a_prime=ap_fn,
        zero_limit=float(a[0]) if regular else None,
        regular_at_zero=regular,
        parameters={"rows": int(t.size)},
        table_range=(lo, hi),
    )


def load_tabulated(path) -> CoefficientFamily:
    """Read a ``t a aprime`` table (one header line, whitespace separated)."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0].split() != ["t", "a", "aprime"]:
        raise ValueError(f"{path}: expected header line 't a aprime'")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    data = np.array(rows)
    return tabulated(data[:, 0], data[:, 1], data[:, 2], name=f"tabulated:{path.name}")


def family_from_name(name: str, **params) -> CoefficientFamily:
    name = name.strip().lower()
    if name == "laplacian":
        return laplacian()
    if name in ("p-laplacian", "p_laplacian", "plaplacian"):
        if "p" not in params:
            raise ValueError("p-laplacian family requires parameter p")
        return p_laplacian(float(params["p"]))
    if name in ("mean-curvature", "mean_curvature"):
        return mean_curvature()
    if name == "tabulated":
        if "path" not in params:
            raise ValueError("tabulated family requires parameter path")
        return load_tabulated(params["path"])
    raise ValueError(f"unknown coefficient family {name!r}")


# -- evaluation ----------------------------------------------------------------


def eval_a(family: CoefficientFamily, t, eps_grad: float = EPS_GRAD):
    """``a(t)``; values of ``t`` below ``eps_grad`` are treated as zero."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("a(t) is defined for t >= 0 only")
    small = t < eps_grad
    if np.any(small):
        if not family.regular_at_zero:
            raise DomainError(
                f"family {family.name!r} is not defined at t=0 (gradient must not vanish)"
            )
        safe = np.where(small, 1.0, t)
        out = np.where(small, family.zero_limit, family.a(safe))
    else:
        out = family.a(t)
    return out if out.ndim else float(out)


def eval_a_prime(family: CoefficientFamily, t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("a'(t) is evaluated for t > 0 only")
    out = family.a_prime(t)
    return out if np.ndim(out) else float(out)


def eval_lambda1(family: CoefficientFamily, t):
    """``lambda_1(t) = a(t) + a'(t) t``, the eigenvalue of ``A`` along ``xi``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("lambda_1(t) is defined for t > 0 only")
    out = _lambda1(family, t)
    return out if np.ndim(out) else float(out)


def _lambda1(family: CoefficientFamily, t):
    if family.lambda1 is not None:
        return family.lambda1(t)
    return family.a(t) + family.a_prime(t) * t


def matrix_A(family: CoefficientFamily, xi, eps_grad: float = EPS_GRAD) -> np.ndarray:
    """``A(xi) = a'(|xi|)/|xi| xi xi^T + a(|xi|) I``.

    ``xi`` may be a single 2-vector or an ``(n, 2)`` stack, in which case an
    ``(n, 2, 2)`` array is returned.  At ``|xi| < eps_grad`` the matrix is
    ``a(0) I`` for families regular at zero.
    """
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    t = np.linalg.norm(xi, axis=1)
    small = t < eps_grad
    if np.any(small) and not family.regular_at_zero:
        raise DomainError(
            f"A(xi) undefined at xi=0 for family {family.name!r}"
        )
    ts = np.where(small, 1.0, t)
    a0 = family.zero_limit if family.regular_at_zero else 0.0
    a = np.where(small, a0, family.a(ts))
    lam = np.where(small, a0, _lambda1(family, ts))
    # spectral form lambda_1 n n^T + a m m^T with m = n rotated by 90 degrees;
    # unlike a I + a'/t xi xi^T it has no cancellation when lambda_1 << a
    n = np.where(small[:, None], np.array([1.0, 0.0]), xi / ts[:, None])
    m = np.stack([-n[:, 1], n[:, 0]], axis=1)
    # each outer product is exactly symmetric, so A is too
    A = lam[:, None, None] * (n[:, :, None] * n[:, None, :]) + a[:, None, None] * (m[:, :, None] * m[:, None, :])
    # isotropic rows (e.g. the Laplacian) stay exactly a I
    iso = lam == a
    A[iso] = a[iso, None, None] * np.eye(2)
    return A[0] if single else A


@dataclass
class StructuralReport:
    cond1_violations: list  # t values with a(t) <= 0
    cond2_violations: list  # t values with a(t) + a'(t) t <= 0
    clamped: list  # t values outside a tabulated family's range

    @property
    def passed(self) -> bool:
        return not self.cond1_violations and not self.cond2_violations

    def __str__(self):
        if self.passed and not self.clamped:
            return "structural conditions: pass"
        parts = []
        if self.cond1_violations:
            parts.append(f"a(t)>0 violated at t={self.cond1_violations}")
        if self.cond2_violations:
            parts.append(f"a(t)+a'(t)t>0 violated at t={self.cond2_violations}")
        if self.clamped:
            parts.append(f"clamped outside table at t={self.clamped}")
        return "; ".join(parts) if parts else "structural conditions: pass"


def check_structural(family: CoefficientFamily, t_grid) -> StructuralReport:
    t = np.asarray(t_grid, dtype=float).ravel()
    if t.size == 0 or np.any(t <= 0):
        raise ValueError("t_grid must be a nonempty list of positive values")
    a = np.asarray(family.a(t), dtype=float)
    lam = a + np.asarray(family.a_prime(t), dtype=float) * t
    clamped = []
    if family.table_range is not None:
        lo, hi = family.table_range
        clamped = [float(x) for x in t if x < lo or x > hi]
    return StructuralReport(
        cond1_violations=[float(x) for x in t[~(a > 0)]],
        cond2_violations=[float(x) for x in t[~(lam > 0)]],
        clamped=clamped,
    )

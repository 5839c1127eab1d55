import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import get_mesh
from stablab.coeff import laplacian
from stablab.fem import Field, NonlinearProblem, ScalarFunction, mass_matrix, stiffness_matrix
from stablab.stability import (
    assemble_stability_form,
    classify,
    negative_count,
    smallest_eigenpair,
    smallest_eigenpairs,
)

ZERO = ScalarFunction.zero()


def _problem(f=ZERO, h=ZERO):
    return NonlinearProblem(laplacian(), f, h)


def test_pure_dirichlet_energy(disk):
    u = Field(disk, np.sin(3 * disk.nodes[:, 0]))
    Q = assemble_stability_form(_problem(), u)
    assert abs(Q - stiffness_matrix(disk)).max() < 1e-14
    one = np.ones(disk.n_nodes)
    assert abs(one @ Q @ one) < 1e-12


def test_constant_state_form_on_constants(disk):
    c = 0.5
    s = 1.0 - 3.0 * c**2
    Q = assemble_stability_form(_problem(f=ScalarFunction.bistable()), Field.constant(disk, c))
    one = np.ones(disk.n_nodes)
    assert one @ Q @ one == pytest.approx(-s * disk.area, rel=1e-12)


def test_robin_boundary_term_on_constants(disk):
    alpha = 0.7
    Q = assemble_stability_form(_problem(h=ScalarFunction.linear(alpha)), Field.constant(disk, 0.0))
    one = np.ones(disk.n_nodes)
    assert one @ Q @ one == pytest.approx(alpha * disk.perimeter, rel=1e-12)


def test_neumann_ground_state_and_shift(square):
    K, M = stiffness_matrix(square), mass_matrix(square)
    lam, phi = smallest_eigenpair(K, M, mesh=square)
    assert abs(lam) < 1e-9
    assert np.ptp(phi.values) < 1e-6 * np.max(np.abs(phi.values))
    lam, _ = smallest_eigenpair(K - M, M)
    assert lam == pytest.approx(-1.0, abs=1e-9)


def test_second_neumann_eigenvalue_of_square():
    mesh = get_mesh("rectangle", 0.04)
    vals, vecs = smallest_eigenpairs(stiffness_matrix(mesh), mass_matrix(mesh), k=3)
    assert vals[1] == pytest.approx(np.pi**2, rel=2e-2)
    # pi^2 is double on the square (cos(pi x), cos(pi y)); the mesh splits it at O(h^2)
    assert vals[2] == pytest.approx(vals[1], rel=1e-3)
    M = mass_matrix(mesh)
    np.testing.assert_allclose(vecs.T @ M @ vecs, np.eye(3), atol=1e-8)


def test_classify_constant_bistable_states(disk):
    problem = _problem(f=ScalarFunction.bistable())
    rep = classify(problem, Field.constant(disk, 1.0))
    assert rep.lambda_min == pytest.approx(2.0, abs=1e-9)
    assert rep.classification == "stable"
    assert rep.eig_residual <= 1e-8
    rep = classify(problem, Field.constant(disk, 0.0))
    assert rep.lambda_min == pytest.approx(-1.0, abs=1e-9)
    assert rep.classification == "unstable"
    assert not rep.weakly_stable


def test_zero_solution_of_robin_problem(disk):
    rep = classify(_problem(h=ScalarFunction.linear(0.0)), Field.constant(disk, 0.0))
    assert rep.classification == "marginal" and rep.weakly_stable
    rep = classify(_problem(h=ScalarFunction.linear(1.0)), Field.constant(disk, 0.0))
    assert rep.classification == "stable"


def test_report_text_is_sorted(disk):
    rep = classify(_problem(f=ScalarFunction.bistable()), Field.constant(disk, 1.0))
    keys = [ln.split(" = ")[0] for ln in rep.to_text().splitlines()]
    assert keys == sorted(keys) == ["classification", "eig_residual", "lambda_min", "tolerance"]


@given(st.floats(-2.0, 2.0), st.floats(0.01, 2.0))
@settings(max_examples=10, deadline=None)
def test_lambda_min_monotone_in_alpha(alpha, step):
    mesh = get_mesh("disk", 0.2)
    zero = Field.constant(mesh, 0.0)
    lo = classify(_problem(h=ScalarFunction.linear(alpha)), zero).lambda_min
    hi = classify(_problem(h=ScalarFunction.linear(alpha + step)), zero).lambda_min
    assert hi > lo


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_lambda_min_bounds_rayleigh_quotients(seed):
    mesh = get_mesh("disk", 0.2)
    rng = np.random.default_rng(seed)
    u = Field(mesh, 0.8 * np.cos(rng.uniform(0.5, 3.0) * mesh.nodes[:, 0]))
    problem = _problem(f=ScalarFunction.bistable(5.0))
    rep = classify(problem, u)
    Q = assemble_stability_form(problem, u)
    M = mass_matrix(mesh)
    for _ in range(5):
        v = rng.normal(size=mesh.n_nodes)
        assert (v @ Q @ v) / (v @ M @ v) >= rep.lambda_min - 1e-10


@given(st.integers(0, 2**32 - 1), st.floats(-30.0, 30.0))
@settings(max_examples=15, deadline=None)
def test_negative_count_matches_dense(seed, sigma):
    mesh = get_mesh("disk", 0.3)
    rng = np.random.default_rng(seed)
    u = Field(mesh, rng.uniform(-1, 1, mesh.n_nodes))
    Q = assemble_stability_form(_problem(f=ScalarFunction.bistable(10.0)), u)
    A = Q - sigma * mass_matrix(mesh)
    ev = np.linalg.eigvalsh(A.toarray())
    if np.min(np.abs(ev)) < 1e-8:
        return
    assert negative_count(A) == int(np.sum(ev < 0))


def test_negative_count_diagonal():
    assert negative_count(sp.diags([1.0, -2.0, 3.0, -4.0])) == 2

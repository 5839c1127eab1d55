import numpy as np
import pytest

from conftest import get_mesh
from stablab.coeff import laplacian, p_laplacian
from stablab.fem import DegenerateGradientError, Field, NonlinearProblem, ScalarFunction
from stablab.solver import LinearSolverError, NewtonOptions, cosine_seed, solve, solve_linear_robin

ZERO = ScalarFunction.zero()


def test_unique_constant_root(disk):
    problem = NonlinearProblem(laplacian(), ScalarFunction.linear(-1.0, 1.0), ZERO)
    u, rep = solve(problem, disk, Field.constant(disk, 0.0))
    assert rep.converged
    np.testing.assert_allclose(u.values, 1.0, atol=1e-10)
    assert rep.final_residual <= 1e-10


def test_homogeneous_robin_decays_to_zero(disk):
    problem = NonlinearProblem(laplacian(), ZERO, ScalarFunction.linear(1.0))
    u, rep = solve(problem, disk, Field.constant(disk, 1.0))
    assert rep.converged
    np.testing.assert_allclose(u.values, 0.0, atol=1e-10)


def test_bistable_basin_of_one(disk):
    problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(), ZERO)
    u, rep = solve(problem, disk, Field.constant(disk, 0.9))
    assert rep.converged
    np.testing.assert_allclose(u.values, 1.0, atol=1e-10)
    # Newton from a nearby constant converges quadratically
    r = rep.residual_history
    assert all(b <= 1e3 * a**2 for a, b in zip(r, r[1:]) if a > 1e-12)


def test_history_csv(disk):
    problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(), ZERO)
    _, rep = solve(problem, disk, Field.constant(disk, 0.9))
    lines = rep.history_csv().splitlines()
    assert lines[0] == "iter,residual,step_length"
    assert len(lines) == rep.iterations + 2
    assert lines[1].split(",")[2] == "nan"


def test_non_convergence_is_reported(disk):
    problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(10.0), ZERO)
    u, rep = solve(problem, disk, cosine_seed(disk, 0.0, 0.8, (2.0, 0.0)), NewtonOptions(max_iterations=1))
    assert not rep.converged
    assert rep.iterations == 1
    assert "no convergence" in rep.message


def test_singular_jacobian_names_iteration(disk):
    problem = NonlinearProblem(laplacian(), ZERO, ZERO)
    with pytest.raises(LinearSolverError, match="iteration 0"):
        solve(problem, disk, Field(disk, disk.nodes[:, 0].copy()))


def test_degenerate_gradient_propagates(disk):
    problem = NonlinearProblem(p_laplacian(1.5), ScalarFunction.linear(-1.0, 1.0), ZERO)
    with pytest.raises(DegenerateGradientError):
        solve(problem, disk, Field.constant(disk, 0.5))


def test_p_continuation(disk):
    problem = NonlinearProblem(p_laplacian(3), ScalarFunction.linear(-1.0, 1.0), ZERO)
    seed = cosine_seed(disk, 0.5, 0.2, (1.0, 0.0))
    u, rep = solve(problem, disk, seed, NewtonOptions(continuation_steps=3))
    assert rep.converged
    np.testing.assert_allclose(u.values, 1.0, atol=1e-8)


def test_guess_on_other_mesh_rejected(disk):
    other = get_mesh("disk", 0.2)
    with pytest.raises(ValueError):
        solve(NonlinearProblem(laplacian(), ZERO, ZERO), disk, Field.constant(other, 0.0))


@pytest.mark.parametrize("kwargs", [dict(max_iterations=0), dict(damping=1.0), dict(residual_tolerance=0.0)])
def test_options_validated(kwargs):
    with pytest.raises(ValueError):
        NewtonOptions(**kwargs)


def test_solution_is_permutation_equivariant(rng):
    mesh = get_mesh("disk", 0.1)
    perm = rng.permutation(mesh.n_nodes)
    other = mesh.permuted(perm)
    problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(10.0), ZERO)
    u, rep = solve(problem, mesh, cosine_seed(mesh, 0.0, 0.8, (2.0, 0.0)))
    v, rep2 = solve(problem, other, cosine_seed(other, 0.0, 0.8, (2.0, 0.0)))
    assert rep.converged and rep2.converged
    np.testing.assert_allclose(v.values[perm], u.values, atol=1e-8)


def test_linear_robin_kernel_and_defect(disk, square):
    phi, defect = solve_linear_robin(0.0, 0.0, disk)
    assert defect < 1e-8
    assert np.ptp(phi.values) < 1e-8
    _, defect = solve_linear_robin(1.0, 0.0, disk)
    assert defect > 1.0
    defects = [solve_linear_robin(0.0, np.pi**2, get_mesh("rectangle", h))[1] for h in (0.08, 0.04)]
    assert defects[1] < defects[0] < 0.02 * np.pi**2

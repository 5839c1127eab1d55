import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dumbbell_solution, get_mesh
from stablab.coeff import laplacian, p_laplacian
from stablab.fem import DegenerateGradientError, Field, NonlinearProblem, ScalarFunction
from stablab.levelset import (
    PoincareBreakdown,
    curvature_identity_residual,
    dump_levelset,
    instability_witness,
    levelset_quantities,
    poincare_breakdown,
    random_smooth_test_function,
)


def test_affine_field_has_flat_level_sets(disk):
    u = Field(disk, disk.nodes[:, 0].copy())
    d = levelset_quantities(u)
    assert not d.mask.any()
    np.testing.assert_allclose(d.curvature, 0.0, atol=1e-8)
    np.testing.assert_allclose(d.tangential_grad_norm, 0.0, atol=1e-8)
    np.testing.assert_allclose(d.grad_norm, 1.0, atol=1e-10)
    assert np.max(np.abs(curvature_identity_residual(u))) < 1e-12


def test_radial_field_curvature_is_inverse_radius():
    mesh = get_mesh("annulus", 0.05)
    x, y = mesh.nodes.T
    r = np.hypot(x, y)
    d = levelset_quantities(Field(mesh, 0.5 * (x**2 + y**2)))
    np.testing.assert_allclose(d.grad_norm, r, rtol=1e-8)
    np.testing.assert_allclose(d.curvature, 1.0 / r, rtol=1e-6)
    assert np.max(d.tangential_grad_norm) < 1e-6


def test_radial_field_on_disk_masks_the_centre():
    mesh = get_mesh("disk", 0.1)
    x, y = mesh.nodes.T
    d = levelset_quantities(Field(mesh, 0.5 * (x**2 + y**2)), eps_grad=1e-6)
    centre = np.argmin(np.hypot(x, y))
    assert d.mask[centre] and d.curvature[centre] == 0.0
    away = np.hypot(x, y) > 0.3
    np.testing.assert_allclose(d.curvature[away], 1.0 / np.hypot(x, y)[away], rtol=1e-2)


def test_hyperbola_curvature():
    # disk of radius 1 around (1, 1): its centre node sits exactly at (1, 1)
    mesh = get_mesh("disk", 0.05).transformed(shift=(1.0, 1.0))
    x, y = mesh.nodes.T
    d = levelset_quantities(Field(mesh, x * y))
    # closed form for u = x y: k1 = -2 x y / (x^2 + y^2)^(3/2), so -1/sqrt(2) at (1, 1)
    far = np.hypot(x, y) > 0.2
    np.testing.assert_allclose(d.curvature[far], (-2 * x * y / (x**2 + y**2) ** 1.5)[far],
                               rtol=1e-6, atol=1e-10)
    i = np.argmin(np.hypot(x - 1, y - 1))
    assert np.hypot(x[i] - 1, y[i] - 1) < 1e-12
    assert d.curvature[i] == pytest.approx(-1 / np.sqrt(2), rel=1e-6)
    assert d.grad_norm[i] == pytest.approx(np.sqrt(2), rel=1e-8)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_tangential_part_is_dominated(seed):
    mesh = get_mesh("disk", 0.15)
    u = random_smooth_test_function(mesh, np.random.default_rng(seed))
    d = levelset_quantities(u)
    full = np.linalg.norm(d.grad_of_grad_norm, axis=1)
    assert np.all(d.tangential_grad_norm <= full + 1e-12)


def test_identity_residual_decays_for_smooth_field():
    maxes = []
    for h in (0.08, 0.04, 0.02):
        mesh = get_mesh("disk", h)
        x, y = mesh.nodes.T
        maxes.append(np.max(np.abs(curvature_identity_residual(Field(mesh, np.sin(x) * np.cosh(y))))))
    assert maxes[2] < 0.65 * maxes[1] < 0.65**2 * maxes[0]


def test_constant_solution_breakdown_is_zero(disk):
    problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(), ScalarFunction.zero())
    phi = random_smooth_test_function(disk, np.random.default_rng(3))
    b = poincare_breakdown(problem, Field.constant(disk, 1.0), phi)
    assert b.as_row() == [0.0, 0.0, 0.0, 0.0, 0.0]


def test_stable_nonconstant_solution_with_unit_phi():
    problem, u = dumbbell_solution()
    b = poincare_breakdown(problem, u, Field.constant(u.mesh, 1.0))
    assert b.rhs == pytest.approx(0.0, abs=1e-20)
    assert b.interior_lhs + b.boundary_term <= 0.08
    assert b.slack == pytest.approx(b.rhs - b.interior_lhs - b.boundary_term)


def test_interior_sides_agree_and_are_nonnegative(rng):
    problem, u = dumbbell_solution()
    for _ in range(5):
        b = poincare_breakdown(problem, u, random_smooth_test_function(u.mesh, rng))
        assert b.interior_lhs >= 0.0
        assert abs(b.hessian_form_lhs - b.interior_lhs) <= 0.05 * b.interior_lhs
        assert b.slack >= -0.08


def test_columns_order():
    assert PoincareBreakdown.COLUMNS == ("interior_lhs", "boundary_term", "rhs", "slack", "hessian_form_lhs")
    b = PoincareBreakdown(1.0, 2.0, 3.0, 0.0, 4.0)
    assert b.as_row() == [1.0, 2.0, 3.0, 0.0, 4.0]


def test_degenerate_gradient_for_singular_family(disk):
    problem = NonlinearProblem(p_laplacian(1.5), ScalarFunction.zero(), ScalarFunction.zero())
    with pytest.raises(DegenerateGradientError):
        poincare_breakdown(problem, Field.constant(disk, 1.0), Field.constant(disk, 1.0))


def test_instability_witness_floor(disk):
    x, y = disk.nodes.T
    u = Field(disk, 0.5 * (x**2 + y**2))
    psi = Field(disk, np.ones(disk.n_nodes))
    w = instability_witness(u, psi, floor=1e-2)
    assert np.all(np.isfinite(w.values))
    assert np.max(w.values) <= 1.0 / (1e-2 * np.max(np.hypot(x, y))) + 1e-9
    assert np.all(instability_witness(Field.constant(disk, 2.0), psi).values == 0.0)


def test_dump_levelset(tmp_path):
    mesh = get_mesh("disk", 0.1)
    x, y = mesh.nodes.T
    path = tmp_path / "ls.txt"
    dump_levelset(Field(mesh, 0.5 * (x**2 + y**2)), path, eps_grad=1e-6)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# node grad_norm[1] k1[1/length]")
    assert len(lines) == mesh.n_nodes + 1
    centre = int(np.argmin(np.hypot(x, y)))
    assert lines[1 + centre] == f"{centre} nan nan nan nan"
    assert [int(ln.split()[0]) for ln in lines[1:]] == list(range(mesh.n_nodes))

import sys

import numpy as np
import pytest

from stablab.mesh import DomainSpec, generate

_CACHE = {}


def get_mesh(kind="disk", h=0.08, **kw):
    """Generated meshes are deterministic, so share them across tests."""
    key = (kind, h, tuple(sorted(kw.items())))
    if key not in _CACHE:
        _CACHE[key] = generate(DomainSpec(kind=kind, h=h, **kw))
    return _CACHE[key]


@pytest.fixture
def disk():
    return get_mesh("disk", 0.1)


@pytest.fixture
def square():
    return get_mesh("rectangle", 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_SOLUTIONS = {}


def dumbbell_solution(h=0.08):
    """Nonconstant stable Neumann state of the bistable problem on the dumbbell."""
    from stablab.certify import blended_seed
    from stablab.coeff import laplacian
    from stablab.fem import NonlinearProblem, ScalarFunction
    from stablab.solver import solve

    if h not in _SOLUTIONS:
        mesh = get_mesh("dumbbell", h)
        problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(), ScalarFunction.zero())
        u, rep = solve(problem, mesh, blended_seed(mesh))
        assert rep.converged
        _SOLUTIONS[h] = (problem, u)
    return _SOLUTIONS[h]


def disk_pattern_solution(h=0.08):
    """Nonconstant (unstable) Neumann state of ``Lap u + 10 (u - u^3) = 0`` on the disk."""
    from stablab.coeff import laplacian
    from stablab.fem import NonlinearProblem, ScalarFunction
    from stablab.solver import cosine_seed, solve

    key = ("disk", h)
    if key not in _SOLUTIONS:
        mesh = get_mesh("disk", h)
        problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(10.0), ScalarFunction.zero())
        u, rep = solve(problem, mesh, cosine_seed(mesh, 0.0, 0.8, (2.0, 0.0)))
        assert rep.converged
        _SOLUTIONS[key] = (problem, u)
    return _SOLUTIONS[key]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

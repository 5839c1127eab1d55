import hashlib

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import get_mesh
from stablab.cli import emit_plot_data, main
from stablab.coeff import laplacian
from stablab.config import ConfigError, parse_config, parse_domain_spec
from stablab.fem import Field, NonlinearProblem, ScalarFunction
from stablab.levelset import PoincareBreakdown
from stablab.mesh import load_mesh
from stablab.stability import classify


def _run(tmp_path, text, *args, name="run.cfg"):
    cfg = tmp_path / name
    cfg.write_text(text)
    out = tmp_path / (name + ".out")
    result = CliRunner().invoke(main, ["run", str(cfg), "--output-dir", str(out), *args])
    return result, out


def _report(out):
    pairs = {}
    for line in (out / "run.report").read_text().splitlines():
        key, _, value = line.partition(" = ")
        pairs[key] = value
    return pairs


# -- configuration -----------------------------------------------------------------


def test_parse_config_defaults_and_comments():
    cfg = parse_config("# a comment\nscenario = neumann-rigidity  # trailing\n\ndomain.h = 0.05\n")
    assert cfg.domain.kind == "disk" and cfg.domain.h == 0.05
    assert cfg.nonlinearity(np.array([0.5]))[0] == pytest.approx(10 * (0.5 - 0.125))
    echo = cfg.echo()
    assert echo["config.seed"] == "0"
    assert echo["config.mesh_levels"] == "3"
    assert echo["config.seeds.constants"] == "-0.9, 0.0, 0.9"


@pytest.mark.parametrize("text, line, message", [
    ("scenario = dumbbell\nbogus.key = 3\n", 2, "unknown key"),
    ("scenario = dumbbell\ndomain.h = fine\n", 2, "bad value"),
    ("scenario = dumbbell\njust words\n", 2, "expected 'key = value'"),
    ("scenario = warp-drive\n", 1, "unknown scenario"),
    ("scenario = dumbbell\nseed = 1\nseed = 2\n", 3, "duplicate"),
])
def test_config_errors_name_the_line(text, line, message):
    with pytest.raises(ConfigError, match=message) as err:
        parse_config(text, source="x.cfg")
    assert err.value.line == line
    assert f"x.cfg:{line}:" in str(err.value)


def test_required_and_infeasible_fields():
    with pytest.raises(ConfigError, match="robin_alpha"):
        parse_config("scenario = robin-certificate\n")
    with pytest.raises(ConfigError, match="scenario"):
        parse_config("domain.h = 0.1\n")
    with pytest.raises(ConfigError, match="neck"):
        parse_config("scenario = dumbbell\ndomain.neck_width = 3\n")
    with pytest.raises(ConfigError, match="p-laplacian"):
        parse_config("scenario = dumbbell\nfamily.name = p-laplacian\n")


def test_domain_spec_strings():
    spec = parse_domain_spec("dumbbell:h=0.04,neck_width=0.2")
    assert spec.kind == "dumbbell" and spec.h == 0.04 and spec.neck_width == 0.2
    with pytest.raises(ConfigError):
        parse_domain_spec("disk:colour=red")
    with pytest.raises(ConfigError):
        parse_domain_spec("disk:h=-1")


# -- commands ----------------------------------------------------------------------


def test_validate_echoes_resolved_config(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("scenario = identity-suite\n")
    result = CliRunner().invoke(main, ["validate", str(cfg)])
    assert result.exit_code == 0
    assert "config.identity.field = sincosh" in result.output
    cfg.write_text("scenario = identity-suite\nnope = 1\n")
    result = CliRunner().invoke(main, ["validate", str(cfg)])
    assert result.exit_code == 1
    assert "a.cfg:2: unknown key 'nope'" in result.output


def test_mesh_command(tmp_path):
    out = tmp_path / "d.mesh"
    result = CliRunner().invoke(main, ["mesh", "disk:h=0.1,radius=2", "-o", str(out)])
    assert result.exit_code == 0
    mesh = load_mesh(out)
    assert np.max(np.linalg.norm(mesh.nodes, axis=1)) == pytest.approx(2.0)
    result = CliRunner().invoke(main, ["mesh", "blob:h=0.1", "-o", str(out)])
    assert result.exit_code == 1


def test_identity_suite_run(tmp_path):
    result, out = _run(tmp_path, "scenario = identity-suite\ndomain.h = 0.1\nmesh_levels = 3\n")
    assert result.exit_code == 0, result.output
    rows = (out / "identity_residual.csv").read_text().splitlines()
    assert rows[0] == "level,h,n_nodes,max_residual,mean_abs_residual"
    maxes = [float(r.split(",")[3]) for r in rows[1:]]
    assert len(maxes) == 3
    assert maxes[1] < 0.65 * maxes[0] and maxes[2] < 0.65 * maxes[1]
    rep = _report(out)
    assert rep["status"] == "pass"
    assert rep["config.domain.h"] == "0.1"
    assert rep["config.family.name"] == "laplacian"


def test_manifest_hashes(tmp_path):
    _, out = _run(tmp_path, "scenario = identity-suite\ndomain.h = 0.1\nmesh_levels = 2\n")
    lines = (out / "MANIFEST").read_text().splitlines()
    assert lines[0].startswith("# generated ")
    listed = {}
    for line in lines[1:]:
        digest, name = line.split("  ")
        listed[name] = digest
    assert "run.report" in listed and "levelset_L1.txt" in listed
    for name, digest in listed.items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_robin_alpha_zero_is_vacuous(tmp_path):
    result, out = _run(tmp_path, "scenario = robin-certificate\nrobin_alpha = 0\nmesh_levels = 2\n")
    assert result.exit_code == 0, result.output
    assert _report(out)["result.certificate"] == "vacuous (integral = 0)"


def test_neumann_rigidity_run_lists_solutions(tmp_path):
    text = "scenario = neumann-rigidity\ndomain.h = 0.1\nmesh_levels = 2\nseeds.count = 3\n"
    result, out = _run(tmp_path, text, "--seed", "99")
    assert result.exit_code == 0, result.output
    rep = _report(out)
    assert rep["config.seed"] == "99"
    sols = [k for k in rep if k.startswith("result.level1.solution")]
    assert len(sols) == 6
    assert rep["result.level1.solution0"].startswith("stable lambda_min=20")
    assert rep["result.level1.solution1"].startswith("unstable lambda_min=-10")
    csv = (out / "rigidity_L0.csv").read_text().splitlines()
    assert csv[0] == "seed,converged,iterations,oscillation,lambda_min,classification,violation"


def test_failed_assertion_exits_2(tmp_path):
    text = "scenario = identity-suite\ndomain.h = 0.1\nmesh_levels = 2\nidentity.max_ratio = 0.01\n"
    result, out = _run(tmp_path, text)
    assert result.exit_code == 2
    assert _report(out)["status"] == "fail"


def test_runtime_error_names_stage(tmp_path):
    result, _ = _run(tmp_path, "scenario = manufactured\ndomain.kind = rectangle\n")
    assert result.exit_code == 1
    assert "stage setup" in result.output


def test_missing_config_file(tmp_path):
    result = CliRunner().invoke(main, ["run", str(tmp_path / "absent.cfg")])
    assert result.exit_code == 1
    assert "cannot read config" in result.output


def test_mesh_level_override(tmp_path):
    result, out = _run(tmp_path, "scenario = identity-suite\ndomain.h = 0.1\n", "--mesh-level", "1")
    assert result.exit_code == 0
    assert _report(out)["config.mesh_levels"] == "1"
    assert not (out / "levelset_L1.txt").exists()


def test_runs_are_deterministic(tmp_path):
    text = ("scenario = neumann-rigidity\ndomain.h = 0.15\nmesh_levels = 1\nseeds.count = 3\n"
            "seed = 18446744073709551615\n")
    _, a = _run(tmp_path, text, name="a.cfg")
    _, b = _run(tmp_path, text, name="b.cfg")
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        if name == "MANIFEST":
            continue
        if name == "run.report":
            strip = lambda p: [l for l in p.read_text().splitlines()
                               if not l.startswith(("runtime_seconds", "config.output_dir"))]
            assert strip(a / name) == strip(b / name)
        else:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ma = (a / "MANIFEST").read_text().splitlines()[1:]
    mb = (b / "MANIFEST").read_text().splitlines()[1:]
    assert [l for l in ma if "run.report" not in l] == [l for l in mb if "run.report" not in l]


# -- plot data ---------------------------------------------------------------------


def test_emit_constant_field(tmp_path, disk):
    path = emit_plot_data(Field.constant(disk, 1.5), tmp_path / "f.txt")
    lines = path.read_text().splitlines()
    assert lines[0] == "# node[-] x[length] y[length] value[1]"
    assert {ln.split()[3] for ln in lines[1:]} == {"1.5"}
    assert [int(ln.split()[0]) for ln in lines[1:]] == list(range(disk.n_nodes))


def test_emit_stability_report(tmp_path, disk):
    problem = NonlinearProblem(laplacian(), ScalarFunction.bistable(), ScalarFunction.zero())
    rep = classify(problem, Field.constant(disk, 1.0))
    lines = emit_plot_data(rep, tmp_path / "s.txt").read_text().splitlines()
    assert len(lines) == 2
    keys = lines[0].lstrip("# ").split()
    assert keys == sorted(keys)
    values = dict(zip(keys, lines[1].split()))
    assert values["classification"] == "stable"
    assert float(values["lambda_min"]) == pytest.approx(2.0)


def test_emit_poincare_rows(tmp_path):
    rows = [PoincareBreakdown(1.0, 2.0, 3.0, 0.0, 1.5), PoincareBreakdown(0.5, 0.0, 1.0, 0.5, 0.5)]
    lines = emit_plot_data(rows, tmp_path / "p.txt").read_text().splitlines()
    assert lines[0] == "# interior_lhs[1] boundary_term[1] rhs[1] slack[1] hessian_form_lhs[1]"
    assert lines[1].split() == ["1.0", "2.0", "3.0", "0.0", "1.5"]


def test_emit_errors(tmp_path):
    mesh = get_mesh("disk", 0.3)
    with pytest.raises(OSError):
        emit_plot_data(Field.constant(mesh, 0.0), tmp_path / "missing" / "f.txt")
    with pytest.raises(TypeError):
        emit_plot_data({"a": 1}, tmp_path / "x.txt")

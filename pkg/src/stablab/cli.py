"""``stablab`` command line: run scenarios, validate configs, generate meshes.

Exit codes: 0 when every scenario assertion passes, 2 when one fails,
1 on configuration or runtime errors.
"""
from __future__ import annotations

import sys
import time
from pathlib import Path

import click

from .artifacts import ArtifactDir, emit_plot_data
from .config import ConfigError, load_config, parse_domain_spec
from .mesh import generate, save_mesh
from .scenarios import PipelineError, ScenarioResult, run_scenario

__all__ = ["main", "run", "emit_plot_data", "EXIT_OK", "EXIT_ERROR", "EXIT_ASSERT"]

EXIT_OK, EXIT_ERROR, EXIT_ASSERT = 0, 1, 2


def _fail(message: str) -> int:
    click.echo(f"error: {message}", err=True)
    return EXIT_ERROR


def _report(cfg, result: ScenarioResult, elapsed: float) -> str:
    lines = [f"{k} = {v}" for k, v in cfg.echo().items()]
    lines += [f"result.{k} = {v}" for k, v in result.values.items()]
    for c in result.checks:
        lines.append(f"assert.{c.name} = {'pass' if c.passed else 'FAIL'}  # {c.detail}")
    lines.append(f"runtime_seconds = {elapsed:.1f}")
    lines.append(f"status = {'pass' if result.passed else 'fail'}")
    return "\n".join(lines) + "\n"


def run(config_path, output_dir=None, seed=None, mesh_levels=None) -> int:
    """Run the scenario in ``config_path``; returns the exit status."""
    overrides = {}
    if output_dir is not None:
        overrides["output_dir"] = str(output_dir)
    if seed is not None:
        overrides["seed"] = int(seed)
    if mesh_levels is not None:
        overrides["mesh_levels"] = int(mesh_levels)
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        return _fail(str(exc))
    out = ArtifactDir(cfg.output_dir)
    start = time.perf_counter()
    try:
        result = run_scenario(cfg, out)
    except PipelineError as exc:
        return _fail(str(exc))
    except Exception as exc:  # surface solver failures with the scenario name
        return _fail(f"stage {cfg.scenario}: {type(exc).__name__}: {exc}")
    out.text("run.report", _report(cfg, result, time.perf_counter() - start))
    out.manifest()
    for c in result.checks:
        if not c.passed:
            click.echo(f"assertion failed: {c.name}: {c.detail}", err=True)
    click.echo(f"{cfg.scenario}: {'pass' if result.passed else 'fail'} ({out.path})")
    return EXIT_OK if result.passed else EXIT_ASSERT


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Stability experiments for quasilinear Neumann and Robin problems."""


@main.command("run")
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--output-dir", type=click.Path(file_okay=False), default=None,
              help="Override output_dir from the config.")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
              help="Override the 64-bit random seed.")
@click.option("--mesh-level", "mesh_level", type=click.IntRange(1), default=None,
              help="Number of refinement levels (overrides mesh_levels).")
def run_cmd(config, output_dir, seed, mesh_level):
    """Run the scenario described by CONFIG."""
    sys.exit(run(config, output_dir, seed, mesh_level))


@main.command("validate")
@click.argument("config", type=click.Path(dir_okay=False))
def validate_cmd(config):
    """Parse CONFIG and print the resolved settings."""
    try:
        cfg = load_config(config)
    except ConfigError as exc:
        sys.exit(_fail(str(exc)))
    for k, v in cfg.echo().items():
        click.echo(f"{k} = {v}")
    sys.exit(EXIT_OK)


@main.command("mesh")
@click.argument("domain_spec")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True,
              help="Mesh file to write.")
def mesh_cmd(domain_spec, output):
    """Generate a mesh from DOMAIN_SPEC such as 'disk:h=0.05,radius=1'."""
    try:
        spec = parse_domain_spec(domain_spec)
        m = generate(spec)
        save_mesh(m, Path(output))
    except ConfigError as exc:
        sys.exit(_fail(str(exc)))
    except Exception as exc:
        sys.exit(_fail(f"stage mesh: {exc}"))
    click.echo(f"{m.n_nodes} nodes, {m.n_triangles} triangles -> {output}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()

"""Solve, classify and verify pipelines behind ``stablab run``.

Each pipeline walks the mesh levels ``h, h/2, ...`` of the configured domain,
writes its tables into the run directory and returns a :class:`ScenarioResult`
holding report values and named pass/fail checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .artifacts import ArtifactDir
from .certify import (
    BoundaryFrameData,
    blended_seed,
    boundary_frame,
    certificate_sweep,
    convex_boundary_sign,
    rigidity_experiment,
    robin_certificate,
    robin_eigenpairs,
    robin_problem,
)
from .config import ScenarioConfig
from .fem import Field, NonlinearProblem, ScalarFunction, assemble_residual
from .levelset import curvature_identity_residual, dump_levelset, poincare_breakdown, random_smooth_test_function
from .mesh import generate
from .solver import NewtonOptions, cosine_seed, solve
from .stability import classify

__all__ = ["Check", "ScenarioResult", "PipelineError", "run_scenario", "IDENTITY_FIELD_FNS"]

# absolute level below which a refinement residual counts as already converged
_FLOOR = 1e-9


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioResult:
    values: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    def check(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(passed), detail))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _g(v) -> str:
    return f"{float(v):.12g}"


def _newton_options(cfg: ScenarioConfig) -> NewtonOptions:
    return NewtonOptions(max_iterations=cfg.get("newton.max_iterations"),
                         residual_tolerance=cfg.get("newton.tolerance"),
                         continuation_steps=cfg.get("newton.continuation_steps"))


def _neumann_problem(cfg: ScenarioConfig, source=None) -> NonlinearProblem:
    return NonlinearProblem(cfg.family, cfg.nonlinearity, ScalarFunction.zero(), source=source)


def _mesh(cfg: ScenarioConfig, level: int):
    try:
        return generate(cfg.domain_at(level))
    except Exception as exc:
        raise PipelineError(f"mesh (level {level})", str(exc)) from exc


def _refines(seq, ratio: float) -> tuple:
    """Each entry at most ``ratio`` times the previous one (or below the floor)."""
    worst = 0.0
    ok = True
    for a, b in zip(seq, seq[1:]):
        if b <= _FLOOR:
            continue
        r = b / a if a > 0 else np.inf
        worst = max(worst, r)
        ok &= r <= ratio
    return ok, worst


def _poincare(problem, u: Field, rng, samples: int):
    rows = [poincare_breakdown(problem, u, random_smooth_test_function(u.mesh, rng))
            for _ in range(samples)]
    return rows, min(b.slack for b in rows)


def _seed_descriptors(cfg: ScenarioConfig, rng) -> list:
    desc = [("constant", c, 0.0, (0.0, 0.0)) for c in cfg.get("seeds.constants")]
    for _ in range(cfg.get("seeds.count")):
        amp = rng.uniform(cfg.get("seeds.amplitude_min"), cfg.get("seeds.amplitude_max"))
        off = rng.uniform(-cfg.get("seeds.offset_max"), cfg.get("seeds.offset_max"))
        k = rng.uniform(cfg.get("seeds.wavenumber_min"), cfg.get("seeds.wavenumber_max"))
        # axis-aligned waves keep the seed even in the other coordinate
        wave = (k, 0.0) if rng.integers(2) == 0 else (0.0, k)
        desc.append(("cosine", off, amp, wave))
    return desc


# -- neumann-rigidity --------------------------------------------------------------


def _neumann_rigidity(cfg: ScenarioConfig, out: ArtifactDir) -> ScenarioResult:
    res = ScenarioResult()
    rng = np.random.default_rng(cfg.seed)
    problem = _neumann_problem(cfg)
    opts = _newton_options(cfg)
    desc = _seed_descriptors(cfg, rng)
    out.csv("seeds.csv", "seed,kind,offset,amplitude,k1,k2",
            [(i, d[0], d[1], d[2], d[3][0], d[3][1]) for i, d in enumerate(desc)])
    C_lem, C_p = cfg.get("lemconvex.C"), cfg.get("poincare.C")
    lem_max = []
    for level in range(cfg.mesh_levels):
        mesh = _mesh(cfg, level)
        h = cfg.level_h(level)
        seeds = [cosine_seed(mesh, off, amp, wave) for _, off, amp, wave in desc]
        try:
            rep = rigidity_experiment(problem, mesh, seeds, opts, cfg.get("rigidity.delta_const"),
                                      cfg.get("rigidity.weakly_convex"))
        except Exception as exc:
            raise PipelineError(f"rigidity (level {level})", str(exc)) from exc
        out.text(f"rigidity_L{level}.csv", rep.to_csv())
        tag = f"level{level}"
        res.values[f"{tag}.h"] = _g(h)
        res.values[f"{tag}.n_nodes"] = str(mesh.n_nodes)
        res.values[f"{tag}.strictly_convex"] = str(rep.strictly_convex).lower()
        lem, slacks = [], []
        pb_rows = []
        for row, u, sr in zip(rep.rows, rep.solutions, rep.solve_reports):
            out.text(f"newton_L{level}_s{row.seed}.csv", sr.history_csv())
            if not row.converged:
                res.values[f"{tag}.solution{row.seed}"] = f"not converged ({sr.message})"
                continue
            res.values[f"{tag}.solution{row.seed}"] = (
                f"{row.classification} lambda_min={_g(row.lambda_min)} "
                f"oscillation={row.oscillation:.3e} iterations={row.iterations}")
            nonconstant = row.oscillation > rep.delta_const
            if nonconstant:
                out.plot(f"field_L{level}_s{row.seed}.txt", u)
                if mesh.is_convex:
                    lem.append(float(np.max(convex_boundary_sign(problem, u))))
            if row.classification == "stable":
                rows, s = _poincare(problem, u, rng, cfg.get("poincare.samples"))
                pb_rows += rows
                slacks.append(s)
        if pb_rows:
            out.plot(f"poincare_L{level}.txt", pb_rows)
        n_conv = sum(r.converged for r in rep.rows)
        res.check(f"{tag}.converged_any", n_conv > 0, f"{n_conv}/{len(rep.rows)} seeds converged")
        res.check(f"{tag}.rigidity", not rep.violations,
                  f"{len(rep.violations)} stable nonconstant solutions")
        if slacks:
            res.values[f"{tag}.poincare_min_slack"] = _g(min(slacks))
            res.check(f"{tag}.poincare", min(slacks) >= -C_p * h,
                      f"min slack {_g(min(slacks))} vs -C*h = {_g(-C_p * h)}")
        if lem:
            lem_max.append(max(lem))
            res.values[f"{tag}.lemconvex_max"] = _g(max(lem))
            res.check(f"{tag}.lemconvex", max(lem) <= C_lem * h,
                      f"max {_g(max(lem))} vs C*h = {_g(C_lem * h)}")
    if len(lem_max) > 1:
        pos = [max(v, 0.0) for v in lem_max]
        ok = all(b <= a for a, b in zip(pos, pos[1:]))
        res.check("lemconvex.refinement", ok, "positive part nonincreasing: "
                  + ", ".join(_g(v) for v in lem_max))
    return res


# -- dumbbell -----------------------------------------------------------------------


def _dumbbell(cfg: ScenarioConfig, out: ArtifactDir) -> ScenarioResult:
    res = ScenarioResult()
    rng = np.random.default_rng(cfg.seed)
    problem = _neumann_problem(cfg)
    opts = _newton_options(cfg)
    C_p = cfg.get("poincare.C")
    delta = cfg.get("rigidity.delta_const")
    for level in range(cfg.mesh_levels):
        mesh = _mesh(cfg, level)
        h = cfg.level_h(level)
        tag = f"level{level}"
        u, sr = solve(problem, mesh, blended_seed(mesh, cfg.get("seeds.blend_width")), opts)
        out.text(f"newton_L{level}.csv", sr.history_csv())
        res.values[f"{tag}.h"] = _g(h)
        res.values[f"{tag}.n_nodes"] = str(mesh.n_nodes)
        res.values[f"{tag}.convex"] = str(mesh.is_convex).lower()
        res.check(f"{tag}.converged", sr.converged, sr.message or f"{sr.iterations} iterations")
        if not sr.converged:
            continue
        try:
            st = classify(problem, u)
        except Exception as exc:
            raise PipelineError(f"classify (level {level})", str(exc)) from exc
        osc = u.oscillation()
        out.plot(f"field_L{level}.txt", u)
        out.plot(f"stability_L{level}.txt", st)
        res.values[f"{tag}.oscillation"] = _g(osc)
        res.values[f"{tag}.lambda_min"] = _g(st.lambda_min)
        res.values[f"{tag}.classification"] = st.classification
        res.check(f"{tag}.nonconstant", osc > delta, f"oscillation {_g(osc)}")
        res.check(f"{tag}.stable", st.classification == "stable", f"lambda_min {_g(st.lambda_min)}")
        if st.classification == "stable":
            rows, s = _poincare(problem, u, rng, cfg.get("poincare.samples"))
            out.plot(f"poincare_L{level}.txt", rows)
            res.values[f"{tag}.poincare_min_slack"] = _g(s)
            res.check(f"{tag}.poincare", s >= -C_p * h, f"min slack {_g(s)} vs -C*h = {_g(-C_p * h)}")
    return res


# -- robin-certificate --------------------------------------------------------------


def _frame_rows(fr: BoundaryFrameData):
    return [(int(n), fr.u_s[i], fr.u_ss[i], fr.u_t[i], fr.residual_robin[i],
             fr.residual_metric[i], fr.residual_expansion[i]) for i, n in enumerate(fr.nodes)]


def _robin(cfg: ScenarioConfig, out: ArtifactDir) -> ScenarioResult:
    res = ScenarioResult()
    alpha = float(cfg.robin_alpha)
    modes = cfg.get("robin.modes")
    frame_modes = sorted({0, min(cfg.get("robin.frame_mode"), modes - 1)})
    history = {m: [] for m in frame_modes}
    cert_state = None
    for level in range(cfg.mesh_levels):
        mesh = _mesh(cfg, level)
        tag = f"level{level}"
        res.values[f"{tag}.h"] = _g(cfg.level_h(level))
        res.values[f"{tag}.n_nodes"] = str(mesh.n_nodes)
        try:
            vals, vecs = robin_eigenpairs(mesh, alpha, modes)
        except Exception as exc:
            raise PipelineError(f"robin eigenpairs (level {level})", str(exc)) from exc
        rows = []
        for j, lam in enumerate(vals):
            u = Field(mesh, vecs[:, j])
            f = ScalarFunction.linear(float(lam))
            cert = robin_certificate(u, alpha, f)
            st = classify(robin_problem(alpha, float(lam)), u)
            rows.append((j, float(lam), cert.boundary_integral, cert.min_alpha_plus_kappa,
                         cert.fires, st.lambda_min, st.classification))
            if cert.fires:
                res.check(f"{tag}.mode{j}.sound", st.classification == "unstable",
                          f"certificate fires, lambda_min {_g(st.lambda_min)}")
            if j == 0:
                state = cert.to_text().rsplit("certificate = ", 1)[1].strip()
                res.values[f"{tag}.certificate"] = state
                cert_state = state
            if j in history:
                fr = boundary_frame(u, alpha, f)
                out.csv(f"frame_L{level}_m{j}.csv",
                        "node,u_s,u_ss,u_t,residual_robin,residual_metric,residual_expansion",
                        _frame_rows(fr))
                mx = fr.max_residuals()
                history[j].append(mx)
                for k, v in mx.items():
                    res.values[f"{tag}.mode{j}.{k}"] = _g(v)
        out.csv(f"modes_L{level}.csv",
                "mode,lambda,boundary_integral,min_alpha_plus_kappa,fires,lambda_min,classification",
                rows)
    res.values["certificate"] = cert_state
    ratio = cfg.get("robin.max_ratio")
    if cfg.mesh_levels > 1:
        for j, hist in history.items():
            for k in ("residual_robin", "residual_metric", "residual_expansion"):
                seq = [m[k] for m in hist]
                ok, worst = _refines(seq, ratio)
                res.check(f"frame.mode{j}.{k}", ok,
                          f"worst ratio {worst:.3f} (limit {ratio}): " + ", ".join(f"{v:.3e}" for v in seq))
    alphas = cfg.get("robin.sweep_alphas")
    if alphas:
        mesh = _mesh(cfg, 0)
        sweep = certificate_sweep(mesh, alphas, modes)
        out.text("sweep.csv", sweep.to_csv())
        res.values["sweep"] = sweep.summary()
        res.check("sweep.sound", sweep.sound,
                  f"{sum(not r.sound for r in sweep.rows)} firing rows not unstable")
    return res


# -- identity-suite -----------------------------------------------------------------

IDENTITY_FIELD_FNS: dict = {
    "radial": lambda x, y: 0.5 * (x**2 + y**2),
    "sincosh": lambda x, y: np.sin(x) * np.cosh(y),
    "linear": lambda x, y: x + 0.0 * y,
    "saddle": lambda x, y: x * y,
}


def _identity(cfg: ScenarioConfig, out: ArtifactDir) -> ScenarioResult:
    res = ScenarioResult()
    fn: Callable = IDENTITY_FIELD_FNS[cfg.get("identity.field")]
    maxes, rows = [], []
    for level in range(cfg.mesh_levels):
        mesh = _mesh(cfg, level)
        u = Field.from_function(mesh, fn).with_derivatives()
        r = np.abs(curvature_identity_residual(u))
        maxes.append(float(r.max()))
        rows.append((level, cfg.level_h(level), mesh.n_nodes, r.max(), r.mean()))
        dump_levelset(u, out._track(f"levelset_L{level}.txt"))
        res.values[f"level{level}.max_residual"] = _g(r.max())
    out.csv("identity_residual.csv", "level,h,n_nodes,max_residual,mean_abs_residual", rows)
    if cfg.mesh_levels > 1:
        ratio = cfg.get("identity.max_ratio")
        ok, worst = _refines(maxes, ratio)
        res.check("identity.refinement", ok, f"worst ratio {worst:.3f} (limit {ratio})")
    else:
        res.check("identity.finite", bool(np.isfinite(maxes[0])), "single level")
    return res


# -- manufactured -------------------------------------------------------------------


def _u_exact(x, y):
    return np.cos(np.pi * (x**2 + y**2))


def _lap_exact(x, y):
    r2 = x**2 + y**2
    return -4 * np.pi * np.sin(np.pi * r2) - 4 * np.pi**2 * r2 * np.cos(np.pi * r2)


def _manufactured(cfg: ScenarioConfig, out: ArtifactDir) -> ScenarioResult:
    """``Lap u + f(u) + s = 0`` on the unit disk with exact solution ``cos(pi r^2)``."""
    res = ScenarioResult()
    if cfg.domain.kind != "disk" or cfg.domain.radius != 1.0 or tuple(cfg.domain.origin) != (0.0, 0.0):
        raise PipelineError("setup", "manufactured scenario needs the unit disk centred at the origin")
    if cfg.family.name != "laplacian":
        raise PipelineError("setup", "manufactured scenario is defined for the laplacian family")
    f = cfg.nonlinearity

    def source(x, y):
        return -_lap_exact(x, y) - f(_u_exact(x, y))

    problem = _neumann_problem(cfg, source)
    opts = _newton_options(cfg)
    C = cfg.get("manufactured.quadratic_C")
    tol = cfg.get("manufactured.conservation_tol")
    rows, errors = [], []
    for level in range(cfg.mesh_levels):
        mesh = _mesh(cfg, level)
        tag = f"level{level}"
        u, sr = solve(problem, mesh, Field.constant(mesh, 0.0), opts)
        out.text(f"newton_L{level}.csv", sr.history_csv())
        res.check(f"{tag}.converged", sr.converged, sr.message or f"{sr.iterations} iterations")
        if not sr.converged:
            continue
        hist = sr.residual_history
        # quadratic rate on the last two steps that are above rounding
        q = [b / a**2 for a, b in zip(hist, hist[1:]) if a > 1e-13][-2:]
        res.values[f"{tag}.quadratic_ratios"] = ", ".join(_g(v) for v in q)
        res.check(f"{tag}.quadratic", bool(q) and max(q) <= C,
                  f"r_(k+1)/r_k^2 = {', '.join(_g(v) for v in q)} (bound {_g(C)})")
        # with phi = 1 the weak residual is -int (f(u) + s) dx
        cons = abs(float(np.sum(assemble_residual(problem, u))))
        res.values[f"{tag}.conservation"] = _g(cons)
        res.check(f"{tag}.conservation", cons <= tol * mesh.area,
                  f"|int f(u) + s| = {_g(cons)} vs {_g(tol * mesh.area)}")
        err = float(np.max(np.abs(u.values - _u_exact(*mesh.nodes.T))))
        errors.append(err)
        rows.append((level, cfg.level_h(level), mesh.n_nodes, sr.iterations, err))
        out.plot(f"field_L{level}.txt", u)
        res.values[f"{tag}.max_error"] = _g(err)
    out.csv("errors.csv", "level,h,n_nodes,iterations,max_error", rows)
    if len(errors) > 1:
        ok, worst = _refines(errors, 0.5)
        res.check("error.refinement", ok, f"worst error ratio {worst:.3f} (limit 0.5)")
    return res


_PIPELINES = {
    "neumann-rigidity": _neumann_rigidity,
    "dumbbell": _dumbbell,
    "robin-certificate": _robin,
    "identity-suite": _identity,
    "manufactured": _manufactured,
}


def run_scenario(cfg: ScenarioConfig, out: ArtifactDir) -> ScenarioResult:
    return _PIPELINES[cfg.scenario](cfg, out)

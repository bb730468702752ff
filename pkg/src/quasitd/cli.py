"""Topological derivatives of quasi-linear transmission problems from the command line.

Usage::

    quasitd COMMAND --config run.toml --out DIR [--threads N] [--deterministic] [--seed N]

Exit status: 0 success, 1 failed verification (the failing row is printed),
2 parse/configuration/precondition error, 3 solver failure (the residual
history is written to ``DIR/residual_history.txt``).
"""

from __future__ import annotations

import argparse
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .asymptotics import fd_quotient, keps_convergence, projection_diagnostic, rate_state_difference
from .config import RunConfig, load_config
from .corrector import CorrectorConfig, polarization_matrix, solve_K, solve_Qtilde, truncation_study
from .errors import ParseError, QuasiTDError, SolverError
from .fem import eval_cost, evaluate
from .io import fmt, read_field, write_csv, write_field, write_manifest, write_mesh, write_vtk
from .materials import check_assumptions
from .topoderiv import relative_gap, td_field, td_point

TD_HEADER = ["x", "y", "td", "dl_g", "r1", "r2", "td_alt", "td_avg", "case", "error"]
FD_BAND = 0.05
RATE_BAND = (0.85, 1.15)


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, out: Path):
        self.out = out
        self.artifacts: list[Path] = []
        self.failures: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def check(self, name: str, ok: bool, detail: str):
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name}: {detail}")
        if not ok:
            self.failures.append(name)


def _td_row(bd=None, x=math.nan, y=math.nan, error=""):
    if bd is None:
        return [x, y] + [math.nan] * 6 + ["", error]
    return [float(bd.z[0]), float(bd.z[1]), bd.td, bd.dl_G, bd.R1, bd.R2, bd.td_alternative, bd.td_averaged,
            bd.case, error]


def _bind_files(cfg: RunConfig):
    """Turn file-based ``f`` / ``u_d`` into P1 interpolants on the unperturbed mesh."""
    prob = cfg.problem
    if cfg.f_file is None and cfg.u_d_file is None:
        return prob
    base = prob.mesh()
    changes = {}
    for key, path in (("f", cfg.f_file), ("u_d", cfg.u_d_file)):
        if path is None:
            continue
        vals = read_field(path, base)

        def interp(x, y, vals=vals):
            pts = np.column_stack([np.ravel(x), np.ravel(y)])
            return evaluate(base, vals, pts).reshape(np.shape(x))

        changes[key] = interp
    return prob.with_(**changes)


def _state(prob, run: Run, with_adjoint: bool):
    mesh = prob.mesh()
    u0, info = prob.solve_state(mesh, return_info=True)
    write_mesh(mesh, run.path("state.mesh"))
    write_field(u0.values, run.path("u0.field"))
    write_csv(run.path("newton.csv"), ["iteration", "residual"], list(enumerate(info.history)))
    point = {"u0": u0.values}
    p0 = None
    cost = eval_cost(mesh, u0, prob.target(mesh), prob.weights)
    if with_adjoint:
        p0 = prob.solve_adjoint(mesh, u0)
        write_field(p0.values, run.path("p0.field"))
        point["p0"] = p0.values
    write_vtk(run.path("state.vtk"), mesh, point_data=point)
    write_csv(run.path("summary.csv"), ["num_vertices", "num_triangles", "newton_iterations", "cost"],
              [[mesh.num_vertices, mesh.num_triangles, info.iterations, cost]])
    print(f"state: {mesh.num_vertices} vertices, {info.iterations} Newton iterations, "
          f"final residual {fmt(info.history[-1])}, cost {fmt(cost)}")
    return mesh, u0, p0


def cmd_solve_state(cfg: RunConfig, run: Run):
    _state(_bind_files(cfg), run, with_adjoint=False)


def cmd_solve_adjoint(cfg: RunConfig, run: Run):
    _state(_bind_files(cfg), run, with_adjoint=True)


def cmd_corrector(cfg: RunConfig, run: Run):
    prob = cfg.problem
    shape = prob.shape
    c = prob.corrector.resolved(shape)
    m = prob.material
    U0 = cfg.U0 if cfg.U0 is not None else (1.0, 0.0)
    mesh = prob.corrector.mesh(shape)
    K = solve_K(m, U0, mesh, shape=shape, tol=c.tol, max_iter=c.max_iter)
    write_mesh(mesh, run.path("corrector.mesh"))
    write_field(K.field.values, run.path("K.field"))
    point = {"K": K.field.values}
    write_csv(run.path("corrector.csv"), ["R", "grad_energy", "mean_grad_x", "mean_grad_y"],
              [[K.truncation_radius, K.grad_energy, K.inclusion_mean_grad[0], K.inclusion_mean_grad[1]]])
    M = polarization_matrix(m, U0, mesh).entries
    write_csv(run.path("polarization.csv"), ["row", "m1", "m2"], [[i, M[i, 0], M[i, 1]] for i in range(2)])
    if cfg.P0 is not None:
        Qt = solve_Qtilde(m, U0, cfg.P0, mesh, shape=shape)
        write_field(Qt.field.values, run.path("Qtilde.field"))
        point["Qtilde"] = Qt.field.values
    write_vtk(run.path("corrector.vtk"), mesh, point_data=point)
    if cfg.truncation_radii:
        rows = truncation_study(m, U0, shape, cfg.truncation_radii, h_near=c.h_near, grading=c.grading,
                                tol=c.tol)
        write_csv(run.path("truncation.csv"), ["R", "grad_energy", "mean_grad_x", "mean_grad_y", "cauchy_diff"],
                  [[r.R, r.grad_energy, r.mean_grad[0], r.mean_grad[1], r.cauchy_diff] for r in rows])
    print(f"corrector: R={fmt(K.truncation_radius)} mean grad K = ({fmt(K.inclusion_mean_grad[0])}, "
          f"{fmt(K.inclusion_mean_grad[1])}), energy {fmt(K.grad_energy)}")


def _need_z(cfg: RunConfig):
    if cfg.z is None:
        raise ParseError("[point] z is required for this command", source=cfg.source)
    return np.asarray(cfg.z, dtype=float)


def cmd_td_point(cfg: RunConfig, run: Run):
    z = _need_z(cfg)
    prob = _bind_files(cfg)
    mesh, u0, p0 = _state(prob, run, with_adjoint=True)
    bd = td_point(z, mesh, prob.material, u0, p0, prob.weights, prob.shape, prob.corrector)
    write_csv(run.path("td.csv"), TD_HEADER, [_td_row(bd)])
    print(f"td({fmt(z[0])}, {fmt(z[1])}) = {fmt(bd.td)} [{bd.case}]")


def cmd_td_field(cfg: RunConfig, run: Run):
    if cfg.grid_points is None:
        raise ParseError("[grid] is required for td-field", source=cfg.source)
    prob = _bind_files(cfg)
    mesh, u0, p0 = _state(prob, run, with_adjoint=True)
    rows = td_field(cfg.grid_points, mesh, prob.material, u0, p0, prob.weights, prob.shape, prob.corrector)
    write_csv(run.path("td_field.csv"), TD_HEADER,
              [_td_row(r.breakdown, r.x, r.y, r.error) for r in rows])
    bad = sum(1 for r in rows if r.error)
    print(f"td-field: {len(rows)} points, {bad} skipped")


def _epsilons(cfg: RunConfig, default):
    return cfg.epsilons if cfg.epsilons else list(default)


def cmd_verify_fd(cfg: RunConfig, run: Run):
    z = _need_z(cfg)
    prob = _bind_files(cfg)
    mesh = prob.mesh()
    u0 = prob.solve_state(mesh)
    p0 = prob.solve_adjoint(mesh, u0)
    bd = td_point(z, mesh, prob.material, u0, p0, prob.weights, prob.shape, prob.corrector)
    td = bd.td
    rows = []
    for e in _epsilons(cfg, (0.08, 0.04, 0.02)):
        r = fd_quotient(prob, z, e)
        gap = abs(r.quotient - td)
        rows.append([e, r.J_perturbed, r.J_unperturbed, r.quotient, td, gap, relative_gap(r.quotient, td)])
    write_csv(run.path("fd.csv"), ["eps", "J_eps", "J_0", "fd_quotient", "td", "abs_gap", "rel_gap"], rows)
    write_csv(run.path("td.csv"), TD_HEADER, [_td_row(bd)])
    gaps = [r[5] for r in rows]
    for i, (a, b) in enumerate(zip(gaps, gaps[1:])):
        run.check(f"fd gap decreasing (row {i + 2}, eps={rows[i + 1][0]:g})", b < a,
                  f"{fmt(b)} < {fmt(a)}")
    final = rows[-1]
    run.check(f"fd final relative gap (row {len(rows)}, eps={final[0]:g})", final[6] <= FD_BAND,
              f"{fmt(final[6])} <= {FD_BAND}")


def cmd_verify_rates(cfg: RunConfig, run: Run):
    z = _need_z(cfg)
    prob = _bind_files(cfg)
    study = rate_state_difference(prob, z, _epsilons(cfg, (0.16, 0.08, 0.04, 0.02)))
    rows = [[r.eps, r.h1_diff, r.error] for r in study.rows]
    write_csv(run.path("rates.csv"), ["eps", "h1_diff", "error"], rows)
    slope = study.fitted_slopes["h1_diff"]
    write_csv(run.path("rates_fit.csv"), ["quantity", "slope"], [["h1_diff", slope]])
    for i, r in enumerate(study.rows, start=1):
        if r.error:
            run.check(f"rate solve (row {i}, eps={r.eps:g})", False, r.error)
    if math.isnan(slope) and not any(r.error for r in study.rows):
        print("SKIP rate slope: every difference vanishes (no contrast)")
        return
    lo, hi = RATE_BAND
    run.check("rate slope", lo <= slope <= hi, f"{fmt(slope)} in [{lo}, {hi}]")


def cmd_verify_keps(cfg: RunConfig, run: Run):
    z = _need_z(cfg)
    prob = _bind_files(cfg)
    study = keps_convergence(prob, z, _epsilons(cfg, (0.08, 0.04, 0.02)))
    rows = [[r.eps, r.keps_gap, r.error] for r in study.rows]
    write_csv(run.path("keps.csv"), ["eps", "keps_gap", "error"], rows)
    for i, (a, b) in enumerate(zip(study.rows, study.rows[1:]), start=2):
        run.check(f"keps gap decreasing (row {i}, eps={b.eps:g})", b.keps_gap < a.keps_gap,
                  f"{fmt(b.keps_gap)} < {fmt(a.keps_gap)}" + (f" ({b.error})" if b.error else ""))


def cmd_verify_projection(cfg: RunConfig, run: Run):
    prob = cfg.problem
    shape = prob.shape
    R = cfg.projection_R if cfg.projection_R is not None else 80.0
    radii = cfg.projection_radii or [10.0, 20.0, 40.0]
    base = prob.corrector
    ccfg = CorrectorConfig(R=R, h_near=base.h_near, h_far=base.h_far, grading=base.grading, tol=base.tol,
                           max_iter=base.max_iter, snap_radii=tuple(radii))
    c = ccfg.resolved(shape)
    mesh = ccfg.mesh(shape)
    U0 = cfg.U0 if cfg.U0 is not None else (1.0, 0.0)
    K = solve_K(prob.material, U0, mesh, shape=shape, tol=c.tol, max_iter=c.max_iter)
    rows = projection_diagnostic(K, list(radii) + [K.truncation_radius])
    write_csv(run.path("projection.csv"), ["R", "gap"], [[r.R, r.gap] for r in rows])
    gaps = [r.gap for r in rows[:-1]]
    for i, (a, b) in enumerate(zip(gaps, gaps[1:]), start=2):
        run.check(f"projection gap decreasing (row {i}, R={rows[i - 1].R:g})", b < a, f"{fmt(b)} < {fmt(a)}")
    exact = rows[-1].gap
    scale = max(1.0, math.sqrt(K.grad_energy))
    run.check(f"projection exact radius (row {len(rows)}, R={rows[-1].R:g})", exact <= 1e-9 * scale,
              f"{fmt(exact)} <= {fmt(1e-9 * scale)}")


def cmd_check_material(cfg: RunConfig, run: Run):
    m = cfg.problem.material
    rows = []
    for phase, a in (("a1", m.a1), ("a2", m.a2)):
        rep = check_assumptions(a, box_half_width=cfg.check_box, samples=cfg.check_samples, seed=cfg.seed)
        c1, c2, c3 = a.constants
        rows.append([phase, a.describe(), c1, c2, c3, rep.c1_est, rep.c2_est, rep.c3_est, rep.jacobian_error,
                     rep.passed, "; ".join(rep.failures)])
        print(f"{phase} {a.describe()}: c1_est={fmt(rep.c1_est)} c2_est={fmt(rep.c2_est)} "
              f"c3_est={fmt(rep.c3_est)} jacobian_error={fmt(rep.jacobian_error)}")
    write_csv(run.path("material.csv"), ["phase", "law", "c1", "c2", "c3", "c1_est", "c2_est", "c3_est",
                                         "jacobian_error", "passed", "failures"], rows)
    for i, r in enumerate(rows, start=1):
        run.check(f"assumptions (row {i}, {r[0]})", bool(r[9]), r[10] or "all bounds hold")


HELP = {
    "solve-state": "solve the state equation on the hold-all mesh",
    "solve-adjoint": "solve state and adjoint equations",
    "corrector": "solve the corrector K and the polarization matrix",
    "td-point": "topological derivative at [point] z",
    "td-field": "topological derivative over [grid]",
    "verify-fd": "finite-difference consistency of the derivative",
    "verify-rates": "H1 rate of the state variation",
    "verify-keps": "strong convergence of the rescaled state variation",
    "verify-projection": "energy projections of K onto smaller disks",
    "check-material": "sample the structural bounds of both flux laws",
}

COMMANDS = {
    "solve-state": cmd_solve_state,
    "solve-adjoint": cmd_solve_adjoint,
    "corrector": cmd_corrector,
    "td-point": cmd_td_point,
    "td-field": cmd_td_field,
    "verify-fd": cmd_verify_fd,
    "verify-rates": cmd_verify_rates,
    "verify-keps": cmd_verify_keps,
    "verify-projection": cmd_verify_projection,
    "check-material": cmd_check_material,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="TOML run configuration")
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads (1 in deterministic mode)")
    common.add_argument("--deterministic", action="store_true", help="force deterministic mode")
    common.add_argument("--seed", type=int, default=None, help="override [numerics] seed")
    parser = argparse.ArgumentParser(prog="quasitd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"quasitd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def _write_history(out: Path, exc: SolverError):
    out.mkdir(parents=True, exist_ok=True)
    lines = ["iteration residual"] + [f"{i} {fmt(r)}" for i, r in enumerate(exc.history or [])]
    p = out / "residual_history.txt"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return 2
        cfg.threads = args.threads
    if cfg.deterministic:
        cfg.threads = 1
    try:
        run = Run(args.out)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return 2
    status = 0
    try:
        COMMANDS[args.command](cfg, run)
        if run.failures:
            status = 1
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    except SolverError as exc:
        p = _write_history(args.out, exc)
        run.artifacts.append(p)
        print(f"error: solver failure: {exc} (history in {p})", file=sys.stderr)
        status = 3
    except (QuasiTDError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = 2
    entries = {
        "command": args.command,
        "config": str(args.config),
        "config_hash": cfg.config_hash,
        "quasitd_version": __version__,
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "deterministic": cfg.deterministic,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "status": status,
        "wall_time_s": time.perf_counter() - t0,
    }
    write_manifest(args.out / "manifest.txt", entries, [p for p in run.artifacts if p.exists()])
    return status


if __name__ == "__main__":
    sys.exit(main())

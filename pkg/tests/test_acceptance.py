"""Acceptance criteria 1-10 at their stated tolerances, on the shipped configs.

Each test prints one ``PASS``/``FAIL`` line; the lines are repeated in the
terminal summary.  Run with ``pytest -v -s tests/test_acceptance.py``.
"""

import filecmp
import itertools
import math
from pathlib import Path

import numpy as np

from quasitd.asymptotics import (
    fd_quotient,
    keps_convergence,
    projection_diagnostic,
    rate_state_difference,
    strictly_decreasing,
)
from quasitd.cli import main
from quasitd.config import load_config
from quasitd.corrector import CorrectorConfig, polarization_matrix, solve_K, solve_Q, solve_Qtilde
from quasitd.fem import (
    assemble_residual,
    assemble_tangent,
    element_gradients,
    geometry,
    newton_solve,
)
from quasitd.materials import TwoPhaseMaterial, linear, reluctivity
from quasitd.mesh import InclusionShape, refine_uniform, structured_square_mesh
from quasitd.topoderiv import relative_gap, td_point

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DISK = InclusionShape.disk(1.0)
RELUCT = reluctivity(1.0, 3.0, 1.0, 1)


def cfg(name, **changes):
    c = load_config(CONFIGS / name)
    if changes:
        c.problem = c.problem.with_(**changes)
    return c


def state(problem):
    mesh = problem.mesh()
    u0 = problem.solve_state(mesh)
    return mesh, u0, problem.solve_adjoint(mesh, u0)


def td_at(c):
    p = c.problem
    mesh, u0, p0 = state(p)
    return td_point(c.z, mesh, p.material, u0, p0, p.weights, p.shape, p.corrector)


def test_c1_zero_contrast(report):
    c = cfg("zero_contrast.toml")
    worst = 0.0
    for law in (linear(1.0), RELUCT):
        mat = TwoPhaseMaterial(law, law)
        p = c.problem.with_(material=mat)
        mesh, u0, p0 = state(p)
        td = td_point(c.z, mesh, mat, u0, p0, p.weights, p.shape, p.corrector)
        worst = max(worst, abs(td.td_lagrangian), abs(td.td_alternative), abs(td.td_averaged))
        worst = max(worst, abs(fd_quotient(p, c.z, c.epsilons[-1]).quotient))
        cm = p.corrector.mesh(p.shape)
        K = solve_K(mat, td.U0, cm, shape=p.shape)
        Qt = solve_Qtilde(mat, td.U0, td.P0, cm, shape=p.shape)
        Q = solve_Q(mat, td.U0, td.P0, K, p.weights, cm, shape=p.shape)
        worst = max(worst, *(np.abs(r.field.values).max() for r in (K, Qt, Q)))
    assert report(1, "zero contrast", worst <= 1e-10, f"max |value| = {worst:.3e} <= 1e-10")


def test_c2_linear_disk_corrector(report):
    mat = TwoPhaseMaterial(linear(2.0), linear(1.0))
    mesh = CorrectorConfig(R=50.0, h_near=0.02).mesh(DISK)
    K = solve_K(mat, (1.0, 0.0), mesh, shape=DISK)
    target = np.array([-1.0 / 3.0, 0.0])
    g_err = np.linalg.norm(K.inclusion_mean_grad - target) / np.linalg.norm(target)
    M = polarization_matrix(mat, (1.0, 0.0), mesh).entries
    M_target = -(math.pi / 3.0) * np.eye(2)
    m_err = np.linalg.norm(M - M_target) / np.linalg.norm(M_target)
    ok = g_err <= 0.02 and m_err <= 0.02
    assert report(2, "linear disk corrector", ok,
                  f"mean grad K = ({K.inclusion_mean_grad[0]:.6f}, {K.inclusion_mean_grad[1]:.2e}) rel err "
                  f"{g_err:.2e}; polarization rel err {m_err:.2e} (band 2%)")


def test_c3_linear_td_and_fd(report):
    c = cfg("linear_benchmark.toml")
    td = td_at(c)
    routes = {"lagrangian": td.td_lagrangian, "alternative": td.td_alternative, "averaged": td.td_averaged}
    route_err = max(abs(v - 8 / 9) / (8 / 9) for v in routes.values())
    gaps = [abs(fd_quotient(c.problem, c.z, e).quotient - td.td) for e in c.epsilons]
    final = gaps[-1] / abs(td.td)
    ok = route_err <= 0.05 and strictly_decreasing(gaps) and final <= 0.05
    assert report(3, "linear td and fd consistency", ok,
                  f"routes {', '.join(f'{k}={v:.5f}' for k, v in routes.items())} (max rel err {route_err:.2e}); "
                  f"fd gaps {', '.join(f'{g:.3e}' for g in gaps)}, final rel {final:.2e}")


def test_c4_route_equivalence(report):
    c = cfg("reluctivity_benchmark.toml")
    assert c.problem.material.a1.name == "reluctivity" and c.problem.weights.a == 0
    td = td_at(c)
    vals = [td.td_lagrangian, td.td_alternative, td.td_averaged]
    worst = max(relative_gap(a, b, floor=1e-12) for a, b in itertools.combinations(vals, 2))
    assert report(4, "route equivalence", worst <= 0.01,
                  f"lagrangian={vals[0]:.10f} alternative={vals[1]:.10f} averaged={vals[2]:.10f}, "
                  f"max pairwise rel gap {worst:.2e} <= 1e-2")


def test_c5_rate(report):
    c = cfg("linear_rates.toml")
    study = rate_state_difference(c.problem, c.z, c.epsilons)
    slope = study.fitted_slopes["h1_diff"]
    ok = 0.85 <= slope <= 1.15
    diffs = ", ".join(f"{r.h1_diff:.3e}" for r in study.rows)
    assert report(5, "H1 rate", ok, f"eps {c.epsilons}, |u_eps - u_0|_H1 {diffs}, slope {slope:.4f} in [0.85, 1.15]")


def test_c6_strong_convergence(report):
    parts, ok = [], True
    for name in ("linear_benchmark.toml", "reluctivity_benchmark.toml"):
        c = cfg(name)
        gaps = [r.keps_gap for r in keps_convergence(c.problem, c.z, c.epsilons).rows]
        ok &= strictly_decreasing(gaps)
        parts.append(f"{name.split('_')[0]}: {', '.join(f'{g:.4e}' for g in gaps)}")
    assert report(6, "strong convergence of K_eps", ok, "; ".join(parts))


def test_c7_projection(report):
    c = cfg("linear_benchmark.toml")
    radii = list(c.projection_radii)
    ccfg = CorrectorConfig(R=c.projection_R, snap_radii=tuple(radii))
    K = solve_K(c.problem.material, c.U0, ccfg.mesh(DISK), shape=DISK)
    rows = projection_diagnostic(K, radii + [c.projection_R])
    gaps = [r.gap for r in rows[:-1]]
    exact = rows[-1].gap
    tol = 1e-9 * max(1.0, math.sqrt(K.grad_energy))
    ok = strictly_decreasing(gaps) and exact <= tol
    assert report(7, "projection diagnostic", ok,
                  f"R={c.projection_R:g}, gaps over radii {radii}: {', '.join(f'{g:.4e}' for g in gaps)}; "
                  f"exact radius {exact:.2e} <= {tol:.1e}")


_A1, _B1, _A2, _B2 = 0.059715871789770, 0.470142064105115, 0.797426985353087, 0.101286507323456
_DUNAVANT = np.array([[1 / 3, 1 / 3, 1 / 3], [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
                      [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2]])
_DUNAVANT_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def _manufactured():
    """``u = sin(pi x) sin(pi y)`` for ``reluctivity(1, 3, 1, 1)``; source derived with sympy."""
    import sympy

    x, y = sympy.symbols("x y")
    u = sympy.sin(sympy.pi * x) * sympy.sin(sympy.pi * y)
    ux, uy = sympy.diff(u, x), sympy.diff(u, y)
    s2 = ux**2 + uy**2
    nu = 1 + 2 * s2 / (s2 + 1)
    f = -(sympy.diff(nu * ux, x) + sympy.diff(nu * uy, y))
    return sympy.lambdify((x, y), f, "numpy"), sympy.lambdify((x, y), [ux, uy], "numpy")


def _h1_error(mesh, uh, grad):
    p = mesh.vertices[mesh.triangles]
    Gh = element_gradients(mesh, uh)
    areas = geometry(mesh).areas
    total = 0.0
    for lam, w in zip(_DUNAVANT, _DUNAVANT_W):
        q = np.einsum("i,eik->ek", lam, p)
        gx, gy = grad(q[:, 0], q[:, 1])
        total += w * np.sum(areas * ((Gh[:, 0] - gx) ** 2 + (Gh[:, 1] - gy) ** 2))
    return math.sqrt(total)


def test_c8_solver_gates(report):
    worst_it, worst_red = 0, 0.0
    for name in ("linear_benchmark.toml", "reluctivity_benchmark.toml", "omega_disk.toml"):
        c = cfg(name)
        p = c.problem
        # unperturbed and perturbed hold-all meshes; the latter carries the inclusion tag
        for mesh in (p.mesh(), p.mesh(perturbation=(c.z, 0.02))):
            _, info = newton_solve(mesh, p.material, p.f, tol=1e-10, max_iter=25, return_info=True)
            worst_it = max(worst_it, info.iterations)
            worst_red = max(worst_red, info.history[-1] / info.history[0] if info.history[0] else 0.0)
    newton_ok = worst_it <= 25 and worst_red <= 1e-10

    m = structured_square_mesh(8)
    rng = np.random.default_rng(4)
    m = m.with_tags(rng.integers(0, 3, m.num_triangles))
    mat = TwoPhaseMaterial(RELUCT, linear(1.0))
    u, v = 2.0 * rng.normal(size=m.num_vertices), rng.normal(size=m.num_vertices)
    u[m.boundary_vertex] = v[m.boundary_vertex] = 0.0
    r0 = assemble_residual(m, mat, u, 1.0)
    Tv = assemble_tangent(m, mat, u) @ v
    ts = np.array([1e-2, 1e-3, 1e-4])
    errs = [np.linalg.norm(assemble_residual(m, mat, u + t * v, 1.0) - r0 - t * Tv) for t in ts]
    tangent_slope = float(np.polyfit(np.log(ts), np.log(errs), 1)[0])

    f, grad = _manufactured()
    mesh = structured_square_mesh(8)
    hs, h1 = [], []
    for _ in range(3):
        uh = newton_solve(mesh, TwoPhaseMaterial(RELUCT, RELUCT), f, tol=1e-10)
        hs.append(mesh.diameters.max())
        h1.append(_h1_error(mesh, uh, grad))
        mesh = refine_uniform(mesh)
    h1_slope = float(np.polyfit(np.log(hs), np.log(h1), 1)[0])

    ok = newton_ok and tangent_slope >= 1.9 and abs(h1_slope - 1.0) <= 0.1
    assert report(8, "solver quality gates", ok,
                  f"Newton max {worst_it} iterations, max residual reduction {worst_red:.2e}; "
                  f"tangent slope {tangent_slope:.3f} >= 1.9; manufactured H1 slope {h1_slope:.4f} in 1.0 +- 0.1")


def test_c9_role_swap(report):
    c = cfg("omega_disk.toml")
    p = c.problem
    assert bool(p.subdomain.contains(np.array(c.z))[0])
    tol = p.tol
    worst, parts = 0.0, []
    for e in c.epsilons:
        d = fd_quotient(p, c.z, e, variant="direct")
        s = fd_quotient(p, c.z, e, variant="swapped")
        # a relative residual tol bounds each cost to about tol |J|; the quotient divides by |omega_eps|
        bound = 2.0 * tol * abs(d.J_unperturbed) / (e**2 * p.shape.area)
        worst = max(worst, abs(d.quotient - s.quotient) / bound)
        parts.append(f"eps={e:g}: {d.quotient:.10e} vs {s.quotient:.10e}")
    assert report(9, "role-swap symmetry", worst <= 1.0,
                  f"{'; '.join(parts)}; max gap / tolerance = {worst:.2e} <= 1")


VERIFY_RUNS = [
    ("verify-fd", "linear_benchmark.toml"),
    ("verify-rates", "linear_rates.toml"),
    ("verify-keps", "reluctivity_benchmark.toml"),
    ("verify-projection", "linear_benchmark.toml"),
]


def test_c10_determinism(report, tmp_path):
    mismatched, compared = [], 0
    for cmd, name in VERIFY_RUNS:
        outs = [tmp_path / f"{cmd}-{i}" for i in (1, 2)]
        codes = [main([cmd, "--config", str(CONFIGS / name), "--out", str(o), "--deterministic"]) for o in outs]
        if codes != [0, 0]:
            mismatched.append(f"{cmd} exit codes {codes}")
        csvs = sorted(q.name for q in outs[0].glob("*.csv"))
        if not csvs or csvs != sorted(q.name for q in outs[1].glob("*.csv")):
            mismatched.append(f"{cmd} CSV sets differ")
        for n in csvs:
            compared += 1
            if not filecmp.cmp(outs[0] / n, outs[1] / n, shallow=False):
                mismatched.append(f"{cmd}/{n}")
    ok = not mismatched
    assert report(10, "determinism", ok,
                  f"{compared} CSVs over {len(VERIFY_RUNS)} verify commands byte-identical"
                  if ok else "differences: " + ", ".join(mismatched))

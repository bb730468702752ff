import math

import numpy as np
import pytest

from quasitd.corrector import CorrectorConfig, solve_K, solve_Q
from quasitd.errors import PreconditionError
from quasitd.fem import CostWeights, FeField
from quasitd.materials import TwoPhaseMaterial, linear, reluctivity
from quasitd.mesh import InclusionShape, Placement, structured_square_mesh
from quasitd.problem import BENCHMARK_Z, benchmark_problem
from quasitd.topoderiv import (
    CASE_COMPLEMENT,
    CASE_OMEGA,
    classify_point,
    compute_R1,
    compute_R2,
    dl_G,
    relative_gap,
    td_field,
    td_from_gradients,
    td_point,
)

DISK = InclusionShape.disk(1.0)
RELUCT = reluctivity(1.0, 3.0, 1.0, 1)
LIN21 = TwoPhaseMaterial(linear(2.0), linear(1.0))
QUASI = TwoPhaseMaterial(RELUCT, linear(1.0))
CFG = CorrectorConfig()
W01 = CostWeights(0.0, 1.0)


@pytest.fixture(scope="module")
def K_lin():
    return solve_K(LIN21, (1.0, 0.0), CFG.mesh(DISK), shape=DISK)


@pytest.fixture(scope="module")
def benchmark_state():
    prob = benchmark_problem(h=1 / 40)
    mesh = prob.mesh()
    u0 = prob.solve_state(mesh)
    p0 = prob.solve_adjoint(mesh, u0)
    return prob, mesh, u0, p0


def test_dl_G_examples():
    assert dl_G(TwoPhaseMaterial(RELUCT, RELUCT), (1.0, 2.0), (0.5, 0.5)) == 0.0
    assert dl_G(LIN21, (1.0, 0.0), (1.0, 0.0)) == 1.0
    assert dl_G(LIN21, (1.0, 0.0), (0.0, 1.0)) == 0.0


def test_R1_linear_is_energy(K_lin):
    assert compute_R1(LIN21, K_lin, (1.0, 0.0)) == pytest.approx(K_lin.grad_energy / math.pi, rel=1e-12)
    assert compute_R1(LIN21, K_lin, (1.0, 0.0)) == pytest.approx(2 / 9, rel=0.05)


def test_R2_linear_disk(K_lin):
    assert compute_R2(LIN21, K_lin, (1.0, 0.0)) == pytest.approx(-1 / 3, rel=0.05)


def test_R_terms_vanish_for_zero_K():
    same = TwoPhaseMaterial(linear(1.0), linear(1.0))
    K = solve_K(same, (1.0, 0.0), CFG.mesh(DISK))
    assert compute_R1(same, K, (1.0, 0.0)) == 0.0
    assert compute_R2(LIN21, K, (1.0, 0.0)) == 0.0


def test_linear_disk_all_routes_near_8_9():
    bd = td_from_gradients(LIN21, (1.0, 0.0), (1.0, 0.0), W01, DISK, CFG)
    assert bd.td_lagrangian == bd.dl_G + bd.R1 + bd.R2
    for v in (bd.td_lagrangian, bd.td_alternative, bd.td_averaged):
        assert v == pytest.approx(8 / 9, rel=0.05)


@pytest.mark.parametrize("U0,P0", [((1.0, 0.0), (1.0, 0.0)), ((0.7, -1.3), (0.2, 0.9)), ((2.5, 0.5), (-1.0, 0.4))])
def test_quasilinear_route_equivalence(U0, P0):
    bd = td_from_gradients(QUASI, U0, P0, W01, DISK, CFG)
    floor = 1e-12 * (1 + abs(bd.dl_G))
    assert relative_gap(bd.td_lagrangian, bd.td_alternative, 1.0, floor) <= 0.01
    assert relative_gap(bd.td_lagrangian, bd.td_averaged, 1.0, floor) <= 0.01


def test_averaged_R_term_matches_R1_plus_R2():
    mesh = CFG.mesh(DISK)
    U0, P0 = (1.0, 0.0), (1.0, 0.0)
    K = solve_K(QUASI, U0, mesh, shape=DISK)
    Q = solve_Q(QUASI, U0, P0, K, W01, mesh, shape=DISK)
    R = float((QUASI.a1(np.array(U0)) - QUASI.a2(np.array(U0))) @ Q.inclusion_integral_grad) / math.pi
    assert R == pytest.approx(compute_R1(QUASI, K, P0) + compute_R2(QUASI, K, P0), rel=0.01)


@pytest.mark.parametrize("law", [linear(1.0), RELUCT])
def test_zero_contrast_all_zero(law):
    m = TwoPhaseMaterial(law, law)
    bd = td_from_gradients(m, (1.0, 0.5), (0.3, -0.2), W01, DISK, CFG)
    assert (bd.dl_G, bd.R1, bd.R2, bd.td_lagrangian, bd.td_alternative, bd.td_averaged) == (0, 0, 0, 0, 0, 0)


def test_mass_weight_routes_are_nan():
    bd = td_from_gradients(QUASI, (1.0, 0.0), (1.0, 0.0), CostWeights(1.0, 1.0), DISK, CFG)
    assert math.isnan(bd.td_lagrangian) and math.isnan(bd.td_alternative)
    assert math.isfinite(bd.td_averaged) and bd.td == bd.td_averaged


def test_scaling_of_linear_pieces():
    # with U0, P0 fixed, K depends only on g1/g2: dl_G and R2 scale with the
    # laws while R1 = b int |grad K|^2 / |omega| carries no material factor
    lam = 3.0
    a = td_from_gradients(LIN21, (1.0, 0.4), (0.5, 1.0), W01, DISK, CFG)
    b = td_from_gradients(TwoPhaseMaterial(linear(2.0 * lam), linear(lam)), (1.0, 0.4), (0.5, 1.0), W01, DISK, CFG)
    assert b.dl_G == pytest.approx(lam * a.dl_G, rel=1e-12)
    assert b.R2 == pytest.approx(lam * a.R2, rel=1e-9)
    assert b.R1 == pytest.approx(a.R1, rel=1e-9)


# -- points on the hold-all mesh ---------------------------------------------


def test_benchmark_recovers_unit_gradients(benchmark_state):
    prob, mesh, u0, p0 = benchmark_state
    bd = td_point(BENCHMARK_Z, mesh, prob.material, u0, p0, prob.weights, prob.shape, prob.corrector)
    assert np.allclose(bd.U0, [1.0, 0.0], atol=0.01)
    assert np.allclose(bd.P0, [1.0, 0.0], atol=0.01)
    assert bd.case == CASE_COMPLEMENT
    assert bd.td == pytest.approx(8 / 9, rel=0.05)


def test_classify_point_rejections():
    omega = Placement(InclusionShape.disk(0.2), (0.5, 0.5))
    prob = benchmark_problem(h=1 / 20).with_(subdomain=omega)
    mesh = prob.mesh()
    assert classify_point(mesh, (0.5, 0.5)) == CASE_OMEGA
    assert classify_point(mesh, (0.15, 0.15)) == CASE_COMPLEMENT
    for z in [(1.5, 0.5), (0.01, 0.5), (0.7, 0.5)]:
        with pytest.raises(PreconditionError):
            classify_point(mesh, z)


def test_td_field_single_point_matches_td_point(benchmark_state):
    prob, mesh, u0, p0 = benchmark_state
    args = (mesh, prob.material, u0, p0, prob.weights, prob.shape, prob.corrector)
    bd = td_point(BENCHMARK_Z, *args)
    (row,) = td_field([BENCHMARK_Z], *args)
    assert row.error == ""
    assert row.breakdown.td == bd.td and row.breakdown.td_averaged == bd.td_averaged


def test_td_field_zero_contrast():
    m = structured_square_mesh(10)
    u = FeField.interpolate(m, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y), masked=True)
    same = TwoPhaseMaterial(linear(1.0), linear(1.0))
    rows = td_field([(0.3, 0.4), (0.6, 0.5)], m, same, u, u, W01, DISK, CFG)
    assert all(r.breakdown.td == 0 for r in rows)


def test_td_field_mirror_symmetry_and_errors(benchmark_state):
    prob, mesh, u0, p0 = benchmark_state
    pts = [(0.5, 0.3), (0.5, 0.7), (0.5, 0.3), (0.0, 0.5)]
    rows = td_field(pts, mesh, prob.material, u0, p0, prob.weights, prob.shape, prob.corrector)
    a, b, c, d = rows
    assert relative_gap(a.breakdown.td, b.breakdown.td) <= 1e-3
    assert c.breakdown.td == a.breakdown.td
    assert d.breakdown is None and "boundary" in d.error


def test_relative_gap_floor():
    assert relative_gap(1.0, 1.01) == pytest.approx(0.01 / 1.01)
    assert relative_gap(0.0, 1e-15) == 1e-15

import math

import numpy as np
import pytest

from quasitd.asymptotics import (
    _check_eps,
    fd_quotient,
    fd_study,
    fit_slope,
    keps_convergence,
    projection_diagnostic,
    rate_state_difference,
    strictly_decreasing,
)
from quasitd.corrector import CorrectorConfig, solve_K
from quasitd.errors import PreconditionError
from quasitd.materials import TwoPhaseMaterial, linear
from quasitd.mesh import InclusionShape, Placement
from quasitd.problem import BENCHMARK_Z, benchmark_problem
from quasitd.topoderiv import td_point

DISK = InclusionShape.disk(1.0)
SAME = TwoPhaseMaterial(linear(1.0), linear(1.0))


def test_fd_zero_contrast():
    prob = benchmark_problem(SAME, h=1 / 20)
    r = fd_quotient(prob, BENCHMARK_Z, 0.08)
    assert abs(r.quotient) <= 1e-10 and r.h1_diff <= 1e-10


def test_rate_slope_not_applicable_without_contrast():
    prob = benchmark_problem(SAME, h=1 / 20)
    study = rate_state_difference(prob, BENCHMARK_Z, [0.16, 0.08, 0.04, 0.02])
    assert all(r.h1_diff <= 1e-10 for r in study.rows)
    assert math.isnan(study.fitted_slopes["h1_diff"])


def test_keps_zero_contrast():
    prob = benchmark_problem(SAME, h=1 / 20)
    study = keps_convergence(prob, BENCHMARK_Z, [0.08, 0.04])
    assert all(r.keps_gap <= 1e-10 and not r.error for r in study.rows)


def test_h1_diff_grows_with_contrast():
    eps = [0.08, 0.04]
    weak = fd_study(benchmark_problem(TwoPhaseMaterial(linear(2.0), linear(1.0)), h=1 / 40), BENCHMARK_Z, eps)
    strong = fd_study(benchmark_problem(TwoPhaseMaterial(linear(4.0), linear(1.0)), h=1 / 40), BENCHMARK_Z, eps)
    assert all(s.h1_diff > w.h1_diff for s, w in zip(strong.rows, weak.rows))


def test_td_error_decreases_under_refinement():
    errs = []
    for h in (1 / 20, 1 / 40, 1 / 80):
        prob = benchmark_problem(h=h)
        mesh = prob.mesh()
        u0 = prob.solve_state(mesh)
        p0 = prob.solve_adjoint(mesh, u0)
        bd = td_point(BENCHMARK_Z, mesh, prob.material, u0, p0, prob.weights, prob.shape, prob.corrector)
        errs.append(abs(bd.td - 8 / 9))
    assert strictly_decreasing(errs)


def test_fd_rejects_inclusion_outside_domain():
    prob = benchmark_problem(h=1 / 20)
    with pytest.raises(PreconditionError):
        fd_quotient(prob, (0.1, 0.5), 0.2)


def test_fd_unknown_variant():
    prob = benchmark_problem(h=1 / 20).with_(subdomain=Placement(InclusionShape.disk(0.3), (0.5, 0.5)))
    with pytest.raises(PreconditionError):
        fd_quotient(prob, (0.55, 0.5), 0.02, variant="other")


def test_fd_study_records_row_errors():
    prob = benchmark_problem(h=1 / 20)
    study = fd_study(prob, (0.2, 0.5), [0.4, 0.02])
    assert study.rows[0].error and not study.rows[1].error


@pytest.mark.parametrize("eps,kw", [
    ([0.1, 0.2], {}),
    ([0.1, -0.05], {}),
    ([0.1], dict(minimum=2)),
    ([0.16, 0.08, 0.05, 0.02], dict(geometric=True)),
])
def test_epsilon_sequence_validation(eps, kw):
    with pytest.raises(PreconditionError):
        _check_eps(eps, **kw)


def test_fit_slope():
    x = np.array([0.1, 0.05, 0.025])
    assert fit_slope(x, 3 * x**1.5) == pytest.approx(1.5)
    assert math.isnan(fit_slope(x, [1.0, 0.0, 1.0]))


def test_projection_zero_K():
    cfg = CorrectorConfig(R=40.0, snap_radii=(10.0, 20.0))
    K = solve_K(SAME, (1.0, 0.0), cfg.mesh(DISK))
    assert [r.gap for r in projection_diagnostic(K, [10.0, 20.0, 40.0])] == [0.0, 0.0, 0.0]


def test_projection_needs_ring_radius():
    cfg = CorrectorConfig(R=40.0, h_near=0.05, h_far=1.6)
    K = solve_K(TwoPhaseMaterial(linear(2.0), linear(1.0)), (1.0, 0.0), cfg.mesh(DISK))
    with pytest.raises(PreconditionError):
        projection_diagnostic(K, [13.37])
    with pytest.raises(PreconditionError):
        projection_diagnostic(K, [80.0])

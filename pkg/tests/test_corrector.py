import math

import numpy as np
import pytest

from quasitd.corrector import (
    CorrectorConfig,
    polarization_matrix,
    solve_K,
    solve_Q,
    solve_Qtilde,
    truncation_study,
)
from quasitd.errors import ConfigurationError, PreconditionError
from quasitd.fem import CostWeights
from quasitd.materials import TwoPhaseMaterial, linear, reluctivity
from quasitd.mesh import InclusionShape, structured_square_mesh

DISK = InclusionShape.disk(1.0)
RELUCT = reluctivity(1.0, 3.0, 1.0, 1)
LIN21 = TwoPhaseMaterial(linear(2.0), linear(1.0))
QUASI = TwoPhaseMaterial(RELUCT, linear(1.0))
COARSE = CorrectorConfig(R=20.0, h_near=0.05, h_far=1.0)
# disk transmission: interior gradient of K is (g2 - g1) / (g1 + g2) U0
C21 = (1.0 - 2.0) / (1.0 + 2.0)


@pytest.fixture(scope="module")
def coarse_mesh():
    return COARSE.mesh(DISK)


@pytest.fixture(scope="module")
def default_mesh():
    return CorrectorConfig().mesh(DISK)


@pytest.mark.parametrize("law", [linear(1.5), RELUCT])
def test_K_vanishes_without_contrast(coarse_mesh, law):
    K = solve_K(TwoPhaseMaterial(law, law), (1.0, 0.5), coarse_mesh, shape=DISK)
    assert np.array_equal(K.field.values, np.zeros(coarse_mesh.num_vertices))
    assert K.grad_energy == 0.0 and K.iterations == 0


def test_K_vanishes_for_zero_U0(coarse_mesh):
    K = solve_K(QUASI, (0.0, 0.0), coarse_mesh, shape=DISK)
    assert np.array_equal(K.field.values, np.zeros(coarse_mesh.num_vertices))


def test_K_superposition_linear(coarse_mesh):
    U, V = np.array([1.0, 0.3]), np.array([-0.2, 0.7])
    a = solve_K(LIN21, U, coarse_mesh).field.values
    b = solve_K(LIN21, V, coarse_mesh).field.values
    c = solve_K(LIN21, U + V, coarse_mesh).field.values
    assert np.max(np.abs(c - a - b)) <= 1e-10


def test_K_result_invariants(coarse_mesh):
    K = solve_K(QUASI, (1.0, 0.0), coarse_mesh, shape=DISK)
    assert np.all(K.field.values[coarse_mesh.boundary_vertex] == 0.0)
    assert K.grad_energy > 0 and np.all(np.isfinite(K.inclusion_mean_grad))
    assert K.truncation_radius == pytest.approx(20.0)
    assert K.inclusion_area == pytest.approx(math.pi)
    assert K.history[-1] <= 1e-10 * K.history[0]


def test_K_linear_disk_mean_gradient(default_mesh):
    K = solve_K(LIN21, (1.0, 0.0), default_mesh, shape=DISK)
    assert np.linalg.norm(K.inclusion_mean_grad - [C21, 0.0]) <= 0.02 / 3


def test_K_rejects_non_corrector_mesh():
    with pytest.raises(PreconditionError):
        solve_K(LIN21, (1.0, 0.0), structured_square_mesh(4))


def test_Qtilde_vanishes(coarse_mesh):
    same = TwoPhaseMaterial(RELUCT, RELUCT)
    assert not solve_Qtilde(same, (1.0, 0.0), (1.0, 0.0), coarse_mesh).field.values.any()
    assert not solve_Qtilde(QUASI, (1.0, 0.0), (0.0, 0.0), coarse_mesh).field.values.any()


def test_Qtilde_linear_disk_mean_gradient(default_mesh):
    Qt = solve_Qtilde(LIN21, (1.0, 0.0), (1.0, 0.0), default_mesh, shape=DISK)
    assert np.linalg.norm(Qt.inclusion_mean_grad - [C21, 0.0]) <= 0.02 / 3


def test_Qtilde_linear_in_P0(coarse_mesh):
    U0, P0 = (0.8, -0.4), np.array([0.3, 1.1])
    a = solve_Qtilde(QUASI, U0, P0, coarse_mesh).field.values
    b = solve_Qtilde(QUASI, U0, -2.5 * P0, coarse_mesh).field.values
    assert np.max(np.abs(b + 2.5 * a)) <= 1e-10 * max(1.0, np.max(np.abs(a)))


def test_Q_vanishes_without_contrast_and_b(coarse_mesh):
    same = TwoPhaseMaterial(RELUCT, RELUCT)
    w = CostWeights(1.0, 0.0)
    K = solve_K(same, (1.0, 0.0), coarse_mesh)
    Q = solve_Q(same, (1.0, 0.0), (1.0, 0.0), K, w, coarse_mesh)
    assert not Q.field.values.any()


def test_Q_equals_Qtilde_linear_without_b(coarse_mesh):
    U0, P0 = (1.0, 0.2), (0.5, -1.0)
    K = solve_K(LIN21, U0, coarse_mesh)
    Q = solve_Q(LIN21, U0, P0, K, CostWeights(1.0, 0.0), coarse_mesh)
    Qt = solve_Qtilde(LIN21, U0, P0, coarse_mesh)
    assert np.max(np.abs(Q.field.values - Qt.field.values)) <= 1e-9


def test_polarization_zero_without_contrast(coarse_mesh):
    M = polarization_matrix(TwoPhaseMaterial(RELUCT, RELUCT), (1.0, 0.0), coarse_mesh)
    assert np.array_equal(M.entries, np.zeros((2, 2)))


def test_polarization_linear_disk(default_mesh):
    M = polarization_matrix(LIN21, (1.0, 0.0), default_mesh).entries
    target = math.pi * C21 * np.eye(2)
    assert np.linalg.norm(M - target) <= 0.02 * np.linalg.norm(target)
    assert max(abs(M[0, 1]), abs(M[1, 0])) <= 1e-3 * np.linalg.norm(M)


def test_polarization_swapped_roles(default_mesh):
    M = polarization_matrix(TwoPhaseMaterial(linear(1.0), linear(2.0)), (1.0, 0.0), default_mesh).entries
    target = math.pi * (1.0 / 3.0) * np.eye(2)
    assert np.linalg.norm(M - target) <= 0.02 * np.linalg.norm(target)


def test_polarization_reproduces_Qtilde(coarse_mesh):
    U0, P0 = (0.6, 0.9), np.array([0.4, -0.7])
    M = polarization_matrix(QUASI, U0, coarse_mesh)
    Qt = solve_Qtilde(QUASI, U0, P0, coarse_mesh)
    assert np.allclose(M @ P0, Qt.inclusion_integral_grad, atol=1e-10)


def test_truncation_linear_cauchy_decreasing():
    rows = truncation_study(LIN21, (1.0, 0.0), DISK, (10, 20, 40, 80), h_near=0.05)
    diffs = [r.cauchy_diff for r in rows[:-1]]
    assert all(b < a for a, b in zip(diffs, diffs[1:]))
    assert math.isnan(rows[-1].cauchy_diff)


def test_truncation_no_contrast_rows_zero():
    same = TwoPhaseMaterial(linear(1.0), linear(1.0))
    rows = truncation_study(same, (1.0, 0.0), DISK, (10, 20), h_near=0.1)
    assert all(r.grad_energy == 0 and not r.mean_grad.any() for r in rows)


def test_truncation_reluctivity_energy_non_decreasing():
    rows = truncation_study(QUASI, (1.0, 0.0), DISK, (10, 20, 40), h_near=0.05)
    e = [r.grad_energy for r in rows]
    assert all(b >= a - 1e-8 for a, b in zip(e, e[1:]))


def test_truncation_rejects_small_or_unsorted_radii():
    with pytest.raises(PreconditionError):
        truncation_study(LIN21, (1.0, 0.0), DISK, (4, 20))
    with pytest.raises(PreconditionError):
        truncation_study(LIN21, (1.0, 0.0), DISK, (20, 10))


def test_config_defaults_follow_diameter():
    c = CorrectorConfig().resolved(InclusionShape.disk(0.5))
    assert (c.R, c.h_near, c.h_far) == (25.0, 0.02, 1.0)


def test_config_infeasible_sizing():
    with pytest.raises(ConfigurationError):
        CorrectorConfig(R=5.0, h_far=10.0).mesh(DISK)

"""Verification harness for the small-inclusion limits.

* :func:`fd_quotient`: ``(J(eps) - J(0)) / |omega_eps|`` on one shared mesh,
* :func:`rate_state_difference`: ``|u_eps - u_0|_{H^1}`` against ``eps``,
* :func:`keps_convergence`: ``|grad K_eps - grad K|_{L2}`` with
  ``K_eps(x) = (u_eps - u_0)(z + eps x) / eps`` sampled on the corrector mesh,
* :func:`projection_diagnostic`: energy projections of ``K`` onto smaller disks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corrector import CorrectorResult, solve_K
from .errors import PreconditionError, QuasiTDError
from .fem import (
    FeField,
    apply_dirichlet_matrix,
    element_gradients,
    eval_cost,
    geometry,
    h1_norm,
    linear_solve,
    newton_solve,
    recover_gradient,
    stiffness_matrix,
)
from .mesh import INCLUSION, MATRIX_COMPLEMENT, MATRIX_OMEGA, Mesh
from .problem import Problem

CASE_COMPLEMENT = "z_in_complement"
CASE_OMEGA = "z_in_omega"


@dataclass
class FdResult:
    eps: float
    quotient: float
    J_perturbed: float
    J_unperturbed: float
    h1_diff: float
    case: str
    mesh: Mesh
    u0: FeField
    u_eps: FeField


def _swap_matrix_tags(tags: np.ndarray) -> np.ndarray:
    out = tags.copy()
    out[tags == MATRIX_OMEGA] = MATRIX_COMPLEMENT
    out[tags == MATRIX_COMPLEMENT] = MATRIX_OMEGA
    return out


def _case(problem: Problem, z) -> str:
    if problem.subdomain is not None and bool(problem.subdomain.contains(np.asarray(z, dtype=float))[0]):
        return CASE_OMEGA
    return CASE_COMPLEMENT


def fd_quotient(problem: Problem, z, eps: float, variant: str = "direct") -> FdResult:
    """Finite-difference quotient of the cost for an inclusion at ``z``.

    Perturbed and unperturbed states are solved on the same mesh; the
    unperturbed run gives the inclusion elements the tag of their host.
    For ``z`` in Omega the removal branch is computed.  ``variant`` selects
    how: ``"direct"`` keeps the material and assigns the second phase to the
    inclusion; ``"swapped"`` runs the role-exchanged insertion, i.e. the
    material with exchanged phases on the mesh with exchanged matrix tags.
    """
    z = np.asarray(z, dtype=float).reshape(2)
    mesh = problem.mesh(perturbation=(z, eps))
    case = _case(problem, z)
    host = mesh.inclusion_host()
    tags = mesh.region_tag
    incl = tags == INCLUSION
    m = problem.material
    unpert = tags.copy()
    unpert[incl] = host
    if case == CASE_COMPLEMENT:
        pert = tags
    elif variant == "direct":
        pert = tags.copy()
        pert[incl] = MATRIX_COMPLEMENT
    elif variant == "swapped":
        m = m.swapped()
        pert = _swap_matrix_tags(tags)
        unpert = _swap_matrix_tags(unpert)
    else:
        raise PreconditionError(f"unknown variant {variant!r}")
    u_d = problem.target(mesh)
    w = problem.weights

    def solve(tg):
        return newton_solve(mesh, m, problem.f, tol=problem.tol, max_iter=problem.max_iter, tags=tg)

    u0 = solve(unpert)
    ue = solve(pert)
    J0 = eval_cost(mesh, u0, u_d, w)
    Je = eval_cost(mesh, ue, u_d, w)
    area = eps**2 * problem.shape.area
    diff = h1_norm(mesh, ue.values - u0.values)
    return FdResult(eps, (Je - J0) / area, Je, J0, diff, case, mesh, u0, ue)


@dataclass
class EpsRow:
    eps: float
    J_perturbed: float = math.nan
    quotient: float = math.nan
    h1_diff: float = math.nan
    keps_gap: float = math.nan
    error: str = ""


@dataclass
class EpsStudy:
    z: np.ndarray
    epsilons: list
    rows: list
    fitted_slopes: dict = field(default_factory=dict)


def _check_eps(epsilons, minimum=1, geometric=False):
    eps = [float(e) for e in epsilons]
    if len(eps) < minimum:
        raise PreconditionError(f"need at least {minimum} epsilon values")
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise PreconditionError("epsilons must be positive and strictly decreasing")
    if geometric:
        ratios = np.array(eps[1:]) / np.array(eps[:-1])
        if np.ptp(ratios) > 1e-9 * abs(ratios[0]):
            raise PreconditionError("epsilons must form a geometric sequence")
    return eps


def fit_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``; NaN if undefined."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or np.any(~np.isfinite(y)) or np.any(y <= 0):
        return math.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def fd_study(problem: Problem, z, epsilons) -> EpsStudy:
    """Quotients and state differences for a decreasing epsilon sequence."""
    eps = _check_eps(epsilons)
    rows = []
    for e in eps:
        try:
            r = fd_quotient(problem, z, e)
            rows.append(EpsRow(e, r.J_perturbed, r.quotient, r.h1_diff))
        except QuasiTDError as exc:
            rows.append(EpsRow(e, error=str(exc)))
    return EpsStudy(np.asarray(z, dtype=float), eps, rows)


def rate_state_difference(problem: Problem, z, epsilons, zero_tol: float = 1e-10) -> EpsStudy:
    """``|u_eps - u_0|_{H^1}`` per epsilon with the fitted log-log slope.

    The slope is NaN (not applicable) when every difference is below
    ``zero_tol``, as happens without contrast.
    """
    _check_eps(epsilons, minimum=4, geometric=True)
    study = fd_study(problem, z, epsilons)
    diffs = [r.h1_diff for r in study.rows]
    if all(d <= zero_tol for d in diffs):
        slope = math.nan
    else:
        slope = fit_slope(study.epsilons, diffs)
    study.fitted_slopes["h1_diff"] = slope
    return study


_QUAD_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])


def keps_gap(fd: FdResult, z, K: CorrectorResult) -> float:
    """``|grad K_eps - grad K|_{L2(B_R)}`` by 3-point quadrature on the corrector mesh.

    ``grad K_eps(x) = grad(u_eps - u_0)(z + eps x)`` is located on the hold-all
    mesh; points outside ``D`` contribute zero because ``u_eps - u_0``
    vanishes there.
    """
    cm = K.mesh
    p = cm.vertices[cm.triangles]  # (nt, 3, 2)
    qp = np.einsum("qi,eik->eqk", _QUAD_BARY, p).reshape(-1, 2)
    phys = np.asarray(z, dtype=float) + fd.eps * qp
    hm = fd.mesh
    Gd = element_gradients(hm, fd.u_eps.values - fd.u0.values)
    tri = hm.locate(phys)
    Ge = np.zeros_like(phys)
    ok = tri >= 0
    Ge[ok] = Gd[tri[ok]]
    GK = np.repeat(K.grads, 3, axis=0)
    w = np.repeat(geometry(cm).areas / 3.0, 3)
    return math.sqrt(float(np.sum(w * np.sum((Ge - GK) ** 2, axis=1))))


def keps_convergence(problem: Problem, z, epsilons) -> EpsStudy:
    """Strong-convergence study of the rescaled state variation.

    For each epsilon, ``K`` is solved on the corrector mesh with ``U0``
    recovered from the unperturbed state on the same hold-all mesh, so the
    comparison only measures the small-inclusion limit.  The effective
    material is exchanged for points in Omega.
    """
    eps = _check_eps(epsilons)
    z = np.asarray(z, dtype=float).reshape(2)
    cmesh = problem.corrector.mesh(problem.shape)
    c = problem.corrector.resolved(problem.shape)
    rows = []
    for e in eps:
        try:
            fd = fd_quotient(problem, z, e)
            m = problem.material.swapped() if fd.case == CASE_OMEGA else problem.material
            U0 = recover_gradient(fd.mesh, fd.u0, z)
            K = solve_K(m, U0, cmesh, shape=problem.shape, tol=c.tol, max_iter=c.max_iter)
            rows.append(EpsRow(e, fd.J_perturbed, fd.quotient, fd.h1_diff, keps_gap(fd, z, K)))
        except QuasiTDError as exc:
            rows.append(EpsRow(e, error=str(exc)))
    study = EpsStudy(z, eps, rows)
    study.fitted_slopes["keps_gap"] = fit_slope(eps, [r.keps_gap for r in rows])
    return study


@dataclass
class ProjectionRow:
    R: float
    gap: float


def projection_diagnostic(K: CorrectorResult, radii) -> list[ProjectionRow]:
    """Energy projection of ``K`` onto ``H^1_0(B_R)`` for each radius.

    ``P_R(K)`` solves ``int_{B_R} grad P . grad psi = int_{B_R} grad K . grad psi``
    on the sub-disk of the corrector mesh (the radius must be one of its
    rings) and is extended by zero; the gap is measured on the full mesh.
    """
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise PreconditionError("radii must be strictly increasing")
    mesh = K.mesh
    r_v = np.hypot(mesh.vertices[:, 0], mesh.vertices[:, 1])
    r_c = np.hypot(mesh.centroids[:, 0], mesh.centroids[:, 1])
    areas = geometry(mesh).areas
    scale = max(1.0, K.truncation_radius)
    rows = []
    for R in radii:
        on_ring = np.abs(r_v - R) <= 1e-10 * scale
        if R > K.truncation_radius * (1 + 1e-12) or not on_ring.any():
            raise PreconditionError(f"radius {R} is not a ring of the corrector mesh")
        inner = r_c < R
        used = np.zeros(mesh.num_vertices, dtype=bool)
        used[mesh.triangles[inner].ravel()] = True
        coeff = inner.astype(float)
        S = stiffness_matrix(mesh, coeff)
        rhs = S @ K.field.values
        fixed = on_ring | ~used | mesh.boundary_vertex
        rhs[fixed] = 0.0
        A = apply_dirichlet_matrix(S, fixed)
        P = linear_solve(A, rhs)
        P[fixed] = 0.0
        G = element_gradients(mesh, P) - K.grads
        rows.append(ProjectionRow(R, math.sqrt(float(np.sum(areas * np.sum(G * G, axis=1))))))
    return rows


def strictly_decreasing(values) -> bool:
    v = list(values)
    return all(np.isfinite(v)) and all(b < a for a, b in zip(v, v[1:]))

"""Exterior transmission problems on truncated disks.

The unbounded problems are posed on ``B_R`` with zero Dirichlet data at
``|x| = R``.  Only gradients enter any formula, so fixing the additive
constant this way is harmless.

* ``K``: nonlinear corrector of the state,
* ``Q~``: variation of the adjoint (linear, frozen Jacobian at ``U0``),
* ``Q``: limit of the averaged-adjoint variation (s-averaged Jacobian),
* the polarization matrix ``M`` with ``int_omega grad Q~ = M P0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, PreconditionError
from .fem import (
    GAUSS_S,
    GAUSS_W,
    CostWeights,
    FeField,
    apply_dirichlet_matrix,
    damped_newton,
    element_gradients,
    flux_vector,
    geometry,
    jacobian_matrix,
    linear_solve,
)
from .materials import TwoPhaseMaterial
from .mesh import INCLUSION, MATRIX_COMPLEMENT, InclusionShape, Mesh, generate_disk_mesh


@dataclass(frozen=True)
class CorrectorConfig:
    """Truncation and sizing of the corrector mesh.

    ``None`` selects the defaults relative to the inclusion diameter ``d``:
    ``R = 25 d`` (50 for the unit disk), ``h_near = d / 50`` and
    ``h_far = R / 25``.  ``grading`` is the slope of the linear sizing ramp
    away from the inclusion; ``None`` ramps exactly from ``h_near`` to
    ``h_far`` over the whole disk.
    """

    R: float | None = None
    h_near: float | None = None
    h_far: float | None = None
    grading: float | None = 0.1
    tol: float = 1e-10
    max_iter: int = 25
    snap_radii: tuple = ()

    def resolved(self, shape: InclusionShape) -> "CorrectorConfig":
        d = shape.diameter
        R = 25.0 * d if self.R is None else float(self.R)
        h_near = d / 50.0 if self.h_near is None else float(self.h_near)
        h_far = R / 25.0 if self.h_far is None else float(self.h_far)
        return CorrectorConfig(R, h_near, h_far, self.grading, self.tol, self.max_iter,
                               tuple(sorted(float(r) for r in self.snap_radii)))

    def mesh(self, shape: InclusionShape) -> Mesh:
        c = self.resolved(shape)
        return _cached_disk_mesh(c.R, c.h_far, c.h_near, shape, c.grading, c.snap_radii)


@lru_cache(maxsize=16)
def _cached_disk_mesh(R, h_far, h_near, shape, grading, snap):
    return generate_disk_mesh(R, h_far, h_near, shape, grading=grading, snap_radii=snap)


@dataclass(eq=False)
class CorrectorResult:
    """Solution of one truncated exterior problem and derived scalars."""

    kind: str
    mesh: Mesh
    field: FeField
    U0: np.ndarray
    P0: np.ndarray | None
    truncation_radius: float
    grad_energy: float
    inclusion_mean_grad: np.ndarray
    inclusion_integral_grad: np.ndarray
    inclusion_area: float
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def grads(self) -> np.ndarray:
        g = self.__dict__.get("_grads")
        if g is None:
            g = element_gradients(self.mesh, self.field)
            self.__dict__["_grads"] = g
        return g


def _truncation_radius(mesh: Mesh) -> float:
    b = mesh.vertices[mesh.boundary_vertex]
    return float(np.max(np.hypot(b[:, 0], b[:, 1])))


def _check_corrector_mesh(mesh: Mesh):
    tags = set(np.unique(mesh.region_tag).tolist())
    if not tags <= {INCLUSION, MATRIX_COMPLEMENT} or INCLUSION not in tags:
        raise PreconditionError("corrector mesh must carry only inclusion and matrix_complement tags")


def _phase_tags(mesh: Mesh):
    tags = mesh.region_tag
    return tags, tags == INCLUSION


def _inclusion_area(mesh: Mesh, shape: InclusionShape | None) -> float:
    if shape is not None:
        return shape.area
    return mesh.region_area(INCLUSION)


def _result(kind, mesh, values, U0, P0, shape, iterations=0, history=()):
    f = FeField(mesh, values)
    G = element_gradients(mesh, f)
    areas = geometry(mesh).areas
    incl = mesh.region_tag == INCLUSION
    integral = (areas[incl, None] * G[incl]).sum(axis=0)
    mesh_area = float(areas[incl].sum())
    res = CorrectorResult(
        kind=kind,
        mesh=mesh,
        field=f,
        U0=np.asarray(U0, dtype=float).copy(),
        P0=None if P0 is None else np.asarray(P0, dtype=float).copy(),
        truncation_radius=_truncation_radius(mesh),
        grad_energy=float(np.sum(areas * np.sum(G * G, axis=1))),
        inclusion_mean_grad=integral / mesh_area,
        inclusion_integral_grad=integral,
        inclusion_area=_inclusion_area(mesh, shape),
        iterations=iterations,
        history=list(history),
    )
    res.__dict__["_grads"] = G
    return res


def _contrast_flux(m: TwoPhaseMaterial, U0) -> np.ndarray:
    """``a1(U0) - a2(U0)`` for the effective phases."""
    y = np.asarray(U0, dtype=float).reshape(1, 2)
    return (m.flux([INCLUSION], y) - m.flux([MATRIX_COMPLEMENT], y))[0]


def _contrast_jacobian(m: TwoPhaseMaterial, U0) -> np.ndarray:
    y = np.asarray(U0, dtype=float).reshape(1, 2)
    return (m.jacobian([INCLUSION], y) - m.jacobian([MATRIX_COMPLEMENT], y))[0]


def solve_K(m: TwoPhaseMaterial, U0, corrector_mesh: Mesh, shape: InclusionShape | None = None,
            tol: float = 1e-10, max_iter: int = 25) -> CorrectorResult:
    """Nonlinear corrector ``K``.

    Solves ``int (A(grad K + U0) - A(U0)) . grad(phi) = -int_omega (a1(U0) - a2(U0)) . grad(phi)``
    by damped Newton from ``K = 0``.
    """
    mesh = corrector_mesh
    _check_corrector_mesh(mesh)
    U0 = np.asarray(U0, dtype=float).reshape(2)
    tags, incl = _phase_tags(mesh)
    nt = mesh.num_triangles
    base_grad = np.broadcast_to(U0, (nt, 2))
    base_flux = m.flux(tags, base_grad)
    contrast = np.broadcast_to(_contrast_flux(m, U0), (int(incl.sum()), 2))
    rhs = -flux_vector(mesh, contrast, elements=np.flatnonzero(incl))
    bnd = mesh.boundary_vertex

    def residual(x):
        G = element_gradients(mesh, x) + U0
        r = flux_vector(mesh, m.flux(tags, G) - base_flux) - rhs
        r[bnd] = 0.0
        return r

    def tangent(x):
        G = element_gradients(mesh, x) + U0
        return apply_dirichlet_matrix(jacobian_matrix(mesh, m.jacobian(tags, G)), bnd)

    x, info = damped_newton(residual, tangent, np.zeros(mesh.num_vertices), tol=tol, max_iter=max_iter)
    x[bnd] = 0.0
    return _result("K", mesh, x, U0, None, shape, info.iterations, info.history)


def _solve_transposed(T: sp.csr_matrix, rhs_list):
    A = sp.csc_matrix(T.T)
    lu = splu(A)
    out = []
    for b in rhs_list:
        x = lu.solve(b)
        nb = np.linalg.norm(b)
        if nb > 0 and np.linalg.norm(A @ x - b) > 1e-10 * nb:
            x = linear_solve(A, b)
        out.append(x)
    return out


def _qtilde_rhs(mesh, m, U0, P0, incl):
    dJ = _contrast_jacobian(m, U0)
    g = np.broadcast_to(dJ.T @ np.asarray(P0, dtype=float), (int(incl.sum()), 2))
    return -flux_vector(mesh, g, elements=np.flatnonzero(incl))


def solve_Qtilde(m: TwoPhaseMaterial, U0, P0, corrector_mesh: Mesh,
                 shape: InclusionShape | None = None) -> CorrectorResult:
    """Adjoint variation ``Q~`` with the frozen Jacobian ``dA(U0)`` (transposed system)."""
    mesh = corrector_mesh
    _check_corrector_mesh(mesh)
    U0 = np.asarray(U0, dtype=float).reshape(2)
    P0 = np.asarray(P0, dtype=float).reshape(2)
    tags, incl = _phase_tags(mesh)
    J0 = m.jacobian(tags, np.broadcast_to(U0, (mesh.num_triangles, 2)))
    T = apply_dirichlet_matrix(jacobian_matrix(mesh, J0), mesh.boundary_vertex)
    rhs = _qtilde_rhs(mesh, m, U0, P0, incl)
    rhs[mesh.boundary_vertex] = 0.0
    if not rhs.any():
        x = np.zeros(mesh.num_vertices)
    else:
        (x,) = _solve_transposed(T, [rhs])
    x[mesh.boundary_vertex] = 0.0
    return _result("Qtilde", mesh, x, U0, P0, shape)


def solve_Q(m: TwoPhaseMaterial, U0, P0, K: CorrectorResult, w: CostWeights, corrector_mesh: Mesh,
            shape: InclusionShape | None = None) -> CorrectorResult:
    """Averaged-adjoint variation ``Q``.

    The matrix is the s-averaged Jacobian ``int_0^1 dA(s grad K + U0) ds``
    (5-point Gauss).  The right-hand side consists of the averaged Jacobian
    increment acting on ``P0``, the contrast of the Jacobians on the
    inclusion and ``-b int grad K . grad(psi)``.  The ``a`` weight does not
    enter the limit problem.
    """
    mesh = corrector_mesh
    if K.mesh is not mesh:
        raise PreconditionError("K must be solved on the same corrector mesh")
    _check_corrector_mesh(mesh)
    U0 = np.asarray(U0, dtype=float).reshape(2)
    P0 = np.asarray(P0, dtype=float).reshape(2)
    tags, incl = _phase_tags(mesh)
    nt = mesh.num_triangles
    GK = K.grads
    J0 = m.jacobian(tags, np.broadcast_to(U0, (nt, 2)))
    Jbar = np.zeros((nt, 2, 2))
    for s, wq in zip(GAUSS_S, GAUSS_W):
        Jbar += wq * m.jacobian(tags, U0 + s * GK)
    T = apply_dirichlet_matrix(jacobian_matrix(mesh, Jbar), mesh.boundary_vertex)
    g = np.einsum("eji,j->ei", Jbar - J0, P0)
    rhs = -flux_vector(mesh, g) + _qtilde_rhs(mesh, m, U0, P0, incl)
    if w.b:
        rhs -= w.b * flux_vector(mesh, GK)
    rhs[mesh.boundary_vertex] = 0.0
    if not rhs.any():
        x = np.zeros(mesh.num_vertices)
    else:
        (x,) = _solve_transposed(T, [rhs])
    x[mesh.boundary_vertex] = 0.0
    return _result("Q", mesh, x, U0, P0, shape)


@dataclass(frozen=True)
class PolarizationMatrix:
    """``int_omega grad Q~ = entries @ P0``."""

    entries: np.ndarray

    def __matmul__(self, P0):
        return self.entries @ np.asarray(P0, dtype=float)


def polarization_matrix(m: TwoPhaseMaterial, U0, corrector_mesh: Mesh) -> PolarizationMatrix:
    """Columns from ``Q~`` with ``P0 = e1, e2`` sharing one factorisation."""
    mesh = corrector_mesh
    _check_corrector_mesh(mesh)
    U0 = np.asarray(U0, dtype=float).reshape(2)
    tags, incl = _phase_tags(mesh)
    J0 = m.jacobian(tags, np.broadcast_to(U0, (mesh.num_triangles, 2)))
    T = apply_dirichlet_matrix(jacobian_matrix(mesh, J0), mesh.boundary_vertex)
    rhs = [_qtilde_rhs(mesh, m, U0, e, incl) for e in np.eye(2)]
    for r in rhs:
        r[mesh.boundary_vertex] = 0.0
    if not any(r.any() for r in rhs):
        return PolarizationMatrix(np.zeros((2, 2)))
    cols = _solve_transposed(T, rhs)
    areas = geometry(mesh).areas
    M = np.zeros((2, 2))
    for j, x in enumerate(cols):
        x[mesh.boundary_vertex] = 0.0
        G = element_gradients(mesh, x)
        M[:, j] = (areas[incl, None] * G[incl]).sum(axis=0)
    return PolarizationMatrix(M)


@dataclass
class TruncationRow:
    R: float
    grad_energy: float
    mean_grad: np.ndarray
    cauchy_diff: float


def truncation_study(m: TwoPhaseMaterial, U0, inclusion: InclusionShape, radii, h_near: float | None = None,
                     grading: float | None = 0.1, h_far=None, tol: float = 1e-10) -> list[TruncationRow]:
    """Solve ``K`` for increasing truncation radii on comparably graded meshes.

    All meshes share ``h_near`` and the grading slope, so their near field
    coincides; ``h_far`` defaults to ``R / 25`` per radius.
    ``cauchy_diff`` of row ``i`` is ``|mean_grad(R_{i+1}) - mean_grad(R_i)|``
    (NaN for the last row).
    """
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise PreconditionError("radii must be strictly increasing")
    if radii and radii[0] < 4.0 * inclusion.diameter:
        raise PreconditionError("radii must be at least 4 times the inclusion diameter")
    rows = []
    for R in radii:
        cfg = CorrectorConfig(R=R, h_near=h_near, h_far=h_far, grading=grading, tol=tol)
        mesh = cfg.mesh(inclusion)
        K = solve_K(m, U0, mesh, shape=inclusion, tol=tol)
        rows.append(TruncationRow(R, K.grad_energy, K.inclusion_mean_grad, math.nan))
    for a, b in zip(rows, rows[1:]):
        a.cauchy_diff = float(np.linalg.norm(b.mean_grad - a.mean_grad))
    return rows


def check_shape_config(shape: InclusionShape, cfg: CorrectorConfig):
    c = cfg.resolved(shape)
    if c.R < 4.0 * shape.max_radius:
        raise ConfigurationError("corrector radius must exceed 4 times the inclusion radius")
    return c

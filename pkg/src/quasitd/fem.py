"""P1 finite elements for the quasi-linear state, adjoint and cost.

All assembly is vectorised over elements.  P1 gradients are constant per
element, so the flux integrals are exact one-point evaluations; loads given
as callables use the 3-point edge-midpoint rule.  Reductions use
``np.bincount`` and COO-to-CSR summation, both with a fixed summation order,
so results are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import PreconditionError, SolverError
from .materials import TwoPhaseMaterial
from .mesh import Mesh

SparseMatrix = sp.csr_matrix

# 5-point Gauss-Legendre rule on [0, 1]
_GX, _GW = np.polynomial.legendre.leggauss(5)
GAUSS_S = 0.5 * (_GX + 1.0)
GAUSS_W = 0.5 * _GW


@dataclass(frozen=True)
class CostWeights:
    """Weights of ``a * int (u-u_d)^2 + b * int |grad(u-u_d)|^2``."""

    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise PreconditionError("cost weights must be finite and non-negative")
        if self.a == 0 and self.b == 0:
            raise PreconditionError("cost weights must not both vanish")


@dataclass(frozen=True, eq=False)
class FeField:
    """P1 field on a mesh with a Dirichlet mask (prescribed value zero).

    ``dirichlet_mask=None`` selects the mesh boundary; data fields such as
    targets use :meth:`data` which masks nothing.
    """

    mesh: Mesh
    values: np.ndarray
    dirichlet_mask: np.ndarray | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        if len(vals) != self.mesh.num_vertices:
            raise PreconditionError(
                f"field has {len(vals)} coefficients for a mesh with {self.mesh.num_vertices} vertices"
            )
        mask = self.mesh.boundary_vertex if self.dirichlet_mask is None else self.dirichlet_mask
        mask = np.array(mask, dtype=bool).reshape(-1)
        if len(mask) != len(vals):
            raise PreconditionError("dirichlet mask length mismatch")
        if np.any(vals[mask] != 0.0):
            raise PreconditionError("masked coefficients must hold their prescribed value 0")
        vals.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "dirichlet_mask", mask)

    @classmethod
    def zeros(cls, mesh: Mesh) -> "FeField":
        return cls(mesh, np.zeros(mesh.num_vertices))

    @classmethod
    def data(cls, mesh: Mesh, values) -> "FeField":
        return cls(mesh, values, np.zeros(mesh.num_vertices, dtype=bool))

    @classmethod
    def interpolate(cls, mesh: Mesh, fun: Callable, masked: bool = False) -> "FeField":
        v = np.asarray(fun(mesh.vertices[:, 0], mesh.vertices[:, 1]), dtype=float)
        v = np.broadcast_to(v, (mesh.num_vertices,)).copy()
        if masked:
            v[mesh.boundary_vertex] = 0.0
            return cls(mesh, v)
        return cls.data(mesh, v)

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# geometry and basic matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Geometry:
    areas: np.ndarray  # (nt,)
    grads: np.ndarray  # (nt, 3, 2) gradients of the barycentric basis
    rows: np.ndarray
    cols: np.ndarray


def geometry(mesh: Mesh) -> _Geometry:
    cached = mesh.__dict__.get("_fem_geometry")
    if cached is not None:
        return cached
    p = mesh.vertices[mesh.triangles]
    area = mesh.signed_areas
    i1 = [1, 2, 0]
    i2 = [2, 0, 1]
    g = np.empty((mesh.num_triangles, 3, 2))
    g[:, :, 0] = p[:, i1, 1] - p[:, i2, 1]
    g[:, :, 1] = p[:, i2, 0] - p[:, i1, 0]
    g /= (2.0 * area)[:, None, None]
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    geo = _Geometry(area, g, rows, cols)
    object.__setattr__(mesh, "_fem_geometry", geo)
    return geo


def _check_mesh(mesh: Mesh, *fields):
    for f in fields:
        if isinstance(f, FeField) and f.mesh is not mesh:
            raise PreconditionError("field lives on a different mesh")


def _vals(u, mesh: Mesh) -> np.ndarray:
    if isinstance(u, FeField):
        _check_mesh(mesh, u)
        return u.values
    v = np.asarray(u, dtype=float).reshape(-1)
    if len(v) != mesh.num_vertices:
        raise PreconditionError("coefficient vector length does not match the mesh")
    return v


def element_gradients(mesh: Mesh, u) -> np.ndarray:
    """Constant gradient of a P1 function on every element, shape ``(nt, 2)``."""
    g = geometry(mesh)
    return np.einsum("ei,eik->ek", _vals(u, mesh)[mesh.triangles], g.grads)


def _assemble_matrix(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    g = geometry(mesh)
    n = mesh.num_vertices
    A = sp.coo_matrix((local.ravel(), (g.rows, g.cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def stiffness_matrix(mesh: Mesh, coeff=None) -> sp.csr_matrix:
    """``int c grad(phi_j) . grad(phi_i)`` with optional per-element scalar ``c``."""
    g = geometry(mesh)
    w = g.areas if coeff is None else g.areas * np.asarray(coeff, dtype=float)
    local = w[:, None, None] * np.einsum("eik,ejk->eij", g.grads, g.grads)
    return _assemble_matrix(mesh, local)


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    g = geometry(mesh)
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _assemble_matrix(mesh, g.areas[:, None, None] * base[None])


def matrix_cache(mesh: Mesh, name: str) -> sp.csr_matrix:
    key = "_fem_" + name
    cached = mesh.__dict__.get(key)
    if cached is None:
        cached = {"mass": mass_matrix, "stiffness": stiffness_matrix}[name](mesh)
        object.__setattr__(mesh, key, cached)
    return cached


def flux_vector(mesh: Mesh, flux: np.ndarray, elements=None) -> np.ndarray:
    """``int F . grad(phi_i)`` for a per-element flux ``F`` (optionally a subset)."""
    g = geometry(mesh)
    if elements is None:
        c = g.areas[:, None] * np.einsum("ek,eik->ei", flux, g.grads)
        t = mesh.triangles
    else:
        c = g.areas[elements, None] * np.einsum("ek,eik->ei", flux, g.grads[elements])
        t = mesh.triangles[elements]
    return np.bincount(t.ravel(), weights=c.ravel(), minlength=mesh.num_vertices)


def jacobian_matrix(mesh: Mesh, J: np.ndarray) -> sp.csr_matrix:
    """``T[i, j] = int (J grad(phi_j)) . grad(phi_i)`` for per-element ``J``."""
    g = geometry(mesh)
    local = g.areas[:, None, None] * np.einsum("eik,ekl,ejl->eij", g.grads, J, g.grads)
    return _assemble_matrix(mesh, local)


def load_vector(mesh: Mesh, f) -> np.ndarray:
    """``int f phi_i`` for a constant, vertex values, a field or a callable ``f(x, y)``."""
    g = geometry(mesh)
    if f is None:
        return np.zeros(mesh.num_vertices)
    if callable(f):
        p = mesh.vertices[mesh.triangles]
        m01 = 0.5 * (p[:, 0] + p[:, 1])
        m12 = 0.5 * (p[:, 1] + p[:, 2])
        m20 = 0.5 * (p[:, 2] + p[:, 0])
        f01, f12, f20 = (np.asarray(f(m[:, 0], m[:, 1]), dtype=float) * np.ones(len(m)) for m in (m01, m12, m20))
        c = (g.areas / 6.0)[:, None] * np.column_stack([f01 + f20, f01 + f12, f12 + f20])
        return np.bincount(mesh.triangles.ravel(), weights=c.ravel(), minlength=mesh.num_vertices)
    if isinstance(f, FeField) or np.ndim(f) > 0:
        return matrix_cache(mesh, "mass") @ _vals(f, mesh)
    c = np.repeat((float(f) * g.areas / 3.0)[:, None], 3, axis=1)
    return np.bincount(mesh.triangles.ravel(), weights=c.ravel(), minlength=mesh.num_vertices)


def apply_dirichlet_matrix(A: sp.spmatrix, mask: np.ndarray) -> sp.csr_matrix:
    """Zero the masked rows and columns and put ones on their diagonal."""
    keep = sp.diags((~mask).astype(float))
    A = (keep @ A @ keep).tocsr()
    A = A + sp.diags(mask.astype(float))
    A = A.tocsr()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _tags(mesh, tags):
    return mesh.region_tag if tags is None else np.asarray(tags)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


def assemble_residual(mesh: Mesh, m: TwoPhaseMaterial, u, f, tags=None, load=None) -> np.ndarray:
    """``int A(x, grad u) . grad(phi_i) - int f phi_i`` with Dirichlet rows zeroed.

    ``tags`` overrides the mesh region tags (used to switch an inclusion
    off); ``load`` may pass a precomputed load vector.
    """
    G = element_gradients(mesh, u)
    r = flux_vector(mesh, m.flux(_tags(mesh, tags), G))
    r -= load_vector(mesh, f) if load is None else load
    r[mesh.boundary_vertex] = 0.0
    return r


def assemble_tangent(mesh: Mesh, m: TwoPhaseMaterial, u, tags=None) -> sp.csr_matrix:
    """``int dA(x, grad u)(grad phi_j) . grad(phi_i)`` with identity Dirichlet rows/cols."""
    G = element_gradients(mesh, u)
    T = jacobian_matrix(mesh, m.jacobian(_tags(mesh, tags), G))
    return apply_dirichlet_matrix(T, mesh.boundary_vertex)


@dataclass
class NewtonInfo:
    iterations: int
    history: list = field(default_factory=list)
    halvings: list = field(default_factory=list)


def linear_solve(A: sp.spmatrix, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Sparse LU solve with a residual check."""
    try:
        x = splu(sp.csc_matrix(A)).solve(b)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorisation failed: {exc}") from None
    nb = np.linalg.norm(b)
    res = np.linalg.norm(A @ x - b)
    if not np.all(np.isfinite(x)) or (nb > 0 and res > rtol * nb and res > 1e-14):
        raise SolverError(f"linear solve residual {res:.3e} exceeds tolerance (|b|={nb:.3e})")
    return x


def damped_newton(residual: Callable, tangent: Callable, x0: np.ndarray, tol: float = 1e-10,
                  max_iter: int = 25, max_halvings: int = 30) -> tuple[np.ndarray, NewtonInfo]:
    """Damped Newton with step halving until the residual norm decreases.

    Converged when ``|r(x)| <= tol * |r(x0)|``.  Raises :class:`SolverError`
    carrying the residual history on failure.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    nrm = float(np.linalg.norm(r))
    info = NewtonInfo(0, [nrm])
    target = tol * nrm
    if nrm == 0.0:
        return x, info
    for it in range(1, max_iter + 1):
        dx = -linear_solve(tangent(x), r)
        lam = 1.0
        for halving in range(max_halvings + 1):
            x_try = x + lam * dx
            r_try = residual(x_try)
            n_try = float(np.linalg.norm(r_try))
            if n_try < nrm:
                break
            lam *= 0.5
        else:
            info.history.append(n_try)
            raise SolverError(
                f"line search failed to reduce the residual after {max_halvings} halvings", info.history
            )
        x, r, nrm = x_try, r_try, n_try
        info.iterations = it
        info.history.append(nrm)
        info.halvings.append(halving)
        if nrm <= target:
            return x, info
    raise SolverError(f"Newton did not converge in {max_iter} iterations", info.history)


def newton_solve(mesh: Mesh, m: TwoPhaseMaterial, f, initial: FeField | None = None, tol: float = 1e-10,
                 max_iter: int = 25, tags=None, return_info: bool = False):
    """Solve the state equation ``-div A(x, grad u) = f`` with ``u = 0`` on the boundary."""
    load = load_vector(mesh, f)
    x0 = np.zeros(mesh.num_vertices) if initial is None else _vals(initial, mesh).copy()
    x0[mesh.boundary_vertex] = 0.0
    x, info = damped_newton(
        lambda v: assemble_residual(mesh, m, v, None, tags=tags, load=load),
        lambda v: assemble_tangent(mesh, m, v, tags=tags),
        x0, tol=tol, max_iter=max_iter,
    )
    x[mesh.boundary_vertex] = 0.0
    u = FeField(mesh, x)
    return (u, info) if return_info else u


# ---------------------------------------------------------------------------
# cost and adjoints
# ---------------------------------------------------------------------------


def _weighted_operator(mesh: Mesh, w: CostWeights, e: np.ndarray) -> np.ndarray:
    """``a M e + b S e``."""
    out = np.zeros(mesh.num_vertices)
    if w.a:
        out += w.a * (matrix_cache(mesh, "mass") @ e)
    if w.b:
        out += w.b * (matrix_cache(mesh, "stiffness") @ e)
    return out


def eval_cost(mesh: Mesh, u, u_d, w: CostWeights) -> float:
    """``a int (u-u_d)^2 + b int |grad(u-u_d)|^2``, exact for P1."""
    e = _vals(u, mesh) - _vals(u_d, mesh)
    return float(e @ _weighted_operator(mesh, w, e))


def solve_adjoint(mesh: Mesh, m: TwoPhaseMaterial, u0, u_d, w: CostWeights, tags=None) -> FeField:
    """Adjoint ``p``: ``T(u0)^T p = -(2a M + 2b S)(u0 - u_d)``."""
    e = _vals(u0, mesh) - _vals(u_d, mesh)
    rhs = -2.0 * _weighted_operator(mesh, w, e)
    rhs[mesh.boundary_vertex] = 0.0
    T = assemble_tangent(mesh, m, u0, tags=tags)
    p = linear_solve(T.T.tocsr(), rhs)
    p[mesh.boundary_vertex] = 0.0
    return FeField(mesh, p)


def averaged_tangent(mesh: Mesh, m: TwoPhaseMaterial, u0, u_eps, tags=None) -> sp.csr_matrix:
    """``int_0^1 T(s u_eps + (1-s) u0) ds`` by 5-point Gauss in ``s``."""
    G0 = element_gradients(mesh, u0)
    G1 = element_gradients(mesh, u_eps)
    tg = _tags(mesh, tags)
    J = np.zeros((mesh.num_triangles, 2, 2))
    for s, wq in zip(GAUSS_S, GAUSS_W):
        J += wq * m.jacobian(tg, G0 + s * (G1 - G0))
    return apply_dirichlet_matrix(jacobian_matrix(mesh, J), mesh.boundary_vertex)


def solve_averaged_adjoint(mesh: Mesh, m: TwoPhaseMaterial, u0, u_eps, u_d, w: CostWeights,
                           tags=None) -> FeField:
    """Averaged adjoint ``p_eps`` for the perturbed operator (``mesh`` tags)."""
    _check_mesh(mesh, u0, u_eps, u_d)
    s = _vals(u_eps, mesh) + _vals(u0, mesh) - 2.0 * _vals(u_d, mesh)
    rhs = -_weighted_operator(mesh, w, s)
    rhs[mesh.boundary_vertex] = 0.0
    T = averaged_tangent(mesh, m, u0, u_eps, tags=tags)
    p = linear_solve(T.T.tocsr(), rhs)
    p[mesh.boundary_vertex] = 0.0
    return FeField(mesh, p)


def lagrangian(mesh: Mesh, m: TwoPhaseMaterial, u, p, f, u_d, w: CostWeights, tags=None) -> float:
    """``G(u, p) = J(u) + int A(x, grad u) . grad p - int f p``."""
    r = assemble_residual(mesh, m, u, f, tags=tags)
    return eval_cost(mesh, u, u_d, w) + float(r @ _vals(p, mesh))


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def h1_norm(mesh: Mesh, v) -> float:
    x = _vals(v, mesh)
    return math.sqrt(max(0.0, float(x @ (matrix_cache(mesh, "mass") @ x) + x @ (matrix_cache(mesh, "stiffness") @ x))))


def evaluate(field_or_mesh, values=None, points=None) -> np.ndarray:
    """Point values of a P1 function; points outside the mesh give 0.

    Call as ``evaluate(field, points=pts)`` or ``evaluate(mesh, values, pts)``.
    """
    if isinstance(field_or_mesh, FeField):
        mesh, vals = field_or_mesh.mesh, field_or_mesh.values
    else:
        mesh, vals = field_or_mesh, np.asarray(values, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.locate(pts)
    out = np.zeros(len(pts))
    ok = tri >= 0
    if ok.any():
        lam = mesh.barycentric(pts[ok], tri[ok])
        out[ok] = np.sum(lam * vals[mesh.triangles[tri[ok]]], axis=1)
    return out


def recover_gradient(mesh: Mesh, u, z) -> np.ndarray:
    """Area-weighted average of element gradients around ``z``.

    If ``z`` is a mesh vertex the patch is its vertex star; otherwise it is
    the set of triangles containing ``z`` (one, or two on an edge).
    """
    z = np.asarray(z, dtype=float).reshape(2)
    G = element_gradients(mesh, u)
    areas = geometry(mesh).areas
    scale = max(1.0, float(np.max(np.abs(mesh.vertices))))
    d = np.hypot(mesh.vertices[:, 0] - z[0], mesh.vertices[:, 1] - z[1])
    v = int(np.argmin(d))
    if d[v] <= 1e-12 * scale:
        patch = np.flatnonzero(np.any(mesh.triangles == v, axis=1))
    else:
        t0 = int(mesh.locate(z[None])[0])
        if t0 < 0:
            raise PreconditionError(f"point ({z[0]:g}, {z[1]:g}) lies outside the mesh")
        near = np.argsort(np.hypot(*(mesh.centroids - z).T))[:16]
        lam = mesh.barycentric(np.repeat(z[None], len(near), axis=0), near)
        patch = near[np.all(lam >= -1e-12, axis=1)]
        if t0 not in patch:
            patch = np.append(patch, t0)
    w = areas[patch]
    return (w[:, None] * G[patch]).sum(axis=0) / w.sum()

"""Hold-all problem description shared by the CLI and the verification harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corrector import CorrectorConfig
from .errors import ConfigurationError
from .fem import CostWeights, FeField, newton_solve, solve_adjoint
from .materials import TwoPhaseMaterial, linear
from .mesh import InclusionShape, Mesh, Placement, generate_holdall_mesh


@dataclass(frozen=True, eq=False)
class Problem:
    """State problem on the rectangle ``bounds`` with an optional subdomain.

    ``f`` and ``u_d`` are constants or callables ``g(x, y)``; ``u_d`` is
    interpolated at the vertices.  The near-field sizing of hold-all meshes
    around a perturbation reuses the corrector configuration so that the
    rescaled patch matches the corrector mesh.
    """

    bounds: tuple = (0.0, 1.0, 0.0, 1.0)
    material: TwoPhaseMaterial = field(default_factory=lambda: TwoPhaseMaterial(linear(2.0), linear(1.0)))
    f: object = 0.0
    u_d: object = 0.0
    weights: CostWeights = field(default_factory=CostWeights)
    h: float = 1.0 / 40.0
    shape: InclusionShape = field(default_factory=lambda: InclusionShape.disk(1.0))
    subdomain: Placement | None = None
    corrector: CorrectorConfig = field(default_factory=CorrectorConfig)
    tol: float = 1e-10
    max_iter: int = 25

    def with_(self, **changes) -> "Problem":
        return replace(self, **changes)

    def near_field(self):
        """``(h_near, grading, h_far)`` of the ring patch in unscaled units."""
        c = self.corrector.resolved(self.shape)
        grading = c.grading
        if grading is None:
            grading = (c.h_far - c.h_near) / (c.R - self.shape.max_radius)
        return c.h_near, grading, c.h_far

    def mesh(self, perturbation=None) -> Mesh:
        """Hold-all mesh, optionally resolving ``(z, eps)`` with the problem's shape."""
        pert = None
        if perturbation is not None:
            z, eps = perturbation
            pert = (tuple(float(v) for v in z), float(eps), self.shape)
        h_near, grading, h_far = self.near_field()
        return generate_holdall_mesh(self.bounds, self.h, self.subdomain, pert,
                                     h_near=h_near, grading=grading, h_far=h_far)

    def target(self, mesh: Mesh) -> FeField:
        if callable(self.u_d):
            return FeField.interpolate(mesh, self.u_d)
        if np.ndim(self.u_d) == 0:
            return FeField.data(mesh, np.full(mesh.num_vertices, float(self.u_d)))
        vals = np.asarray(self.u_d, dtype=float)
        if len(vals) != mesh.num_vertices:
            raise ConfigurationError("vertex values of u_d do not match the mesh")
        return FeField.data(mesh, vals)

    def solve_state(self, mesh: Mesh, tags=None, return_info=False):
        return newton_solve(mesh, self.material, self.f, tol=self.tol, max_iter=self.max_iter, tags=tags,
                            return_info=return_info)

    def solve_adjoint(self, mesh: Mesh, u0: FeField, tags=None) -> FeField:
        return solve_adjoint(mesh, self.material, u0, self.target(mesh), self.weights, tags=tags)


def benchmark_problem(material: TwoPhaseMaterial | None = None, h: float = 1.0 / 40.0, **kw) -> Problem:
    """Unit-square benchmark with ``U0 = P0 = (1, 0)`` at ``z = (0.5, 0.5)`` for ``a2 = linear(1)``.

    ``u0 = -sin(2 pi x) sin(pi y) / (2 pi)`` solves ``-Laplace u0 = f`` with
    vanishing Hessian at ``z``; ``u_d = 1.5 u0`` makes the adjoint
    ``p0 = -2 (u0 - u_d) = u0`` in the linear case, hence ``P0 = U0``.
    The subdomain is empty so the state does not depend on ``a1``.
    """
    two_pi = 2.0 * math.pi

    def u_exact(x, y):
        return -np.sin(two_pi * x) * np.sin(math.pi * y) / two_pi

    def f(x, y):
        return -(5.0 * math.pi / 2.0) * np.sin(two_pi * x) * np.sin(math.pi * y)

    def u_d(x, y):
        return 1.5 * u_exact(x, y)

    if material is None:
        material = TwoPhaseMaterial(linear(2.0), linear(1.0))
    return Problem(material=material, f=f, u_d=u_d, h=h, **kw)


BENCHMARK_Z = (0.5, 0.5)

"""Nonlinear flux laws ``y -> a(y)`` and the two-phase operator.

A :class:`FluxFunction` bundles a vectorised value map, its Jacobian and the
declared structural constants

* ``c1``: strong monotonicity, ``(a(x)-a(y)).(x-y) >= c1 |x-y|^2``,
* ``c2``: Lipschitz continuity of ``a``,
* ``c3``: Lipschitz continuity of ``da``.

:func:`check_assumptions` is a randomized falsifier for these constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, PreconditionError
from .mesh import INCLUSION, MATRIX_COMPLEMENT, MATRIX_OMEGA, TAG_NAMES


@dataclass(frozen=True, eq=False)
class FluxFunction:
    """A material law with Jacobian and declared constants.

    ``value`` maps an array of shape ``(..., 2)`` to fluxes of the same
    shape; ``jacobian`` maps it to ``(..., 2, 2)`` matrices with
    ``J[..., i, j] = d a_i / d y_j``.  Undeclared constants are ``None``.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    c1: float | None = None
    c2: float | None = None
    c3: float | None = None
    params: dict = field(default_factory=dict)
    checked: bool = True

    def __post_init__(self):
        for label, c in (("c1", self.c1), ("c2", self.c2)):
            if c is not None and not c > 0:
                raise ConfigurationError(f"declared {label} must be positive, got {c}")
        if self.c3 is not None and not self.c3 >= 0:
            raise ConfigurationError(f"declared c3 must be non-negative, got {self.c3}")
        if self.c1 is not None and self.c2 is not None and self.c1 > self.c2:
            raise ConfigurationError("declared constants violate c1 <= c2")

    @property
    def constants(self):
        return (self.c1, self.c2, self.c3)

    def __call__(self, y):
        return self.value(np.asarray(y, dtype=float))

    def jac(self, y):
        return self.jacobian(np.asarray(y, dtype=float))

    def describe(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{self.name}({args})"

    def same_law(self, other: "FluxFunction") -> bool:
        """True if both laws come from the same preset with equal parameters."""
        return self is other or (
            self.name == other.name and self.params == other.params and self.name != "custom"
        )


def linear(gamma: float) -> FluxFunction:
    """``a(y) = gamma * y``."""
    gamma = float(gamma)
    if not gamma > 0:
        raise ConfigurationError(f"linear preset needs gamma > 0, got {gamma}")

    def value(y):
        return gamma * y

    def jacobian(y):
        return np.broadcast_to(gamma * np.eye(2), y.shape[:-1] + (2, 2)).copy()

    return FluxFunction("linear", value, jacobian, gamma, gamma, 0.0, {"gamma": gamma})


def _reluctivity_parts(alpha, beta, tau, k):
    diff = beta - alpha

    def nu(s):
        s2k = s ** (2 * k)
        return alpha + diff * s2k / (s2k + tau)

    def nu_prime_over_s(s):
        # written without dividing by s so that s = 0 is fine
        return diff * 2 * k * s ** (2 * k - 2) * tau / (s ** (2 * k) + tau) ** 2

    def nu_prime(s):
        return s * nu_prime_over_s(s)

    def nu_second(s):
        c = diff * 2 * k * tau
        return c * s ** (2 * k - 2) * ((2 * k - 1) * tau - (2 * k + 1) * s ** (2 * k)) / (s ** (2 * k) + tau) ** 3

    return nu, nu_prime, nu_prime_over_s, nu_second


def _sup_1d(fun, s_max):
    """Supremum of a smooth function on [0, s_max]: dense sweep then polish."""
    grid = np.concatenate([np.linspace(0.0, s_max, 20001), np.geomspace(1e-6, s_max, 4001)])
    vals = fun(grid)
    i = int(np.argmax(vals))
    best = float(vals[i])
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    if hi > lo:
        res = minimize_scalar(lambda s: -np.asarray(fun(np.asarray(s, dtype=float))).item(), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-14})
        best = max(best, -float(res.fun))
    return best


def reluctivity(alpha: float, beta: float, tau: float, k: int) -> FluxFunction:
    """Bounded reluctivity law ``a(y) = nu(|y|) y``.

    ``nu(s) = alpha + (beta - alpha) s^(2k) / (s^(2k) + tau)`` increases from
    ``alpha`` to ``beta``.  The Jacobian is
    ``nu I + (nu'(s)/s) y y^T`` with eigenvalues ``nu`` (tangential) and
    ``nu + s nu'`` (radial); constants are obtained from 1D sweeps of these
    radial profiles.
    """
    alpha, beta, tau = float(alpha), float(beta), float(tau)
    if not (0 < alpha < beta) or not tau > 0 or int(k) != k or k < 1:
        raise ConfigurationError("reluctivity preset needs 0 < alpha < beta, tau > 0, integer k >= 1")
    k = int(k)
    nu, nu_p, nu_ps, nu_pp = _reluctivity_parts(alpha, beta, tau, k)

    def value(y):
        s = np.hypot(y[..., 0], y[..., 1])
        return nu(s)[..., None] * y

    def jacobian(y):
        s = np.hypot(y[..., 0], y[..., 1])
        J = nu_ps(s)[..., None, None] * (y[..., :, None] * y[..., None, :])
        J[..., 0, 0] += nu(s)
        J[..., 1, 1] += nu(s)
        return J

    # nu' >= 0 so the radial eigenvalue dominates and alpha bounds from below
    s_max = 50.0 * tau ** (1.0 / (2 * k))
    c2 = _sup_1d(lambda s: nu(s) + s * nu_p(s), s_max)
    phis = np.linspace(0.0, math.pi, 181)

    def d_jac_norm(s):
        # spectral norm of the symmetric directional derivative [[cA, sB], [sB, cB]]
        s = np.atleast_1d(s)
        A = (2 * nu_p(s) + s * nu_pp(s))[:, None]
        B = nu_p(s)[:, None]
        c, sn = np.cos(phis)[None, :], np.sin(phis)[None, :]
        m00, m11, m01 = c * A, c * B, sn * B
        norm = np.abs(0.5 * (m00 + m11)) + np.sqrt(0.25 * (m00 - m11) ** 2 + m01**2)
        return np.max(norm, axis=-1).reshape(np.shape(s))

    c3 = _sup_1d(d_jac_norm, s_max)
    pad = 1.0 + 1e-9
    return FluxFunction(
        "reluctivity", value, jacobian, alpha, c2 * pad, c3 * pad,
        {"alpha": alpha, "beta": beta, "tau": tau, "k": k},
    )


def p_laplace(p: float, delta: float = 1.0, unchecked: bool = False) -> FluxFunction:
    """Regularized p-Laplacian ``a(y) = (delta^2 + |y|^2)^((p-2)/2) y``.

    For ``p != 2`` it is not globally strongly monotone and Lipschitz at the
    same time, so it is only available with ``unchecked=True``.
    """
    if not unchecked:
        raise ConfigurationError("p_laplace violates the global structural assumptions; pass unchecked")
    p, delta = float(p), float(delta)
    if not (p > 1 and delta > 0):
        raise ConfigurationError("p_laplace needs p > 1 and delta > 0")
    q = 0.5 * (p - 2.0)

    def value(y):
        r2 = delta**2 + y[..., 0] ** 2 + y[..., 1] ** 2
        return (r2**q)[..., None] * y

    def jacobian(y):
        r2 = delta**2 + y[..., 0] ** 2 + y[..., 1] ** 2
        J = (2 * q * r2 ** (q - 1))[..., None, None] * (y[..., :, None] * y[..., None, :])
        J[..., 0, 0] += r2**q
        J[..., 1, 1] += r2**q
        return J

    return FluxFunction("p_laplace", value, jacobian, None, None, None, {"p": p, "delta": delta}, checked=False)


PRESETS = {"linear": linear, "reluctivity": reluctivity, "p_laplace": p_laplace}


def preset(name: str, **params) -> FluxFunction:
    """Construct a preset law by name, e.g. ``preset("linear", gamma=2)``."""
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown material preset {name!r}; choose from {sorted(PRESETS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for preset {name!r}: {exc}") from None


@dataclass
class AssumptionReport:
    c1_est: float
    c2_est: float
    c3_est: float
    jacobian_error: float
    passed: bool
    failures: list


def check_assumptions(a: FluxFunction, box_half_width: float = 10.0, samples: int = 4000,
                      seed: int = 0) -> AssumptionReport:
    """Estimate ``c1, c2, c3`` by sampling and compare with the declared values.

    Half the pairs are uniform in ``[-W, W]^2``; the other half are close
    pairs (and collinear radial pairs) so that local derivative extremes are
    seen.  The value/Jacobian consistency is checked by forward differences
    at ``t = 1e-4`` and ``1e-5``.
    """
    if samples < 1000:
        raise PreconditionError("check_assumptions needs at least 1000 samples")
    W = float(box_half_width)
    rng = np.random.default_rng(seed)
    n_far = samples // 2
    n_near = samples - n_far
    x = rng.uniform(-W, W, size=(samples, 2))
    y = np.empty_like(x)
    y[:n_far] = rng.uniform(-W, W, size=(n_far, 2))
    step = rng.uniform(1e-3, 1e-1, size=(n_near, 1)) * W
    direction = rng.normal(size=(n_near, 2))
    # every other close pair is radial (collinear with the origin)
    radial = np.arange(n_near) % 2 == 0
    direction[radial] = x[n_far:][radial]
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    y[n_far:] = x[n_far:] + step * direction
    d = x - y
    dn2 = np.sum(d * d, axis=1)
    keep = dn2 > 0
    d, dn2 = d[keep], dn2[keep]
    ax, ay = a(x[keep]), a(y[keep])
    da = ax - ay
    c1_est = float(np.min(np.sum(da * d, axis=1) / dn2))
    c2_est = float(np.max(np.linalg.norm(da, axis=1) / np.sqrt(dn2)))
    Jx, Jy = a.jac(x[keep]), a.jac(y[keep])
    c3_est = float(np.max(np.linalg.norm(Jx - Jy, ord=2, axis=(-2, -1)) / np.sqrt(dn2)))

    yy = rng.uniform(-W, W, size=(200, 2))
    v = rng.normal(size=(200, 2))
    Jv = np.einsum("nij,nj->ni", a.jac(yy), v)
    scale = 1.0 + np.linalg.norm(Jv, axis=1)
    errs = []
    for t in (1e-4, 1e-5):
        fd = (a(yy + t * v) - a(yy)) / t
        errs.append(np.max(np.linalg.norm(fd - Jv, axis=1) / scale))
    jac_err = float(max(errs))

    failures = []
    slack = 1e-9
    if not c1_est > 0:
        failures.append(f"monotonicity estimate c1_est={c1_est:.6g} is not positive")
    if jac_err > 1e-3:
        failures.append(f"jacobian inconsistent with value (relative error {jac_err:.3g})")
    if a.c1 is not None and c1_est < a.c1 * (1 - slack) - 1e-12:
        failures.append(f"c1_est={c1_est:.6g} below declared c1={a.c1:.6g}")
    if a.c2 is not None and c2_est > a.c2 * (1 + slack) + 1e-12:
        failures.append(f"c2_est={c2_est:.6g} above declared c2={a.c2:.6g}")
    if a.c3 is not None and c3_est > a.c3 * (1 + slack) + 1e-12:
        failures.append(f"c3_est={c3_est:.6g} above declared c3={a.c3:.6g}")
    return AssumptionReport(c1_est, c2_est, c3_est, jac_err, not failures, failures)


@dataclass(frozen=True, eq=False)
class TwoPhaseMaterial:
    """Two-phase law: ``a1`` on the inclusion and on Omega, ``a2`` elsewhere.

    ``swap=True`` exchanges the roles of the two phases.
    """

    a1: FluxFunction
    a2: FluxFunction
    swap: bool = False

    def swapped(self) -> "TwoPhaseMaterial":
        return TwoPhaseMaterial(self.a1, self.a2, not self.swap)

    @property
    def inner(self) -> FluxFunction:
        """Law effectively used inside the inclusion."""
        return self.a2 if self.swap else self.a1

    @property
    def outer(self) -> FluxFunction:
        """Law effectively used in the complement region."""
        return self.a1 if self.swap else self.a2

    @property
    def zero_contrast(self) -> bool:
        return self.a1.same_law(self.a2)

    def _uses_a1(self, tags) -> np.ndarray:
        tags = np.asarray(tags)
        bad = (tags < 0) | (tags >= len(TAG_NAMES))
        if np.any(bad):
            raise PreconditionError(f"unknown region tag {tags[bad].ravel()[0]}")
        first = (tags == INCLUSION) | (tags == MATRIX_OMEGA)
        return ~first if self.swap else first

    def flux(self, tags, grads) -> np.ndarray:
        """Flux per element for element tags and gradients ``(n, 2)``."""
        grads = np.asarray(grads, dtype=float)
        sel = self._uses_a1(tags)
        out = np.empty_like(grads)
        if sel.any():
            out[sel] = self.a1(grads[sel])
        if (~sel).any():
            out[~sel] = self.a2(grads[~sel])
        return out

    def jacobian(self, tags, grads) -> np.ndarray:
        grads = np.asarray(grads, dtype=float)
        sel = self._uses_a1(tags)
        out = np.empty(grads.shape[:-1] + (2, 2))
        if sel.any():
            out[sel] = self.a1.jac(grads[sel])
        if (~sel).any():
            out[~sel] = self.a2.jac(grads[~sel])
        return out


def two_phase_eval(m: TwoPhaseMaterial, region: int, y) -> np.ndarray:
    """Flux of the two-phase law for a single region tag."""
    y = np.asarray(y, dtype=float)
    return m.flux(np.array([region]), y.reshape(1, 2))[0]


def two_phase_jacobian(m: TwoPhaseMaterial, region: int, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return m.jacobian(np.array([region]), y.reshape(1, 2))[0]


__all__ = [
    "FluxFunction", "TwoPhaseMaterial", "AssumptionReport", "linear", "reluctivity", "p_laplace",
    "preset", "check_assumptions", "two_phase_eval", "two_phase_jacobian", "MATRIX_COMPLEMENT",
]

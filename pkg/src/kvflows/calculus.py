"""Intrinsic derivatives of functionals of empirical measures.

A functional ``F`` acts on a weighted point cloud.  Its intrinsic
derivative ``D_I F(mu)(x)`` is a tangent vector at ``x``; pairing it with a
vector field ``V`` and integrating against ``mu`` gives the derivative of
``F`` along the pushforward of ``mu`` by the flow of ``V``.

Array-level methods take carriers ``X`` of shape ``(..., P, N)`` and weights
``w`` of shape ``(P,)``; the ``manifold`` argument is used for tangent
projections.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ManifoldMismatch, MissingAuxiliary, UnsupportedOrder
from .fields import FieldSystem, InteractionField
from .measure import EmpiricalMeasure
from .solver import FlowSolution, as_system, solve_interacting_flow

__all__ = [
    "LinearFunctional",
    "CompositeFunctional",
    "PairInteractionFunctional",
    "ExpCurve",
    "PolynomialCurve",
    "analytic_intrinsic_derivative",
    "second_intrinsic_derivative",
    "analytic_directional",
    "analytic_double_directional",
    "perturb_measure",
    "fd_intrinsic_directional",
    "empirical_gradient_identity",
    "chain_rule_residual",
    "RotationPath",
    "TranslationPath",
    "StationaryPath",
    "FlowPath",
    "variational_flow",
    "malliavin_flow",
    "malliavin_functional",
    "malliavin_functional_arrays",
    "ito_formula_residual",
    "ito_residual_arrays",
    "directional_arrays",
]


# ---------------------------------------------------------------------------
# scalar curves used by composite functionals
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ExpCurve:
    """``gamma(m) = exp(rate * m)``."""

    rate: float = 1.0

    def value(self, m):
        return np.exp(self.rate * np.asarray(m))

    def d1(self, m):
        return self.rate * self.value(m)

    def d2(self, m):
        return self.rate**2 * self.value(m)


@dataclass(frozen=True)
class PolynomialCurve:
    """``gamma(m) = sum_k c_k m^k``."""

    coeffs: tuple

    def _poly(self):
        return np.polynomial.Polynomial(np.asarray(self.coeffs, dtype=float))

    def value(self, m):
        return self._poly()(np.asarray(m, dtype=float))

    def d1(self, m):
        return self._poly().deriv(1)(np.asarray(m, dtype=float))

    def d2(self, m):
        return self._poly().deriv(2)(np.asarray(m, dtype=float))


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------
class MeasureFunctional:
    """Base class: ``values`` and ``derivative_at`` work on arrays."""

    has_second_derivative = False

    def values(self, X, w):
        raise NotImplementedError

    def derivative_at(self, manifold, X, w, Z):
        """``D_I F(mu_X)(z)`` for points ``Z`` of shape ``(..., Q, N)``."""
        raise NotImplementedError

    def gradients(self, manifold, X, w):
        return self.derivative_at(manifold, X, w, X)

    def __call__(self, mu: EmpiricalMeasure) -> float:
        return float(self.values(mu.points, mu.weights))


@dataclass(frozen=True)
class LinearFunctional(MeasureFunctional):
    """``F(mu) = <f, mu>``."""

    f: object
    has_second_derivative = True

    def values(self, X, w):
        return self.f.value(X) @ w

    def derivative_at(self, manifold, X, w, Z):
        G = self.f.grad(Z)
        shape = np.broadcast_shapes(np.shape(G), np.shape(X)[:-2] + np.shape(Z)[-2:])
        return manifold.project_to_tangent(Z, np.broadcast_to(G, shape))


@dataclass(frozen=True)
class CompositeFunctional(MeasureFunctional):
    """``F(mu) = gamma(<f, mu>)`` for a scalar curve ``gamma``."""

    gamma: object
    f: object
    has_second_derivative = True

    def values(self, X, w):
        return self.gamma.value(self.f.value(X) @ w)

    def derivative_at(self, manifold, X, w, Z):
        m = self.f.value(X) @ w
        G = manifold.project_to_tangent(Z, self.f.grad(Z))
        return np.asarray(self.gamma.d1(m))[..., None, None] * G


@dataclass(frozen=True)
class PairInteractionFunctional(MeasureFunctional):
    """``F(mu) = int int h(x, y) mu(dx) mu(dy)``; ``h`` is a kernel object."""

    h: object

    def values(self, X, w):
        H = self.h.value(X[..., :, None, :], X[..., None, :, :])
        return np.einsum("...ij,i,j->...", H, w, w)

    def derivative_at(self, manifold, X, w, Z):
        Zq = Z[..., :, None, :]
        Xp = X[..., None, :, :]
        G = self.h.grad_u(Zq, Xp) + self.h.grad_x(Xp, Zq)
        return manifold.project_to_tangent(Z, np.einsum("...qpn,p->...qn", G, w))


def _check(manifold, mu):
    if mu.manifold != manifold:
        raise ManifoldMismatch(f"{mu.manifold!r} vs {manifold!r}")


def analytic_intrinsic_derivative(F: MeasureFunctional, mu: EmpiricalMeasure):
    """Return the vector field ``x -> D_I F(mu)(x)`` (accepts ``(N,)`` or ``(Q, N)``)."""
    M = mu.manifold

    def field(x):
        x = np.asarray(x, dtype=float)
        Z = x.reshape(-1, M.ambient_dim)
        out = F.derivative_at(M, mu.points, mu.weights, Z)
        return out.reshape(x.shape)

    return field


def second_intrinsic_derivative(F: MeasureFunctional, mu: EmpiricalMeasure, x, y):
    """Measure part of the second derivative, ``D_I (D_I F(.)(x))(mu)(y)`` as an ``(N, N)`` map ``T_y -> T_x``.

    Zero for linear functionals, ``gamma''(m) grad f(x) grad f(y)^T`` (projected)
    for composites.  Pair interactions are handled by finite differences only.
    """
    M = mu.manifold
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(F, LinearFunctional):
        return np.zeros((M.ambient_dim, M.ambient_dim))
    if isinstance(F, CompositeFunctional):
        m = F.f.value(mu.points) @ mu.weights
        gx = M.project_to_tangent(x, F.f.grad(x))
        gy = M.project_to_tangent(y, F.f.grad(y))
        return float(F.gamma.d2(m)) * np.outer(gx, gy)
    raise UnsupportedOrder("second intrinsic derivative is available for Linear and Composite functionals")


def _field_values(V, pts, mu_pts, w):
    if isinstance(V, InteractionField):
        return V.evaluate(pts, mu_pts, w)
    return np.asarray(V(pts), dtype=float)


def directional_arrays(F, manifold, X, w, Vvals):
    """``sum_j w_j <D_I F(mu_X)(X_j), V_j>`` for tangent vectors ``Vvals`` at the carriers."""
    G = F.gradients(manifold, X, w)
    return np.einsum("...pn,...pn,p->...", G, Vvals, w)


def analytic_directional(F, mu, V):
    """``D_I^V F(mu) = int <D_I F(mu)(x), V(x, mu)> mu(dx)``."""
    _check_field(V, mu)
    vals = mu.manifold.project_to_tangent(mu.points, _field_values(V, mu.points, mu.points, mu.weights))
    return float(directional_arrays(F, mu.manifold, mu.points, mu.weights, vals))


def analytic_double_directional(F, mu, V):
    """``d^2/de^2 F(mu o (Phi^V_e)^{-1})`` at ``e = 0`` for a measure-free field ``V``.

    Along the flow ``x' = V(x)``, ``x'' = D V[V]`` (full ambient derivative),
    so ``d^2/de^2 f(x_e) = V^T Hess f V + grad f . D V[V]``.
    """
    M = mu.manifold
    if not (isinstance(V, InteractionField) and V.measure_free):
        raise ValueError("the closed form needs a measure-free InteractionField")
    if not isinstance(F, (LinearFunctional, CompositeFunctional)):
        raise UnsupportedOrder("second derivative is available for Linear and Composite functionals")
    X, w = mu.points, mu.weights
    Vx = V.evaluate(X, X, w)
    acc = V.jvp(X, X, w, dU=Vx)
    f = F.f
    g = f.grad(X)
    H = f.hess(X)
    second = np.einsum("pa,pab,pb->p", Vx, H, Vx) + np.sum(g * acc, axis=-1)
    first = np.sum(g * Vx, axis=-1)
    if isinstance(F, LinearFunctional):
        return float(second @ w)
    m = f.value(X) @ w
    return float(F.gamma.d2(m) * (first @ w) ** 2 + F.gamma.d1(m) * (second @ w))


def _check_field(V, mu):
    if isinstance(V, InteractionField) and V.manifold != mu.manifold:
        raise ManifoldMismatch(f"field on {V.manifold!r}, measure on {mu.manifold!r}")


# ---------------------------------------------------------------------------
# perturbation flows
# ---------------------------------------------------------------------------
def perturb_points(manifold, X, field_fn, eps, substeps=None):
    """Advance points along ``x' = field_fn(x)`` for time ``eps`` by projected RK4.

    Stages are evaluated at projected points; a point whose total increment
    is exactly zero is returned bitwise unchanged.
    """
    X = np.asarray(X, dtype=float)
    if eps == 0:
        return X.copy()
    if substeps is None:
        substeps = max(1, int(np.ceil(abs(eps) / 1e-3)))
    h = eps / substeps
    proj = manifold.project_to_manifold

    def rhs(Z):
        return manifold.project_to_tangent(Z, field_fn(Z))

    x = X.copy()
    for _ in range(substeps):
        k1 = rhs(x)
        k2 = rhs(proj(x + 0.5 * h * k1))
        k3 = rhs(proj(x + 0.5 * h * k2))
        k4 = rhs(proj(x + h * k3))
        inc = (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        moved = np.any(inc != 0, axis=-1, keepdims=True)
        if moved.any():
            x = np.where(moved, proj(x + inc), x)
    return x


def perturb_measure(mu: EmpiricalMeasure, V, eps: float, substeps=None) -> EmpiricalMeasure:
    """``mu o (Phi^V_eps)^{-1}`` with ``V`` frozen at ``mu`` (weights unchanged)."""
    _check_field(V, mu)
    if eps == 0:
        return mu
    pts = perturb_points(mu.manifold, mu.points, lambda Z: _field_values(V, Z, mu.points, mu.weights), eps, substeps)
    return EmpiricalMeasure(mu.manifold, pts, mu.weights)


def fd_intrinsic_directional(F, mu: EmpiricalMeasure, V, eps: float = 1e-3, substeps=None) -> float:
    """Central difference ``(F(mu^{+eps}) - F(mu^{-eps})) / (2 eps)``."""
    plus = perturb_measure(mu, V, eps, substeps)
    minus = perturb_measure(mu, V, -eps, substeps)
    return (F(plus) - F(minus)) / (2.0 * eps)


def empirical_gradient_identity(F, manifold, points, h: float = 1e-5) -> float:
    """Max relative deviation between the finite-difference gradient of
    ``(u_1..u_n) -> F(mu^n)`` and ``(1/n) D_I F(mu^n)(u_i)``.

    The scale is the largest analytic gradient entry (floored at 1e-300 so a
    constant functional reports 0).
    """
    U = np.asarray(points, dtype=float).reshape(-1, manifold.ambient_dim)
    n = U.shape[0]
    w = np.full(n, 1.0 / n)
    analytic = F.gradients(manifold, U, w) / n
    fd = np.zeros_like(U)
    for i in range(n):
        for e in manifold.tangent_basis(U[i]):
            up, dn = U.copy(), U.copy()
            up[i] = manifold.retract(U[i], h * e)
            dn[i] = manifold.retract(U[i], -h * e)
            fd[i] += (F.values(up, w) - F.values(dn, w)) / (2 * h) * e
    scale = max(float(np.max(np.abs(analytic))), 1e-300)
    return float(np.max(np.abs(fd - analytic)) / scale)


# ---------------------------------------------------------------------------
# chain rule along deterministic paths of maps
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RotationPath:
    """``x_theta(u) = R(rate * theta) u`` about ``axis`` (sphere in R^3)."""

    axis: tuple = (0.0, 0.0, 1.0)
    rate: float = 1.0

    def _R(self, angle):
        a = np.asarray(self.axis, dtype=float)
        a = a / np.linalg.norm(a)
        K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K

    def apply(self, U, theta):
        return np.asarray(U) @ self._R(self.rate * theta).T

    def velocity(self, U, theta):
        a = np.asarray(self.axis, dtype=float)
        a = a / np.linalg.norm(a)
        return self.rate * np.cross(a, self.apply(U, theta))


@dataclass(frozen=True)
class TranslationPath:
    """``x_theta(u) = u + theta * c`` (Euclidean)."""

    c: tuple

    def apply(self, U, theta):
        return np.asarray(U) + theta * np.asarray(self.c, dtype=float)

    def velocity(self, U, theta):
        return np.broadcast_to(np.asarray(self.c, dtype=float), np.shape(U)).copy()


@dataclass(frozen=True)
class FlowPath:
    """``x_theta(u) = Phi^V_theta(u)``: the flow of a measure-free field ``V``."""

    field: object

    def _rhs(self, U):
        w = np.ones(len(U)) / len(U)
        return lambda Z: self.field.evaluate(Z, U, w)

    def apply(self, U, theta):
        U = np.asarray(U, dtype=float)
        return perturb_points(self.field.manifold, U, self._rhs(U), theta)

    def advance(self, X, dtheta):
        """``x_{theta + dtheta}`` from ``X = x_theta`` (the flow is autonomous)."""
        X = np.asarray(X, dtype=float)
        return perturb_points(self.field.manifold, X, self._rhs(X), dtheta)

    def velocity(self, U, theta):
        X = self.apply(U, theta)
        return self.field.evaluate(X, X, np.ones(len(X)) / len(X))


class StationaryPath:
    def apply(self, U, theta):
        return np.asarray(U, dtype=float)

    def velocity(self, U, theta):
        return np.zeros(np.shape(U))


def chain_rule_residual(F, path, mu: EmpiricalMeasure, theta: float = 0.0, eps=1e-4, return_parts=False):
    """``|d/dtheta F(mu o x_theta^{-1}) - int <D_I F(mu_theta)(x_theta(u)), x'_theta(u)> mu(du)|``.

    The left side is a central difference with step ``eps``.  A sequence of
    steps returns one result per step and evaluates the right side once.
    """
    M = mu.manifold
    w = mu.weights
    Xt = path.apply(mu.points, theta)
    rhs = float(directional_arrays(F, M, Xt, w, path.velocity(mu.points, theta)))
    # paths that can restart from x_theta share its integration error on both sides
    step = getattr(path, "advance", None)
    out = []
    for e in np.atleast_1d(eps):
        e = float(e)
        if step is not None:
            plus, minus = F.values(step(Xt, e), w), F.values(step(Xt, -e), w)
        else:
            plus = F.values(path.apply(mu.points, theta + e), w)
            minus = F.values(path.apply(mu.points, theta - e), w)
        lhs = float((plus - minus) / (2 * e))
        res = abs(lhs - rhs)
        out.append((res, lhs, rhs) if return_parts else res)
    return out if np.ndim(eps) else out[0]


# ---------------------------------------------------------------------------
# auxiliary flows
# ---------------------------------------------------------------------------
def variational_flow(mu0, fields, W, psi, u, cfg=None):
    """Path of ``D_I^psi x_mu(u, t)`` for one tracked point ``u``: ``(S, N)``.

    Obtained from the exact derivative of the discrete scheme with respect
    to the initial measure perturbed along ``psi``.  Fields of higher kernel
    order contribute through finite-difference Jacobians.
    """
    sol = solve_interacting_flow(mu0, fields, W, [u], cfg, variational=psi)
    return sol.variational[:, sol.n_carriers], sol


def malliavin_flow(mu0, fields, W, u, s, cfg=None):
    """Path of ``D_s x_mu(u, t)``: shape ``(S, n, N)``, zero before ``s`` and ``V_i(x(u, s), mu_s)`` at ``s``."""
    sol = solve_interacting_flow(mu0, fields, W, [u], cfg, malliavin_times=[s])
    return sol.malliavin[:, 0, :, sol.n_carriers], sol


def malliavin_functional_arrays(F, manifold, X, w, D):
    """``int <D_I F(mu_t)(x), D_s x> dmu`` with ``D`` of shape ``(..., n, P, N)``; returns ``(..., n)``."""
    G = F.gradients(manifold, X, w)
    return np.einsum("...pn,...ipn,p->...i", G, D, w)


def malliavin_functional(F, sol: FlowSolution, s: float, snapshot: int = -1):
    """``D_s F(mu_t)`` per noise index, at snapshot ``snapshot`` of ``sol``."""
    if sol.malliavin is None or not sol.malliavin_times:
        raise MissingAuxiliary("solution carries no Malliavin columns")
    matches = [k for k, s_k in enumerate(sol.malliavin_times) if abs(s_k - s) <= 1e-12]
    if not matches:
        raise MissingAuxiliary(f"no Malliavin columns for s={s}")
    P = sol.n_carriers
    D = sol.malliavin[snapshot, matches[0], :, :P]
    return malliavin_functional_arrays(F, sol.manifold, sol.carriers[snapshot], sol.weights, D)


# ---------------------------------------------------------------------------
# Ito formula for F(mu_t)
# ---------------------------------------------------------------------------
def ito_residual_arrays(F, system: FieldSystem, Xpath, w, dB, dt):
    """Residual path for stored carriers ``Xpath`` ``(steps+1, B, P, N)`` and increments ``dB`` ``(B, steps, n)``.

    Each step contributes ``1/2 [G(X_k) + G(X*_k)]`` where
    ``G(Z) = sum_j w_j <D_I F(mu_Z)(Z_j), V_0(Z_j, mu_k) dt + V_i(Z_j, mu_k) dB^i_k>``
    and ``X*_k`` is the predictor configuration of the step.  This is the
    trapezoidal Stratonovich sum matched to the Heun scheme.
    """
    M = system.manifold
    steps = dB.shape[1]
    R = np.zeros((steps + 1,) + Xpath.shape[1:-2])
    F0 = F.values(Xpath[0], w)
    acc = np.zeros_like(F0)
    for k in range(steps):
        X = Xpath[k]
        inc0 = system.increment(X, X, w, dB[:, k], dt)
        Xs = M.retract(X, inc0)
        inc1 = system.increment(Xs, X, w, dB[:, k], dt)
        acc = acc + 0.5 * (directional_arrays(F, M, X, w, inc0) + directional_arrays(F, M, Xs, w, inc1))
        R[k + 1] = F.values(Xpath[k + 1], w) - F0 - acc
    return R


def ito_formula_residual(F, sol: FlowSolution, fields):
    """Residual ``F(mu_t) - F(mu_0) - (Stratonovich sums)`` along one solution.

    Requires every step to be stored (``save_stride = 1``).
    """
    system = as_system(fields, sol.manifold)
    W = sol.noise
    if W is None or sol.carriers.shape[0] != W.steps + 1:
        raise MissingAuxiliary("the residual needs the noise path and every step (save_stride=1)")
    R = ito_residual_arrays(F, system, sol.carriers[:, None], sol.weights, W.increments[None], W.dt)
    return R[:, 0]

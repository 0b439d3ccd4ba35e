"""Measure-dependent vector fields.

Two families are provided.

``KernelField``
    ``V(u, mu) = P_u int ... int grad_u Phi(u, x_1, ..., x_k) mu(dx_1) ... mu(dx_k)``
``MomentField``
    ``V(u, mu) = P_u g(u, <f_1, mu>, ..., <f_m, mu>)``

Both are written as an ambient map ``E(u, mu)`` followed by the tangent
projector ``P_u``.  All array-level methods take query points ``U`` of shape
``(..., Q, N)``, carrier points ``X`` of shape ``(..., P, N)`` sharing the
same leading batch axes, and carrier weights ``w`` of shape ``(P,)``.
Tangent inputs to the ``*_jvp`` methods may carry extra leading axes (one per
linearized column); they broadcast against the primal arrays.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ManifoldMismatch, UnsupportedOrder
from .geometry import EmbeddedManifold

__all__ = [
    "AlignmentKernel",
    "GaussianChordalKernel",
    "CustomKernel",
    "LinearObservable",
    "QuadraticObservable",
    "CustomObservable",
    "coordinate",
    "AffineMap",
    "CustomMap",
    "KernelField",
    "MomentField",
    "FieldSystem",
    "constant_field",
    "rotation_field",
    "affine_field",
    "evaluate_field",
    "spatial_jacobian",
    "intrinsic_derivative_field",
    "ito_correction",
    "skew",
]

FD_SELF_CHECK_RTOL = 1e-6


def _wsum(A, w):
    """Weighted sum over the carrier axis: ``(..., P, N) -> (..., N)``."""
    return np.einsum("...pn,p->...n", A, w)


def _fd_self_check(fn, grad, dim, rng, label, n_checks=5, h=1e-5):
    for _ in range(n_checks):
        args = [rng.standard_normal(dim) for _ in range(2)]
        g = np.asarray(grad(*args), dtype=float)
        fd = np.empty(dim)
        for a in range(dim):
            e = np.zeros(dim)
            e[a] = h
            fd[a] = (fn(args[0] + e, args[1]) - fn(args[0] - e, args[1])) / (2 * h)
        scale = max(np.linalg.norm(g), 1e-8)
        if np.linalg.norm(fd - g) > FD_SELF_CHECK_RTOL * scale + 1e-9:
            raise ValueError(f"{label}: supplied gradient disagrees with finite differences")


# ---------------------------------------------------------------------------
# kernels Phi(u, x)
# ---------------------------------------------------------------------------
class SmoothKernel:
    """Pair kernel ``Phi(u, x)`` with analytic ambient derivatives.

    Subclasses implement ``value``, ``grad_u``, ``grad_x``, ``cross`` (the
    matrix ``d/dx grad_u Phi``) and ``hess_uu``.  The ``mean_*`` methods
    integrate against an empirical measure and can be overridden with cheaper
    closed forms.
    """

    order = 1

    def lipschitz_bound(self):
        return None

    def mean_grad_u(self, U, X, w):
        G = self.grad_u(U[..., :, None, :], X[..., None, :, :])
        return _wsum(G, w)

    def mean_hess_uu_apply(self, U, X, w, dU):
        H = self.hess_uu(U[..., :, None, :], X[..., None, :, :])
        return np.einsum("...qpab,p,...qb->...qa", H, w, dU)

    def mean_cross_apply(self, U, X, w, dX):
        H = self.cross(U[..., :, None, :], X[..., None, :, :])
        return np.einsum("...qpab,p,...pb->...qa", H, w, dX)


@dataclass(frozen=True)
class AlignmentKernel(SmoothKernel):
    """``Phi(u, x) = kappa <u, x>``: pulls every particle toward the mean direction."""

    kappa: float = 1.0

    def value(self, u, x):
        return self.kappa * np.sum(u * x, axis=-1)

    def grad_u(self, u, x):
        return self.kappa * np.broadcast_to(x, np.broadcast_shapes(np.shape(u), np.shape(x)))

    def grad_x(self, u, x):
        return self.kappa * np.broadcast_to(u, np.broadcast_shapes(np.shape(u), np.shape(x)))

    def cross(self, u, x):
        shape = np.broadcast_shapes(np.shape(u), np.shape(x))
        return self.kappa * np.broadcast_to(np.eye(shape[-1]), shape + (shape[-1],))

    def hess_uu(self, u, x):
        shape = np.broadcast_shapes(np.shape(u), np.shape(x))
        return np.zeros(shape + (shape[-1],))

    def lipschitz_bound(self):
        return abs(self.kappa)

    def mean_grad_u(self, U, X, w):
        m = self.kappa * _wsum(X, w)
        return np.broadcast_to(m[..., None, :], np.broadcast_shapes(U.shape, m[..., None, :].shape))

    def mean_hess_uu_apply(self, U, X, w, dU):
        return np.zeros(np.broadcast_shapes(np.shape(dU), U.shape))

    def mean_cross_apply(self, U, X, w, dX):
        return (self.kappa * _wsum(dX, w))[..., None, :]


@dataclass(frozen=True)
class GaussianChordalKernel(SmoothKernel):
    """``Phi(u, x) = kappa exp(-|u - x|^2 / (2 sigma^2))``."""

    kappa: float = 1.0
    sigma: float = 1.0

    def value(self, u, x):
        r = np.asarray(u) - np.asarray(x)
        return self.kappa * np.exp(-np.sum(r * r, axis=-1) / (2 * self.sigma**2))

    def grad_u(self, u, x):
        r = np.asarray(u) - np.asarray(x)
        return -(self.value(u, x) / self.sigma**2)[..., None] * r

    def grad_x(self, u, x):
        return -self.grad_u(u, x)

    def cross(self, u, x):
        r = np.asarray(u) - np.asarray(x)
        s2 = self.sigma**2
        phi = (self.value(u, x) / s2)[..., None, None]
        eye = np.eye(r.shape[-1])
        return phi * (eye - r[..., :, None] * r[..., None, :] / s2)

    def hess_uu(self, u, x):
        return -self.cross(u, x)

    def lipschitz_bound(self):
        # sup over r of |exp(-s/2) (I - r r^T / sigma^2)| <= 1 in operator norm
        return abs(self.kappa) / self.sigma**2

    def mean_grad_u(self, U, X, w):
        r = U[..., :, None, :] - X[..., None, :, :]
        phi = self.value(U[..., :, None, :], X[..., None, :, :])
        return -np.einsum("...qp,p,...qpn->...qn", phi, w, r) / self.sigma**2

    def mean_hess_uu_apply(self, U, X, w, dU):
        return -self._cross_apply(U, X, w, dU[..., :, None, :])

    def mean_cross_apply(self, U, X, w, dX):
        return self._cross_apply(U, X, w, dX[..., None, :, :])

    def _cross_apply(self, U, X, w, D):
        # sum_j w_j phi_j / s2 (D_j - r_j (r_j . D_j) / s2)
        s2 = self.sigma**2
        r = U[..., :, None, :] - X[..., None, :, :]
        phi = self.value(U[..., :, None, :], X[..., None, :, :]) / s2
        rd = np.sum(r * D, axis=-1)
        term = D - r * (rd / s2)[..., None]
        return np.einsum("...qp,p,...qpn->...qn", np.broadcast_to(phi, rd.shape), w, term)


class CustomKernel(SmoothKernel):
    """User-supplied closed-form kernel ``(Phi, grad_u Phi, d_x grad_u Phi)``.

    ``hess_uu`` and ``grad_x`` are optional; when omitted they are computed by
    central differences.  The supplied gradient is checked against finite
    differences of ``Phi`` at construction.
    """

    def __init__(self, value, grad_u, cross, hess_uu=None, grad_x=None, dim=None, check=True, seed=0):
        self._value, self._grad_u, self._cross = value, grad_u, cross
        self._hess_uu, self._grad_x = hess_uu, grad_x
        if check:
            if dim is None:
                raise ValueError("dim is required for the finite-difference self-check")
            rng = np.random.default_rng(seed)
            _fd_self_check(value, grad_u, dim, rng, "grad_u")

    def value(self, u, x):
        return self._value(u, x)

    def grad_u(self, u, x):
        return self._grad_u(u, x)

    def cross(self, u, x):
        return self._cross(u, x)

    def grad_x(self, u, x):
        if self._grad_x is not None:
            return self._grad_x(u, x)
        return self._fd(lambda xx: self._value(u, xx)[..., None], x)[..., 0, :]

    def hess_uu(self, u, x):
        if self._hess_uu is not None:
            return self._hess_uu(u, x)
        return self._fd(lambda uu: self._grad_u(uu, x), u)

    @staticmethod
    def _fd(fn, at, h=1e-5):
        at = np.asarray(at, dtype=float)
        cols = []
        for b in range(at.shape[-1]):
            e = np.zeros(at.shape[-1])
            e[b] = h
            cols.append((np.asarray(fn(at + e)) - np.asarray(fn(at - e))) / (2 * h))
        return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# observables f(x) and moment maps g(u, m)
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LinearObservable:
    """``f(x) = <a, x> + b``."""

    a: tuple
    b: float = 0.0

    def value(self, x):
        return np.asarray(x) @ np.asarray(self.a, dtype=float) + self.b

    def grad(self, x):
        a = np.asarray(self.a, dtype=float)
        return np.broadcast_to(a, np.shape(x)).copy()

    def hess(self, x):
        n = np.shape(x)[-1]
        return np.zeros(np.shape(x) + (n,))

    def lipschitz_bound(self):
        return float(np.linalg.norm(self.a))


def coordinate(index: int, ambient_dim: int) -> LinearObservable:
    a = np.zeros(ambient_dim)
    a[index] = 1.0
    return LinearObservable(tuple(a))


@dataclass(frozen=True)
class QuadraticObservable:
    """``f(x) = x^T Q x + <a, x> + c`` with ``Q`` symmetrized."""

    Q: tuple
    a: tuple = None
    c: float = 0.0

    def _parts(self, n):
        Q = np.asarray(self.Q, dtype=float)
        Q = 0.5 * (Q + Q.T)
        a = np.zeros(n) if self.a is None else np.asarray(self.a, dtype=float)
        return Q, a

    def value(self, x):
        x = np.asarray(x, dtype=float)
        Q, a = self._parts(x.shape[-1])
        return np.einsum("...i,ij,...j->...", x, Q, x) + x @ a + self.c

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        Q, a = self._parts(x.shape[-1])
        return 2 * x @ Q + a

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        Q, _ = self._parts(x.shape[-1])
        return np.broadcast_to(2 * Q, x.shape + (x.shape[-1],)).copy()

    def lipschitz_bound(self):
        return None


class CustomObservable:
    def __init__(self, value, grad, hess=None, dim=None, check=True, seed=0):
        self._value, self._grad, self._hess = value, grad, hess
        if check:
            if dim is None:
                raise ValueError("dim is required for the finite-difference self-check")
            rng = np.random.default_rng(seed)
            _fd_self_check(lambda x, _: value(x), lambda x, _: grad(x), dim, rng, "observable grad")

    def value(self, x):
        return self._value(x)

    def grad(self, x):
        return self._grad(x)

    def hess(self, x):
        if self._hess is not None:
            return self._hess(x)
        return CustomKernel._fd(self._grad, x)

    def lipschitz_bound(self):
        return None


@dataclass(frozen=True)
class AffineMap:
    """``g(u, m) = A u + B m + c``; any part may be omitted."""

    A: tuple = None
    B: tuple = None
    c: tuple = None

    def _mats(self, n, k):
        A = np.zeros((n, n)) if self.A is None else np.asarray(self.A, dtype=float)
        B = np.zeros((n, k)) if self.B is None else np.asarray(self.B, dtype=float)
        c = np.zeros(n) if self.c is None else np.asarray(self.c, dtype=float)
        return A, B, c

    def value(self, u, m):
        u = np.asarray(u, dtype=float)
        m = np.asarray(m, dtype=float)
        A, B, c = self._mats(u.shape[-1], m.shape[-1])
        return u @ A.T + m @ B.T + c

    def jac_u_apply(self, u, m, du):
        A, _, _ = self._mats(np.shape(u)[-1], np.shape(m)[-1])
        return np.asarray(du) @ A.T

    def jac_m_apply(self, u, m, dm):
        _, B, _ = self._mats(np.shape(u)[-1], np.shape(m)[-1])
        return np.asarray(dm) @ B.T

    def jac_m(self, u, m):
        _, B, _ = self._mats(np.shape(u)[-1], np.shape(m)[-1])
        return np.broadcast_to(B, np.shape(u)[:-1] + B.shape)

    def jac_m_bound(self):
        return 0.0 if self.B is None else float(np.linalg.norm(np.asarray(self.B, dtype=float), 2))


class CustomMap:
    """User map ``g(u, m)`` with Jacobians ``dg/du`` ``(..., N, N)`` and ``dg/dm`` ``(..., N, M)``."""

    def __init__(self, value, jac_u, jac_m):
        self._value, self._jac_u, self._jac_m = value, jac_u, jac_m

    def value(self, u, m):
        return self._value(u, m)

    def jac_u_apply(self, u, m, du):
        return np.einsum("...ab,...b->...a", self._jac_u(u, m), du)

    def jac_m_apply(self, u, m, dm):
        return np.einsum("...ab,...b->...a", self._jac_m(u, m), dm)

    def jac_m(self, u, m):
        return self._jac_m(u, m)

    def jac_m_bound(self):
        return None


def skew(a):
    """Matrix of ``v -> a x v`` in R^3."""
    a1, a2, a3 = np.asarray(a, dtype=float)
    return np.array([[0.0, -a3, a2], [a3, 0.0, -a1], [-a2, a1, 0.0]])


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------
class InteractionField:
    """Common machinery: projection and the full ambient derivative.

    ``jvp`` returns the derivative of ``(u, X) -> P_u E(u, mu_X)``, including
    the term coming from differentiating ``P_u``.  That term has a normal
    component, which is what keeps a tangent vector tangent while its base
    point moves.
    """

    manifold: EmbeddedManifold

    measure_free = False
    analytic_intrinsic = True

    def ambient(self, U, X, w):
        raise NotImplementedError

    def ambient_jvp(self, U, X, w, dU=None, dX=None):
        raise NotImplementedError

    def evaluate(self, U, X, w):
        return self.manifold.project_to_tangent(U, self.ambient(U, X, w))

    def jvp(self, U, X, w, dU=None, dX=None, E=None):
        m = self.manifold
        if E is None:
            E = self.ambient(U, X, w)
        dE = self.ambient_jvp(U, X, w, dU, dX)
        out = m.project_to_tangent(U, dE)
        if dU is not None and not m.is_flat_embedding:
            out = out + m.projector_derivative(U, dU, E)
        return out

    def lipschitz_bound(self):
        return None

    def with_scale(self, s):
        return ScaledField(self, s)


@dataclass(frozen=True)
class ScaledField(InteractionField):
    base: InteractionField
    scale: float

    @property
    def manifold(self):
        return self.base.manifold

    @property
    def measure_free(self):
        return self.base.measure_free

    @property
    def analytic_intrinsic(self):
        return self.base.analytic_intrinsic

    def ambient(self, U, X, w):
        return self.scale * self.base.ambient(U, X, w)

    def ambient_jvp(self, U, X, w, dU=None, dX=None):
        return self.scale * self.base.ambient_jvp(U, X, w, dU, dX)

    def intrinsic_matrix(self, u, X, w, x):
        return self.scale * self.base.intrinsic_matrix(u, X, w, x)

    def lipschitz_bound(self):
        b = self.base.lipschitz_bound()
        return None if b is None else abs(self.scale) * b


@dataclass(frozen=True)
class KernelField(InteractionField):
    """Interaction-kernel field of order ``k`` (number of integrated points)."""

    manifold: EmbeddedManifold
    kernel: object
    order: int = 1

    @property
    def analytic_intrinsic(self):
        return self.order == 1

    def ambient(self, U, X, w):
        if self.order == 1:
            return self.kernel.mean_grad_u(U, X, w)
        return self._ambient_order_k(U, X, w)

    def _ambient_order_k(self, U, X, w):
        # full enumeration of P^k index tuples; only sensible for small supports
        k, P = self.order, X.shape[-2]
        out = 0.0
        for idx in itertools.product(range(P), repeat=k):
            weight = np.prod(w[list(idx)])
            xs = [X[..., None, j, :] for j in idx]
            out = out + weight * self.kernel.grad_u(U, *xs)
        return out

    def ambient_jvp(self, U, X, w, dU=None, dX=None):
        if self.order != 1:
            return self._fd_ambient_jvp(U, X, w, dU, dX)
        out = 0.0
        if dU is not None:
            out = out + self.kernel.mean_hess_uu_apply(U, X, w, dU)
        if dX is not None:
            out = out + self.kernel.mean_cross_apply(U, X, w, dX)
        if np.isscalar(out):
            return np.zeros_like(U)
        return out

    def _fd_ambient_jvp(self, U, X, w, dU, dX, h=1e-6):
        m = self.manifold
        dU0 = np.zeros_like(U) if dU is None else dU
        dX0 = np.zeros_like(X) if dX is None else dX
        plus = self.ambient(m.retract(U, h * dU0), m.retract(X, h * dX0), w)
        minus = self.ambient(m.retract(U, -h * dU0), m.retract(X, -h * dX0), w)
        return (plus - minus) / (2 * h)

    def intrinsic_matrix(self, u, X, w, x):
        if self.order != 1:
            raise UnsupportedOrder("analytic intrinsic derivative needs a pair kernel (order 1)")
        m = self.manifold
        H = self.kernel.cross(u, x)
        return m.tangent_projector(u) @ H @ m.tangent_projector(x)

    def lipschitz_bound(self):
        return self.kernel.lipschitz_bound() if self.order == 1 else None


@dataclass(frozen=True)
class MomentField(InteractionField):
    """Field driven by finitely many moments ``<f_j, mu>``."""

    manifold: EmbeddedManifold
    g: object
    observables: tuple = field(default_factory=tuple)

    @property
    def measure_free(self):
        return len(self.observables) == 0

    def moments(self, X, w):
        if not self.observables:
            return np.zeros(np.shape(X)[:-2] + (0,))
        return np.stack([f.value(X) @ w for f in self.observables], axis=-1)

    def moment_jvp(self, X, w, dX):
        return np.stack([np.einsum("...pn,...pn,p->...", f.grad(X), dX, w) for f in self.observables], axis=-1)

    def ambient(self, U, X, w):
        m = self.moments(X, w)
        return self.g.value(U, np.broadcast_to(m[..., None, :], U.shape[:-1] + m.shape[-1:]))

    def ambient_jvp(self, U, X, w, dU=None, dX=None):
        m = self.moments(X, w)
        mq = np.broadcast_to(m[..., None, :], U.shape[:-1] + m.shape[-1:])
        out = 0.0
        if dU is not None:
            out = out + self.g.jac_u_apply(U, mq, dU)
        if dX is not None and self.observables:
            dm = self.moment_jvp(X, w, dX)
            out = out + self.g.jac_m_apply(U, mq, dm[..., None, :])
        if np.isscalar(out):
            return np.zeros_like(U)
        return out

    def intrinsic_matrix(self, u, X, w, x):
        mf = self.manifold
        if not self.observables:
            return np.zeros((mf.ambient_dim, mf.ambient_dim))
        m = self.moments(X, w)
        Jm = np.asarray(self.g.jac_m(u, m))
        grads = np.stack([mf.project_to_tangent(x, f.grad(x)) for f in self.observables], axis=-1)
        return mf.tangent_projector(u) @ Jm @ grads.T

    def lipschitz_bound(self):
        if not self.observables:
            return 0.0
        jb = self.g.jac_m_bound()
        lips = [f.lipschitz_bound() for f in self.observables]
        if jb is None or any(v is None for v in lips):
            return None
        return jb * float(np.sqrt(np.sum(np.square(lips))))


def constant_field(manifold, c):
    """Measure-free field ``P_u c``."""
    return MomentField(manifold, AffineMap(c=tuple(np.asarray(c, dtype=float))))


def affine_field(manifold, A, c=None):
    """Measure-free field ``P_u (A u + c)``."""
    return MomentField(manifold, AffineMap(A=tuple(map(tuple, np.asarray(A, dtype=float))),
                                           c=None if c is None else tuple(np.asarray(c, dtype=float))))


def rotation_field(manifold, axis=(0.0, 0.0, 1.0), scale=1.0):
    """``scale * (axis x u)`` on the 2-sphere (a Killing field)."""
    if manifold.ambient_dim != 3:
        raise ValueError("rotation_field needs a 3-dimensional ambient space")
    return affine_field(manifold, scale * skew(axis))


# ---------------------------------------------------------------------------
# a system V_0, V_1, ..., V_n
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FieldSystem:
    """Drift ``V_0`` (may be ``None``) and diffusion fields ``V_1..V_n``."""

    manifold: EmbeddedManifold
    drift: InteractionField = None
    diffusion: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "diffusion", tuple(self.diffusion))
        for f in self.fields:
            if f.manifold != self.manifold:
                raise ManifoldMismatch(f"field on {f.manifold!r}, system on {self.manifold!r}")

    @property
    def n_noise(self) -> int:
        return len(self.diffusion)

    @property
    def fields(self):
        return ((self.drift,) if self.drift is not None else ()) + self.diffusion

    @property
    def measure_free(self):
        return all(f.measure_free for f in self.fields)

    def increment(self, Y, X, w, dB, dt):
        """``V_0 dt + sum_i V_i dB^i`` at ``Y``; ``dB`` has shape ``(..., n)``."""
        out = np.zeros(np.broadcast_shapes(Y.shape, X.shape[:-2] + Y.shape[-2:]))
        if self.drift is not None:
            out = out + dt * self.drift.evaluate(Y, X, w)
        for i, f in enumerate(self.diffusion):
            out = out + f.evaluate(Y, X, w) * dB[..., i][..., None, None]
        return out

    def increment_jvp(self, Y, X, w, dB, dt, dY=None, dX=None, ddB=None):
        out = 0.0
        if dY is not None or dX is not None:
            if self.drift is not None:
                out = out + dt * self.drift.jvp(Y, X, w, dY, dX)
            for i, f in enumerate(self.diffusion):
                out = out + f.jvp(Y, X, w, dY, dX) * dB[..., i][..., None, None]
        if ddB is not None:
            for i, f in enumerate(self.diffusion):
                out = out + f.evaluate(Y, X, w) * ddB[..., i][..., None, None]
        return out

    def ito_correction(self, Y, X, w):
        """``1/2 sum_i D V_i [V_i]`` (full ambient derivative, spatial part only)."""
        out = np.zeros(np.broadcast_shapes(Y.shape, X.shape[:-2] + Y.shape[-2:]))
        for f in self.diffusion:
            V = f.evaluate(Y, X, w)
            out = out + 0.5 * f.jvp(Y, X, w, dU=V)
        return out

    def with_drift(self, drift):
        return FieldSystem(self.manifold, drift, self.diffusion)

    def without_noise(self, index):
        """Copy with diffusion field ``index`` (0-based) removed."""
        diff = tuple(f for k, f in enumerate(self.diffusion) if k != index)
        return FieldSystem(self.manifold, self.drift, diff)


# ---------------------------------------------------------------------------
# single-point operations on EmpiricalMeasure inputs
# ---------------------------------------------------------------------------
def _check(V, mu):
    if V.manifold != mu.manifold:
        raise ManifoldMismatch(f"field on {V.manifold!r}, measure on {mu.manifold!r}")


def evaluate_field(V, u, mu):
    """Tangent vector ``V(u, mu)`` at a single point ``u``."""
    _check(V, mu)
    u = np.asarray(u, dtype=float)
    return V.evaluate(u[None, :], mu.points, mu.weights)[0]


def _ambient_jacobian(V, u, mu):
    N = V.manifold.ambient_dim
    U = np.asarray(u, dtype=float)[None, :]
    P = V.manifold.tangent_projector(u)
    cols = V.jvp(U, mu.points, mu.weights, dU=P[:, None, :])  # (N, 1, N): column k = D V [P e_k]
    return cols[:, 0, :].T


def spatial_jacobian(V, u, mu):
    """Covariant derivative ``w -> P_u D V(u, mu)[w]`` as an ``(N, N)`` matrix on ``T_u M``."""
    _check(V, mu)
    P = V.manifold.tangent_projector(u)
    return P @ _ambient_jacobian(V, u, mu) @ P


def intrinsic_derivative_field(V, u, mu, x):
    """The map ``D_I V(u, mu)(x): T_x M -> T_u M`` as an ``(N, N)`` matrix."""
    _check(V, mu)
    if not V.analytic_intrinsic:
        raise UnsupportedOrder("analytic intrinsic derivative is available for order-1 kernels only")
    return V.intrinsic_matrix(np.asarray(u, dtype=float), mu.points, mu.weights, np.asarray(x, dtype=float))


def ito_correction(fields, u, mu):
    """Ambient Stratonovich-to-Ito drift correction at ``u``.

    Its tangential part is the covariant correction ``1/2 sum_i nabla_{V_i} V_i``;
    the normal part is the curvature term that keeps an ambient Ito equation
    on the manifold.
    """
    fields = list(fields)
    if not fields:
        return np.zeros_like(np.asarray(u, dtype=float))
    for V in fields:
        _check(V, mu)
    system = FieldSystem(fields[0].manifold, None, tuple(fields))
    return system.ito_correction(np.asarray(u, dtype=float)[None, :], mu.points, mu.weights)[0]

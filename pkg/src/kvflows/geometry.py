"""Manifolds given by explicit isometric embeddings in Euclidean space.

Three families are supported, all of them products of unit spheres (or flat):

* ``Euclidean(d)``: ``R^d`` embedded as itself.
* ``Sphere(d)``: the unit sphere in ``R^(d+1)``.
* ``FlatTorus(d)``: ``(S^1)^d`` with each circle embedded as the unit circle
  of its own coordinate plane, ``theta -> (cos t1, sin t1, ..., cos td, sin td)``.

Every operation is vectorized over leading axes; a point is simply an array
whose last axis has length ``ambient_dim``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DegeneratePoint

__all__ = ["EmbeddedManifold", "Euclidean", "Sphere", "FlatTorus", "manifold_from_spec"]

ON_MANIFOLD_TOL = 1e-10
TANGENT_TOL = 1e-10
_DEGENERATE = 1e-14

_KINDS = ("euclidean", "sphere", "torus")


@dataclass(frozen=True)
class EmbeddedManifold:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown manifold kind {self.kind!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError("dimension must be a positive integer")

    def __repr__(self):
        return f"{self.kind}:{self.dim}"

    @property
    def spec(self) -> str:
        return f"{self.kind}:{self.dim}"

    @property
    def intrinsic_dim(self) -> int:
        return self.dim

    @cached_property
    def ambient_dim(self) -> int:
        return {"euclidean": self.dim, "sphere": self.dim + 1, "torus": 2 * self.dim}[self.kind]

    @property
    def is_flat_embedding(self) -> bool:
        return self.kind == "euclidean"

    @cached_property
    def _block_shape(self):
        # (number of sphere blocks, block size)
        if self.kind == "sphere":
            return (1, self.dim + 1)
        if self.kind == "torus":
            return (self.dim, 2)
        return None

    @property
    def bilipschitz_constant(self) -> float:
        """``C`` with ``|x - y| <= d(x, y) <= C |x - y|`` for all points."""
        return 1.0 if self.kind == "euclidean" else np.pi / 2

    def _blocks(self, a):
        a = np.asarray(a, dtype=float)
        return a.reshape(a.shape[:-1] + self._block_shape)

    def _flat(self, a):
        return a.reshape(a.shape[:-2] + (self.ambient_dim,))

    def _check_ambient(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != self.ambient_dim:
            raise ValueError(f"expected last axis {self.ambient_dim}, got shape {a.shape}")
        return a

    # -- points -----------------------------------------------------------
    def project_to_manifold(self, p):
        """Nearest point on the manifold (blockwise normalization)."""
        p = self._check_ambient(p)
        if self._block_shape is None:
            return p.copy()
        b = self._blocks(p)
        norm = np.linalg.norm(b, axis=-1, keepdims=True)
        if np.any(norm < _DEGENERATE):
            raise DegeneratePoint("projection undefined: a sphere block has zero norm")
        return self._flat(b / norm)

    def renormalize(self, x, tol=1e-15):
        """Project blocks whose norm is off by more than ``tol``; leave the rest bitwise intact."""
        x = self._check_ambient(x)
        if self._block_shape is None:
            return x
        b = self._blocks(x)
        norm = np.linalg.norm(b, axis=-1, keepdims=True)
        fix = np.abs(norm - 1.0) > tol
        if not fix.any():
            return x
        return self._flat(np.where(fix, b / np.where(norm > 0, norm, 1.0), b))

    def on_manifold_error(self, x):
        """Largest deviation ``|project(x) - x|`` over the leading axes."""
        x = self._check_ambient(x)
        if self._block_shape is None:
            return 0.0
        norm = np.linalg.norm(self._blocks(x), axis=-1)
        return float(np.max(np.abs(norm - 1.0), initial=0.0))

    def contains(self, x, tol=ON_MANIFOLD_TOL) -> bool:
        return bool(np.all(np.isfinite(x))) and self.on_manifold_error(x) <= tol

    # -- tangent spaces -----------------------------------------------------
    def project_to_tangent(self, x, v):
        """Orthogonal projection of ambient ``v`` onto ``T_x M``."""
        x = self._check_ambient(x)
        v = self._check_ambient(v)
        if self._block_shape is None:
            return np.broadcast_to(v, np.broadcast_shapes(x.shape, v.shape)).copy()
        xb, vb = self._blocks(x), self._blocks(v)
        return self._flat(vb - xb * np.sum(xb * vb, axis=-1, keepdims=True))

    def tangent_projector(self, x):
        """The projector ``P_x`` as an ``(..., N, N)`` matrix."""
        x = self._check_ambient(x)
        eye = np.eye(self.ambient_dim)
        if self._block_shape is None:
            return np.broadcast_to(eye, x.shape[:-1] + eye.shape).copy()
        return self.project_to_tangent(x[..., None, :], eye)

    def projector_derivative(self, x, w, a):
        """Directional derivative ``(d/ds) P_{x + s w} a`` at ``s = 0``.

        Valid for on-manifold ``x`` and tangent ``w``.
        """
        if self._block_shape is None:
            return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(w), np.shape(a)))
        xb, wb, ab = self._blocks(x), self._blocks(w), self._blocks(a)
        out = -wb * np.sum(xb * ab, axis=-1, keepdims=True) - xb * np.sum(wb * ab, axis=-1, keepdims=True)
        return self._flat(out)

    def tangent_error(self, x, v):
        """Relative size of the normal component of ``v`` at ``x``."""
        v = np.asarray(v, dtype=float)
        normal = v - self.project_to_tangent(x, v)
        scale = max(float(np.max(np.abs(v), initial=0.0)), 1.0)
        return float(np.max(np.abs(normal), initial=0.0)) / scale

    def tangent_basis(self, x):
        """Orthonormal basis of ``T_x M`` for a single point, shape ``(d, N)``."""
        x = self._check_ambient(x)
        if x.ndim != 1:
            raise ValueError("tangent_basis takes a single point")
        if self._block_shape is None:
            return np.eye(self.ambient_dim)
        vals, vecs = np.linalg.eigh(self.tangent_projector(x))
        return vecs[:, vals > 0.5].T.copy()

    # -- exponential map ---------------------------------------------------
    def retract(self, x, v):
        """Exponential map ``exp_x(v)``, exact for every built-in family."""
        x = self._check_ambient(x)
        v = self._check_ambient(v)
        if self._block_shape is None:
            return x + v
        xb, vb = self._blocks(x), self._blocks(v)
        r = np.linalg.norm(vb, axis=-1, keepdims=True)
        return self._flat(np.cos(r) * xb + np.sinc(r / np.pi) * vb)

    def retract_jvp(self, x, v, dx, dv):
        """Derivative of ``(x, v) -> retract(x, v)`` along ``(dx, dv)``.

        Uses the ambient formula ``cos|v| x + sin|v|/|v| v`` so it is exact for
        on-manifold ``x``, tangent ``v`` and any admissible ``(dx, dv)``.
        """
        if self._block_shape is None:
            return np.asarray(dx) + np.asarray(dv)
        xb, vb = self._blocks(x), self._blocks(v)
        dxb, dvb = self._blocks(dx), self._blocks(dv)
        r = np.linalg.norm(vb, axis=-1, keepdims=True)
        s = np.sinc(r / np.pi)
        small = r < 1e-3
        r_safe = np.where(small, 1.0, r)
        q = np.where(small, -1.0 / 3.0 + r**2 / 30.0, (r_safe * np.cos(r_safe) - np.sin(r_safe)) / r_safe**3)
        vdv = np.sum(vb * dvb, axis=-1, keepdims=True)
        out = np.cos(r) * dxb + s * dvb + vdv * (q * vb - s * xb)
        return self._flat(out)

    def geodesic_distance(self, x, y):
        """Riemannian distance, computed from chord lengths for accuracy."""
        x = self._check_ambient(x)
        y = self._check_ambient(y)
        if self._block_shape is None:
            return np.linalg.norm(x - y, axis=-1)
        chord = np.linalg.norm(self._blocks(x) - self._blocks(y), axis=-1)
        arc = 2.0 * np.arcsin(np.minimum(chord / 2.0, 1.0))
        return np.sqrt(np.sum(arc**2, axis=-1))

    def pairwise_sq_distances(self, x, y):
        """Matrix of squared geodesic distances between two point sets."""
        x = self._check_ambient(x)
        y = self._check_ambient(y)
        return self.geodesic_distance(x[:, None, :], y[None, :, :]) ** 2

    # -- sampling ---------------------------------------------------------
    def sample_uniform(self, n: int, rng):
        """``n`` i.i.d. points, uniform in Riemannian volume.

        Euclidean space has no uniform law; standard Gaussian points are
        returned instead.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        z = rng.standard_normal((n, self.ambient_dim))
        if self._block_shape is None:
            return z
        return self.project_to_manifold(z)

    # -- torus helpers ----------------------------------------------------
    def from_angles(self, theta):
        if self.kind != "torus":
            raise ValueError("from_angles is defined for the flat torus only")
        theta = np.asarray(theta, dtype=float)
        out = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return out.reshape(theta.shape[:-1] + (self.ambient_dim,))

    def to_angles(self, x):
        if self.kind != "torus":
            raise ValueError("to_angles is defined for the flat torus only")
        b = self._blocks(x)
        return np.arctan2(b[..., 1], b[..., 0])


def Euclidean(d: int) -> EmbeddedManifold:
    return EmbeddedManifold("euclidean", d)


def Sphere(d: int) -> EmbeddedManifold:
    return EmbeddedManifold("sphere", d)


def FlatTorus(d: int) -> EmbeddedManifold:
    return EmbeddedManifold("torus", d)


def manifold_from_spec(spec: str) -> EmbeddedManifold:
    """Parse ``"euclidean:d"``, ``"sphere:d"`` or ``"torus:d"``."""
    try:
        kind, dim = spec.split(":")
        return EmbeddedManifold(kind.strip().lower(), int(dim))
    except (ValueError, AttributeError) as exc:
        raise ValueError(f"bad manifold spec {spec!r}") from exc

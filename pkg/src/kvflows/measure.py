"""Finite-support probability measures on an embedded manifold."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .errors import ManifoldMismatch, SupportTooLarge
from .geometry import EmbeddedManifold, manifold_from_spec

__all__ = [
    "EmpiricalMeasure",
    "wasserstein2",
    "subsampled_wasserstein2",
    "W2Estimate",
    "sample_iid",
    "UniformSampler",
    "CapSampler",
    "PointsSampler",
    "read_jsonl",
    "write_jsonl",
]

EXACT_SUPPORT_CAP = 512
LCM_ASSIGNMENT_CAP = 4096


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted point cloud ``sum_j w_j delta_{x_j}``.

    ``points`` has shape ``(m, N)``; both arrays are stored read-only so a
    measure behaves as a value.
    """

    manifold: EmbeddedManifold
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, ndmin=2)
        w = np.array(self.weights, dtype=float, ndmin=1)
        if pts.shape[-1] != self.manifold.ambient_dim:
            raise ValueError("points do not match the ambient dimension")
        if w.shape != (pts.shape[0],):
            raise ValueError("one weight per point required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        if not self.manifold.contains(pts):
            raise ValueError("support points must lie on the manifold")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, manifold, points):
        points = np.asarray(points, dtype=float)
        m = points.shape[0]
        return cls(manifold, points, np.full(m, 1.0 / m))

    @classmethod
    def delta(cls, manifold, x):
        return cls(manifold, np.asarray(x, dtype=float)[None, :], np.ones(1))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"EmpiricalMeasure({self.manifold!r}, size={self.size})"

    def pushforward(self, T: Callable) -> "EmpiricalMeasure":
        """Image measure under a map applied to the support points."""
        return EmpiricalMeasure(self.manifold, np.asarray(T(self.points), dtype=float), self.weights)

    def integrate(self, f) -> float:
        """``<f, mu>``; ``f`` is a callable or an observable with ``.value``."""
        fn = getattr(f, "value", f)
        return float(self.weights @ np.asarray(fn(self.points), dtype=float))

    def permuted(self, perm) -> "EmpiricalMeasure":
        perm = np.asarray(perm)
        return EmpiricalMeasure(self.manifold, self.points[perm], self.weights[perm])

    def same_measure(self, other: "EmpiricalMeasure", tol: float = 0.0) -> bool:
        """Equality as measures, i.e. up to relabelling of the support."""
        if self.manifold != other.manifold or self.size != other.size:
            return False
        a = np.column_stack([self.points, self.weights])
        b = np.column_stack([other.points, other.weights])
        a = a[np.lexsort(a.T[::-1])]
        b = b[np.lexsort(b.T[::-1])]
        return bool(np.all(np.abs(a - b) <= tol))

    def to_records(self):
        return [{"coords": p.tolist(), "weight": float(w)} for p, w in zip(self.points, self.weights)]


def _check_pair(mu, nu):
    if mu.manifold != nu.manifold:
        raise ManifoldMismatch(f"{mu.manifold!r} vs {nu.manifold!r}")


def _is_uniform(w):
    return np.all(w == w[0])


def _ot_cost(a, b, cost):
    """Exact optimal transport cost for marginals ``a``, ``b`` and cost matrix."""
    m, n = cost.shape
    if _is_uniform(a) and _is_uniform(b) and math.lcm(m, n) <= LCM_ASSIGNMENT_CAP:
        # equal masses: replicating atoms up to lcm(m, n) turns the LP into an
        # assignment problem with the same optimum (integral vertices)
        L = math.lcm(m, n)
        big = np.repeat(np.repeat(cost, L // m, axis=0), L // n, axis=1)
        rows, cols = linear_sum_assignment(big)
        return float(big[rows, cols].sum() / L)
    # transportation LP: sum_j P_ij = a_i, sum_i P_ij = b_j
    row = sparse.kron(sparse.eye(m), np.ones((1, n)))
    col = sparse.kron(np.ones((1, m)), sparse.eye(n))
    A_eq = sparse.vstack([row, col]).tocsr()
    b_eq = np.concatenate([a, b])
    res = linprog(
        cost.ravel(), A_eq=A_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, cap: int = EXACT_SUPPORT_CAP) -> float:
    """Exact Wasserstein-2 distance with geodesic ground cost."""
    _check_pair(mu, nu)
    if max(mu.size, nu.size) > cap:
        raise SupportTooLarge(f"support sizes {mu.size}, {nu.size} exceed exact cap {cap}")
    cost = mu.manifold.pairwise_sq_distances(mu.points, nu.points)
    return float(np.sqrt(max(_ot_cost(mu.weights, nu.weights, cost), 0.0)))


def w2_uniform_arrays(manifold, X, Y):
    """W2 between equal-weight point sets given as arrays ``(m, N)``."""
    cost = manifold.pairwise_sq_distances(X, Y)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].mean(), 0.0)))


def w2_arrays(manifold, X, Y, wx, wy):
    cost = manifold.pairwise_sq_distances(X, Y)
    return float(np.sqrt(max(_ot_cost(wx, wy, cost), 0.0)))


class W2Estimate(NamedTuple):
    value: float
    approximate: bool
    subsample: int


def subsampled_wasserstein2(mu, nu, size: int, rng, repeats: int = 1) -> W2Estimate:
    """Approximate W2 from i.i.d. equal-weight subsamples (flagged approximate)."""
    _check_pair(mu, nu)
    vals = []
    for _ in range(repeats):
        X = mu.points[rng.choice(mu.size, size=size, p=mu.weights)]
        Y = nu.points[rng.choice(nu.size, size=size, p=nu.weights)]
        vals.append(w2_uniform_arrays(mu.manifold, X, Y) ** 2)
    return W2Estimate(float(np.sqrt(np.mean(vals))), True, size)


# -- samplers -----------------------------------------------------------------
@dataclass(frozen=True)
class UniformSampler:
    manifold: EmbeddedManifold

    def __call__(self, n, rng):
        return self.manifold.sample_uniform(n, rng)


@dataclass(frozen=True)
class CapSampler:
    """Normalized Gaussian cloud around ``center``: ``project(center + spread * Z)``."""

    manifold: EmbeddedManifold
    center: tuple
    spread: float

    def __call__(self, n, rng):
        c = np.asarray(self.center, dtype=float)
        z = c + self.spread * rng.standard_normal((n, self.manifold.ambient_dim))
        return self.manifold.project_to_manifold(z)


@dataclass(frozen=True)
class PointsSampler:
    """Resample from a fixed list of points."""

    manifold: EmbeddedManifold
    points: tuple

    def __call__(self, n, rng):
        pts = np.asarray(self.points, dtype=float)
        return pts[rng.integers(0, len(pts), size=n)]


def sample_iid(generator, n: int, rng) -> EmpiricalMeasure:
    """Equal-weight empirical measure of ``n`` i.i.d. draws."""
    pts = generator(n, rng)
    return EmpiricalMeasure.uniform(generator.manifold, pts)


# -- serialization ------------------------------------------------------------
def write_jsonl(path, measures, times=None):
    """One line per support point: ``{"snapshot", "time", "coords", "weight"}``.

    The first line is a header naming the manifold.
    """
    measures = list(measures)
    if times is None:
        times = range(len(measures))
    with open(path, "w") as fh:
        fh.write(json.dumps({"manifold": measures[0].manifold.spec if measures else None}) + "\n")
        for k, (t, mu) in enumerate(zip(times, measures)):
            for p, w in zip(mu.points, mu.weights):
                fh.write(json.dumps({"snapshot": k, "time": float(t), "coords": p.tolist(), "weight": float(w)}) + "\n")


def read_jsonl(path):
    """Inverse of :func:`write_jsonl`; returns ``(times, measures)``."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        manifold = manifold_from_spec(header["manifold"])
        groups = {}
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            groups.setdefault(rec["snapshot"], (rec["time"], [], []))
            groups[rec["snapshot"]][1].append(rec["coords"])
            groups[rec["snapshot"]][2].append(rec["weight"])
    times, measures = [], []
    for k in sorted(groups):
        t, pts, ws = groups[k]
        times.append(t)
        measures.append(EmpiricalMeasure(manifold, np.asarray(pts), np.asarray(ws)))
    return times, measures

"""Semigroup and chaos-kernel estimators for ``f(mu_t)``.

Three independent routes to the first-order kernel ``a_1^{t,i}(tau)`` are
provided:

* ``SemigroupFormula``: nested Monte Carlo for ``T_tau A_i T_{t - tau} f(mu)``
  where ``A_i`` differentiates along the pushforward by the flow of
  ``V_i(., mu)`` (central difference with common random numbers);
* ``ProjectionRegression``: orthogonality of the chaos decomposition,
  ``E[f(mu_t) dB^i(b)] / |b|`` per bin, or a Legendre-polynomial fit of the
  same projections evaluated at nodes;
* ``ClarkOcone``: the expected Malliavin derivative ``E[D_s^i f(mu_t)]``.

Every random quantity is derived from ``(seed, estimator label, replica ids)``
so that estimates do not depend on chunking or on the number of workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calculus import directional_arrays, perturb_points
from .errors import BudgetExhausted, InvalidGrid
from .fields import FieldSystem, constant_field
from .parallel import chunk_ranges, map_chunks
from .rng import derive_stream, derive_streams, gaussian_increments
from .solver import (SolverConfig, as_system, grid_steps, integrate_batch, malliavin_grid_times, malliavin_inject,
                     malliavin_seed, malliavin_steps)

__all__ = [
    "SemigroupEstimate",
    "ChaosKernelEstimate",
    "KVBudgets",
    "estimate_semigroup",
    "estimate_semigroup_nested",
    "apply_A",
    "SemigroupFunctional",
    "kv_kernel_order1",
    "kv_kernel_order2",
    "projection_kernel_order1",
    "projection_kernel_order2",
    "projection_regression_order1",
    "clark_ocone_kernel",
    "clark_ocone_kernels",
    "truncation_diagnostics",
    "kernel_nodes",
    "disable_noise",
]

CHUNK = 512
PATH_BATCH = 16384


@dataclass
class SemigroupEstimate:
    value: float
    stderr: float
    replicas: int
    t: float
    seed: int
    diverged: int = 0


@dataclass
class ChaosKernelEstimate:
    order: int
    index: int
    times: tuple
    method: str
    value: float
    stderr: float
    bias: float = 0.0
    eps: float = 0.0
    outer_n: int = 0
    inner_n: int = 0
    extra: dict = field(default_factory=dict)

    def as_row(self):
        return {
            "method": self.method, "i": self.index,
            "tau1": self.times[0] if self.times else "", "tau2": self.times[1] if len(self.times) > 1 else "",
            "value": self.value, "stderr": self.stderr, "outer_n": self.outer_n, "inner_n": self.inner_n,
            "eps": self.eps, "bias": self.bias,
        }


@dataclass(frozen=True)
class KVBudgets:
    """Replica counts for nested estimators.

    ``eps`` defaults to ``1e-2 * max(t, 0.1)``; ``eps_ratio`` sets the second
    rung of the mandatory epsilon sweep.
    """

    outer: int = 1000
    inner: int = 16
    middle: int = 4
    eps: float = None
    eps_ratio: float = 0.5
    antithetic: bool = True
    max_paths: float = 5e9


def disable_noise(system: FieldSystem, index: int) -> FieldSystem:
    """Replace diffusion field ``index`` (0-based) by the zero field, keeping its Brownian motion."""
    zero = constant_field(system.manifold, np.zeros(system.manifold.ambient_dim))
    diff = tuple(zero if k == index else f for k, f in enumerate(system.diffusion))
    return FieldSystem(system.manifold, system.drift, diff)


def kernel_nodes(t: float, count: int, dt: float):
    """Chebyshev-like nodes on ``[0, t]`` including both endpoints, rounded to the time grid."""
    if count < 2:
        return np.array([t])
    k = np.arange(count)
    x = 0.5 * t * (1 - np.cos(np.pi * k / (count - 1)))
    nodes = np.unique(np.round(x / dt) * dt)
    return np.clip(nodes, 0.0, t)


def _default_eps(t, budgets):
    return budgets.eps if budgets.eps is not None else 1e-2 * max(t, 0.1)


# ---------------------------------------------------------------------------
# path primitives
# ---------------------------------------------------------------------------
def _evolve(system, starts, w, dB, dt, cfg, antithetic):
    """Final carriers ``(A, B, P, N)`` for starts ``(B, P, N)`` and noise ``(B, steps, n)``.

    With ``antithetic`` the second slab uses ``-dB``.  Diverged replicas come
    back as NaN.
    """
    A = 2 if antithetic else 1
    if dB.shape[1] == 0:
        return np.broadcast_to(starts, (A,) + starts.shape).copy()
    if antithetic:
        dB = np.concatenate([dB, -dB])
        starts = np.concatenate([starts, starts])
    N = starts.shape[-1]
    out = integrate_batch(system, starts, w, np.zeros((0, N)), dB, dt, scheme=cfg.scheme,
                          renormalize=cfg.renormalize, save="final")
    Y = out["Y"][0]
    Y[out["diverged"]] = np.nan
    return Y.reshape((A, -1) + Y.shape[1:])


def _pair_combine(vals, parity):
    """Combine antithetic slabs ``vals[0]`` (noise ``+dB``) and ``vals[1]`` (``-dB``).

    ``parity`` is the parity of the noise factor multiplying the functional
    (``+1`` for even, ``-1`` for odd), so the estimator stays unbiased.
    """
    if vals.shape[0] == 1:
        return vals[0]
    return 0.5 * (vals[0] + parity * vals[1])


def _mean_se(x, axis=0):
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    m = x.mean(axis=axis)
    se = x.std(axis=axis, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(m)
    return m, se


def _semigroup_chunk(F, system, X0, w, steps, cfg, parent, lo, hi, antithetic, keep_noise):
    keys = derive_streams(np.uint64(parent), np.arange(lo, hi, dtype=np.uint64))
    dB = gaussian_increments(keys, system.n_noise, steps, cfg.dt)
    starts = np.broadcast_to(X0, (hi - lo,) + X0.shape)
    finals = _evolve(system, starts, w, dB, cfg.dt, cfg, antithetic)
    with np.errstate(invalid="ignore"):
        vals = F.values(finals, w)
    return vals, (dB if keep_noise else None)


def _semigroup_samples(F, system, mu, t, cfg, pairs, seed, antithetic=True, keep_noise=False):
    """Values ``(A, R)`` of ``f(mu_t)`` (and increments) from the shared semigroup streams."""
    steps = grid_steps(t, cfg.dt)
    parent = derive_stream(seed, "semigroup")
    tasks = [(F, system, mu.points, mu.weights, steps, cfg, parent, lo, hi, antithetic, keep_noise)
             for lo, hi in chunk_ranges(pairs, CHUNK)]
    parts = map_chunks(_semigroup_chunk, tasks)
    vals = np.concatenate([p[0] for p in parts], axis=1)
    dB = np.concatenate([p[1] for p in parts], axis=0) if keep_noise else None
    return vals, dB


def _centered_mean(values, ref):
    """``ref + mean(values - ref)``; exact when every value equals ``ref``."""
    return float(ref + np.mean(values - ref))


def _valid(vals):
    return np.all(np.isfinite(vals), axis=0)


# ---------------------------------------------------------------------------
# semigroup
# ---------------------------------------------------------------------------
def estimate_semigroup(f, mu, t, fields, cfg: SolverConfig = None, replicas: int = 1000, seed: int = 0,
                       antithetic: bool = True) -> SemigroupEstimate:
    """Monte Carlo ``T_t f(mu) = E f(mu_t)``.

    With antithetic pairing ``replicas // 2`` noise streams are used twice
    (``+dB`` and ``-dB``) and the standard error comes from the pair means.
    """
    if replicas < 2:
        raise ValueError("replicas must be >= 2")
    system = as_system(fields, mu.manifold)
    cfg = cfg or SolverConfig()
    f0 = f(mu)
    if t == 0:
        return SemigroupEstimate(f0, 0.0, replicas, 0.0, seed)
    pairs = replicas // 2 if antithetic else replicas
    vals, _ = _semigroup_samples(f, system, mu, t, cfg, pairs, seed, antithetic)
    ok = _valid(vals)
    m = _pair_combine(vals[:, ok], +1)
    value = _centered_mean(m, f0)
    se = float(m.std(ddof=1) / np.sqrt(len(m))) if len(m) > 1 else 0.0
    return SemigroupEstimate(value, se, int(ok.sum()) * vals.shape[0], float(t), seed, int((~ok).sum()))


def _nested_chunk(F, system, X0, w, steps1, steps2, cfg, outer_parent, inner_parent, lo, hi, inner, antithetic):
    ids = np.arange(lo, hi, dtype=np.uint64)
    dB1 = gaussian_increments(derive_streams(np.uint64(outer_parent), ids), system.n_noise, steps1, cfg.dt)
    X1 = _evolve(system, np.broadcast_to(X0, (hi - lo,) + X0.shape), w, dB1, cfg.dt, cfg, False)[0]
    okeys = derive_streams(np.uint64(inner_parent), ids)
    keys = derive_streams(okeys[:, None], np.arange(inner, dtype=np.uint64)[None, :])
    dB2 = gaussian_increments(keys, system.n_noise, steps2, cfg.dt).reshape((-1, steps2, system.n_noise))
    starts = np.repeat(X1, inner, axis=0)
    finals = _evolve(system, starts, w, dB2, cfg.dt, cfg, antithetic)
    vals = _pair_combine(F.values(finals, w), +1).reshape(hi - lo, inner)
    return vals.mean(axis=1)


def estimate_semigroup_nested(f, mu, t1, t2, fields, cfg=None, outer=500, inner=8, seed=0, antithetic=True):
    """``T_{t1} (T_{t2} f)(mu)`` by nesting; equals ``T_{t1 + t2} f(mu)`` by the Markov property."""
    system = as_system(fields, mu.manifold)
    cfg = cfg or SolverConfig()
    s1, s2 = grid_steps(t1, cfg.dt), grid_steps(t2, cfg.dt)
    op, ip = derive_stream(seed, "nested", "outer"), derive_stream(seed, "nested", "inner")
    tasks = [(f, system, mu.points, mu.weights, s1, s2, cfg, op, ip, lo, hi, inner, antithetic)
             for lo, hi in chunk_ranges(outer, max(1, CHUNK // inner))]
    est = np.concatenate(map_chunks(_nested_chunk, tasks))
    est = est[np.isfinite(est)]
    m, se = _mean_se(est)
    return SemigroupEstimate(float(m), float(se), len(est), t1 + t2, seed)


# ---------------------------------------------------------------------------
# A_i
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SemigroupFunctional:
    """``mu -> T_t f(mu)`` estimated with a fixed seed, so repeated calls share noise."""

    f: object
    t: float
    fields: object
    cfg: SolverConfig = SolverConfig()
    replicas: int = 1000
    seed: int = 0

    def samples(self, mu):
        system = as_system(self.fields, mu.manifold)
        vals, _ = _semigroup_samples(self.f, system, mu, self.t, self.cfg, self.replicas // 2, self.seed)
        return _pair_combine(vals, +1)

    def __call__(self, mu):
        return estimate_semigroup(self.f, mu, self.t, self.fields, self.cfg, self.replicas, self.seed).value


@dataclass
class AResult:
    fd: float
    stderr: float = 0.0
    analytic: float = None
    eps: float = 0.0


def apply_A(i: int, g, mu, fields, eps: float = 1e-3) -> AResult:
    """``A_i g(mu)``: derivative along the pushforward by the flow of ``V_i(., mu)``.

    ``i`` is 1-based (``V_1..V_n`` are the diffusion fields).  ``g`` is a
    built-in functional (the analytic pairing is returned as well) or a
    :class:`SemigroupFunctional` (the +eps and -eps evaluations share noise).
    """
    system = as_system(fields, mu.manifold)
    V = system.diffusion[i - 1]
    M = mu.manifold

    def shifted(e):
        pts = perturb_points(M, mu.points, lambda Z: V.evaluate(Z, mu.points, mu.weights), e)
        return type(mu)(M, pts, mu.weights)

    plus, minus = shifted(eps), shifted(-eps)
    if isinstance(g, SemigroupFunctional):
        d = (g.samples(plus) - g.samples(minus)) / (2 * eps)
        m, se = _mean_se(d)
        return AResult(float(m), float(se), None, eps)
    fd = (g(plus) - g(minus)) / (2 * eps)
    Vx = V.evaluate(mu.points, mu.points, mu.weights)
    analytic = float(directional_arrays(g, M, mu.points, mu.weights, Vx))
    return AResult(float(fd), 0.0, analytic, eps)


# ---------------------------------------------------------------------------
# Krylov-Veretennikov nested estimators
# ---------------------------------------------------------------------------
def _direction(V, X, w):
    return lambda Z: V.evaluate(Z, X, w)


def _kv1_chunk(F, system, X0, w, cfg, i, steps_tau, steps_rest, eps_list, outer_parent, inner_parent,
               lo, hi, inner, antithetic):
    M = system.manifold
    V = system.diffusion[i - 1]
    ids = np.arange(lo, hi, dtype=np.uint64)
    Bo = hi - lo
    dB1 = gaussian_increments(derive_streams(np.uint64(outer_parent), ids), system.n_noise, steps_tau, cfg.dt)
    Xt = _evolve(system, np.broadcast_to(X0, (Bo,) + X0.shape), w, dB1, cfg.dt, cfg, False)[0]
    if steps_rest == 0:
        est = directional_arrays(F, M, Xt, w, V.evaluate(Xt, Xt, w))
        return np.repeat(est[:, None], len(eps_list), axis=1)
    fn = _direction(V, Xt, w)
    starts = np.stack([np.stack([perturb_points(M, Xt, fn, s * e) for s in (1.0, -1.0)], axis=1)
                       for e in eps_list], axis=1)  # (Bo, E, 2, P, N)
    E = len(eps_list)
    okeys = derive_streams(np.uint64(inner_parent), ids)
    keys = derive_streams(okeys[:, None], np.arange(inner, dtype=np.uint64)[None, :])
    dB = gaussian_increments(keys, system.n_noise, steps_rest, cfg.dt)  # (Bo, Mi, steps, n)
    shape = (Bo, inner, E, 2)
    dBf = np.broadcast_to(dB[:, :, None, None], shape + dB.shape[2:]).reshape((-1,) + dB.shape[2:])
    startsf = np.broadcast_to(starts[:, None], shape + starts.shape[3:]).reshape((-1,) + starts.shape[3:])
    finals = _evolve(system, startsf, w, dBf, cfg.dt, cfg, antithetic)
    with np.errstate(invalid="ignore"):
        vals = _pair_combine(F.values(finals, w), +1).reshape(shape)
    d = (vals[..., 0] - vals[..., 1]) / (2 * np.asarray(eps_list))  # (Bo, Mi, E)
    return d.mean(axis=1)


def kv_kernel_order1(f, mu, t, tau, i, fields, cfg: SolverConfig = None, budgets: KVBudgets = None,
                     seed: int = 0) -> ChaosKernelEstimate:
    """``a_1^{t,i}(tau) = T_tau A_i T_{t - tau} f(mu)`` by nested Monte Carlo.

    ``i`` is 1-based.  Outer replicas carry ``mu`` to ``tau``; for each, the
    central difference along ``V_i(., mu_tau)`` of ``T_{t - tau} f`` is
    estimated with ``inner`` common-noise replicas at ``eps`` and
    ``eps * eps_ratio``.  ``bias`` is the Richardson estimate of the
    ``O(eps^2)`` difference error at ``eps``; ``stderr`` is the outer standard
    error.  At ``tau = t`` the derivative is analytic.
    """
    system = as_system(fields, mu.manifold)
    cfg = cfg or SolverConfig()
    budgets = budgets or KVBudgets()
    if not 0 <= tau <= t + 1e-12:
        raise InvalidGrid("need 0 <= tau <= t")
    s_tau = grid_steps(tau, cfg.dt)
    s_rest = grid_steps(t, cfg.dt) - s_tau
    eps = _default_eps(t, budgets)
    eps_list = [eps, eps * budgets.eps_ratio]
    A = 2 if budgets.antithetic else 1
    paths = budgets.outer * (1 + budgets.inner * len(eps_list) * 2 * A)
    if paths > budgets.max_paths:
        raise BudgetExhausted(f"{paths:.3g} paths requested, limit {budgets.max_paths:.3g}")
    op = derive_stream(seed, "kv1", "outer")
    ip = derive_stream(seed, "kv1", "inner")
    chunk = max(1, PATH_BATCH // (budgets.inner * len(eps_list) * 2 * A))
    tasks = [(f, system, mu.points, mu.weights, cfg, i, s_tau, s_rest, eps_list, op, ip, lo, hi,
              budgets.inner, budgets.antithetic) for lo, hi in chunk_ranges(budgets.outer, chunk)]
    est = np.concatenate(map_chunks(_kv1_chunk, tasks), axis=0)
    ok = np.all(np.isfinite(est), axis=1)
    est = est[ok]
    m, se = _mean_se(est)
    bias = abs(m[0] - m[1]) / (1 - budgets.eps_ratio**2) if s_rest else 0.0
    return ChaosKernelEstimate(1, i, (float(tau),), "SemigroupFormula", float(m[0]), float(se[0]),
                               float(bias), eps if s_rest else 0.0, int(ok.sum()), budgets.inner if s_rest else 0,
                               {"eps_sweep": {float(e): float(v) for e, v in zip(eps_list, m)},
                                "diverged": int((~ok).sum())})


def _kv2_chunk(F, system, X0, w, cfg, i, s1, s2, s3, eps1, eps2, outer_parent, mid_parent, inner_parent,
               lo, hi, middle, inner, antithetic):
    M = system.manifold
    V = system.diffusion[i - 1]
    ids = np.arange(lo, hi, dtype=np.uint64)
    Bo = hi - lo
    n = system.n_noise
    dB1 = gaussian_increments(derive_streams(np.uint64(outer_parent), ids), n, s1, cfg.dt)
    X1 = _evolve(system, np.broadcast_to(X0, (Bo,) + X0.shape), w, dB1, cfg.dt, cfg, False)[0]
    fn1 = _direction(V, X1, w)
    st1 = np.stack([perturb_points(M, X1, fn1, s * eps1) for s in (1.0, -1.0)], axis=1)  # (Bo, 2, P, N)
    mkeys = derive_streams(derive_streams(np.uint64(mid_parent), ids)[:, None],
                           np.arange(middle, dtype=np.uint64)[None, :])
    dB2 = gaussian_increments(mkeys, n, s2, cfg.dt)  # (Bo, Mm, s2, n)
    sh2 = (Bo, middle, 2)
    X2 = _evolve(system,
                 np.broadcast_to(st1[:, None], sh2 + st1.shape[2:]).reshape((-1,) + st1.shape[2:]), w,
                 np.broadcast_to(dB2[:, :, None], sh2 + dB2.shape[2:]).reshape((-1, s2, n)), cfg.dt, cfg, False)[0]
    if s3 == 0:
        Aval = directional_arrays(F, M, X2, w, V.evaluate(X2, X2, w)).reshape(sh2)
        return ((Aval[..., 0] - Aval[..., 1]) / (2 * eps1)).mean(axis=1)
    fn2 = _direction(V, X2, w)
    st2 = np.stack([perturb_points(M, X2, fn2, s * eps2) for s in (1.0, -1.0)], axis=1)  # (B2, 2, P, N)
    st2 = st2.reshape(sh2 + st2.shape[1:])  # (Bo, Mm, 2, 2, P, N)
    ikeys = derive_streams(mkeys[..., None], np.arange(inner, dtype=np.uint64))  # (Bo, Mm, Mi)
    dB3 = gaussian_increments(ikeys, n, s3, cfg.dt)  # (Bo, Mm, Mi, s3, n)
    sh3 = (Bo, middle, inner, 2, 2)
    starts = np.broadcast_to(st2[:, :, None], sh3 + st2.shape[4:]).reshape((-1,) + st2.shape[4:])
    noise = np.broadcast_to(dB3[:, :, :, None, None], sh3 + dB3.shape[3:]).reshape((-1, s3, n))
    finals = _evolve(system, starts, w, noise, cfg.dt, cfg, antithetic)
    with np.errstate(invalid="ignore"):
        vals = _pair_combine(F.values(finals, w), +1).reshape(sh3)
    sign = np.array([1.0, -1.0])
    d2 = np.einsum("omjab,a,b->omj", vals, sign, sign) / (4 * eps1 * eps2)
    return d2.mean(axis=(1, 2))


def kv_kernel_order2(f, mu, t, tau1, tau2, i, fields, cfg: SolverConfig = None, budgets: KVBudgets = None,
                     seed: int = 0) -> ChaosKernelEstimate:
    """``a_2^{t,i}(tau1, tau2) = T_tau1 A_i T_{tau2 - tau1} A_i T_{t - tau2} f(mu)``.

    Both ``A_i`` are central differences; the two branches of the outer
    difference share the middle and inner noise, so the second difference is
    taken path by path.
    """
    system = as_system(fields, mu.manifold)
    cfg = cfg or SolverConfig()
    budgets = budgets or KVBudgets()
    if not 0 <= tau1 < tau2 <= t + 1e-12:
        raise InvalidGrid("need 0 <= tau1 < tau2 <= t")
    s1 = grid_steps(tau1, cfg.dt)
    s2 = grid_steps(tau2, cfg.dt) - s1
    s3 = grid_steps(t, cfg.dt) - s1 - s2
    eps = _default_eps(t, budgets)
    A = 2 if budgets.antithetic else 1
    per_outer = budgets.middle * 2 * (1 + (budgets.inner * 2 * A if s3 else 0))
    paths = budgets.outer * (1 + per_outer)
    if paths > budgets.max_paths:
        raise BudgetExhausted(f"{paths:.3g} paths requested, limit {budgets.max_paths:.3g}")
    op = derive_stream(seed, "kv2", "outer")
    mp = derive_stream(seed, "kv2", "middle")
    ip = derive_stream(seed, "kv2", "inner")
    chunk = max(1, PATH_BATCH // per_outer)
    tasks = [(f, system, mu.points, mu.weights, cfg, i, s1, s2, s3, eps, eps, op, mp, ip, lo, hi,
              budgets.middle, budgets.inner, budgets.antithetic)
             for lo, hi in chunk_ranges(budgets.outer, chunk)]
    est = np.concatenate(map_chunks(_kv2_chunk, tasks))
    ok = np.isfinite(est)
    m, se = _mean_se(est[ok])
    return ChaosKernelEstimate(2, i, (float(tau1), float(tau2)), "SemigroupFormula", float(m), float(se),
                               0.0, eps, int(ok.sum()), budgets.middle * budgets.inner,
                               {"middle": budgets.middle, "diverged": int((~ok).sum())})


# ---------------------------------------------------------------------------
# projection estimators
# ---------------------------------------------------------------------------
def _bin_edges(bins, steps, dt):
    if np.isscalar(bins):
        nb = int(bins)
        if nb < 1 or nb > steps:
            raise InvalidGrid(f"{steps} steps cannot be split into {nb} bins")
        # equal widths when nb divides steps, otherwise as equal as the grid allows
        return np.round(np.linspace(0, steps, nb + 1)).astype(int)
    edges = np.round(np.asarray(bins, dtype=float) / dt).astype(int)
    if edges[0] != 0 or edges[-1] != steps or np.any(np.diff(edges) <= 0):
        raise InvalidGrid("bin edges must partition [0, t] on the time grid")
    return edges


def _binned_increments(dB, edges):
    """``(R, nb, n)`` bin increments."""
    c = np.concatenate([np.zeros((dB.shape[0], 1, dB.shape[2])), np.cumsum(dB, axis=1)], axis=1)
    return c[:, edges[1:]] - c[:, edges[:-1]]


def _projection_samples(f, mu, t, fields, cfg, replicas, seed, antithetic=True):
    system = as_system(fields, mu.manifold)
    pairs = replicas // 2 if antithetic else replicas
    vals, dB = _semigroup_samples(f, system, mu, t, cfg, pairs, seed, antithetic, keep_noise=True)
    ok = _valid(vals)
    return vals[:, ok], dB[ok], system


def projection_kernel_order1(f, mu, t, bins, i, fields, cfg: SolverConfig = None, replicas: int = 10000,
                             seed: int = 0, antithetic: bool = True):
    """Bin averages of ``a_1^{t,i}``: ``E[f(mu_t) dB^i(b)] / |b|`` for each bin ``b``."""
    cfg = cfg or SolverConfig()
    vals, dB, _ = _projection_samples(f, mu, t, fields, cfg, replicas, seed, antithetic)
    return _binned_first_order(vals, dB, i, bins, t, cfg)


def _binned_first_order(vals, dB, i, bins, t, cfg):
    steps = grid_steps(t, cfg.dt)
    edges = _bin_edges(bins, steps, cfg.dt)
    widths = np.diff(edges) * cfg.dt
    inc = _binned_increments(dB, edges)[..., i - 1]  # (R, nb)
    y = _pair_combine(vals[..., None] * inc[None], -1) / widths
    m, se = _mean_se(y)
    out = []
    for b in range(len(widths)):
        lo, hi = edges[b] * cfg.dt, edges[b + 1] * cfg.dt
        out.append(ChaosKernelEstimate(1, i, (float(lo), float(hi)), "ProjectionRegression", float(m[b]),
                                       float(se[b]), outer_n=y.shape[0], extra={"bin": (float(lo), float(hi))}))
    return out


def projection_regression_order1(f, mu, t, nodes, i, fields, cfg: SolverConfig = None, replicas: int = 10000,
                                 seed: int = 0, degree: int = 3, antithetic: bool = True):
    """Node values of a polynomial fit to the first-order projections.

    With ``phi_k`` the Legendre polynomials on ``[0, t]`` and
    ``I_k = sum_j phi_k(mid_j) dB^i_j``, the coefficients solve
    ``G c = E[f(mu_t) I_k]`` with the discrete Gram matrix ``G``.
    """
    cfg = cfg or SolverConfig()
    vals, dB, _ = _projection_samples(f, mu, t, fields, cfg, replicas, seed, antithetic)
    steps = dB.shape[1]
    mids = (np.arange(steps) + 0.5) * cfg.dt
    Phi = np.polynomial.legendre.legvander(2 * mids / t - 1, degree)  # (steps, L+1)
    G = Phi.T @ Phi * cfg.dt
    I = dB[..., i - 1] @ Phi  # (R, L+1)
    y = _pair_combine(vals[..., None] * I[None], -1)
    ybar = y.mean(axis=0)
    cov_y = np.cov(y, rowvar=False, ddof=1) / y.shape[0]
    Ginv = np.linalg.inv(G)
    c = Ginv @ ybar
    cov_c = Ginv @ np.atleast_2d(cov_y) @ Ginv
    out = []
    for tau in np.atleast_1d(nodes):
        phi = np.polynomial.legendre.legvander(np.array([2 * tau / t - 1]), degree)[0]
        out.append(ChaosKernelEstimate(1, i, (float(tau),), "ProjectionRegression", float(phi @ c),
                                       float(np.sqrt(max(phi @ cov_c @ phi, 0.0))), outer_n=y.shape[0],
                                       extra={"degree": degree}))
    return out


def projection_kernel_order2(f, mu, t, bins, i, fields, cfg: SolverConfig = None, replicas: int = 10000,
                             seed: int = 0, antithetic: bool = True, j=None):
    """``E[f(mu_t) dB^i(b1) dB^j(b2)] / (|b1| |b2|)`` for every ordered pair of disjoint bins ``b1 < b2``."""
    cfg = cfg or SolverConfig()
    j = i if j is None else j
    vals, dB, _ = _projection_samples(f, mu, t, fields, cfg, replicas, seed, antithetic)
    return _binned_second_order(vals, dB, i, j, bins, t, cfg)


def _binned_second_order(vals, dB, i, j, bins, t, cfg):
    steps = grid_steps(t, cfg.dt)
    edges = _bin_edges(bins, steps, cfg.dt)
    widths = np.diff(edges) * cfg.dt
    inc = _binned_increments(dB, edges)
    out = []
    for b1 in range(len(widths)):
        for b2 in range(b1 + 1, len(widths)):
            prod = inc[:, b1, i - 1] * inc[:, b2, j - 1] / (widths[b1] * widths[b2])
            y = _pair_combine(vals * prod[None], +1)
            m, se = _mean_se(y)
            out.append(ChaosKernelEstimate(2, i, (float(edges[b1] * cfg.dt), float(edges[b2] * cfg.dt)),
                                           "ProjectionRegression", float(m), float(se), outer_n=len(y),
                                           extra={"j": j, "bins": ((float(edges[b1] * cfg.dt), float(edges[b1 + 1] * cfg.dt)),
                                                                   (float(edges[b2] * cfg.dt), float(edges[b2 + 1] * cfg.dt)))}))
    return out


# ---------------------------------------------------------------------------
# Clark-Ocone
# ---------------------------------------------------------------------------
def _clark_ocone_chunk(F, system, X0, w, cfg, i, steps, s_list, parent, lo, hi, antithetic, mode):
    ids = np.arange(lo, hi, dtype=np.uint64)
    B = hi - lo
    n = system.n_noise
    dB = gaussian_increments(derive_streams(np.uint64(parent), ids), n, steps, cfg.dt)
    if antithetic:
        dB = np.concatenate([dB, -dB])
    Bt = dB.shape[0]
    C = len(s_list)
    if mode == "increment":
        kw = {"inject": malliavin_inject(s_list, n, cfg.dt, Bt, 0, steps, index=i)}
    else:
        kw = {"seed": malliavin_seed(system, s_list, w, 0, steps, cfg.dt, index=i)}
    N = X0.shape[-1]
    out = integrate_batch(system, X0, w, np.zeros((0, N)), dB, cfg.dt, scheme=cfg.scheme,
                          renormalize=cfg.renormalize, tangent=np.zeros((C, Bt) + X0.shape), save="final", **kw)
    X = out["Y"][0]
    D = out["T"][0]  # (C, Bt, P, N)
    G = F.gradients(system.manifold, X, w)
    vals = np.einsum("bpn,cbpn,p->cb", G, D, w)
    vals[:, out["diverged"]] = np.nan
    A = 2 if antithetic else 1
    return vals.reshape(C, A, B).transpose(1, 0, 2)  # (A, C, B)


def clark_ocone_kernels(f, mu, t, s_list, i, fields, cfg: SolverConfig = None, replicas: int = 10000,
                        seed: int = 0, antithetic: bool = True, mode: str = "field"):
    """``E[D^i_s f(mu_t)]`` for each ``s`` in ``s_list`` (0 for ``s > t``).

    ``mode="field"`` starts the Malliavin columns from ``V_i(., mu_s)`` at
    ``s``; ``mode="increment"`` differentiates the discrete solution with
    respect to the increment containing ``s`` (the discrete kernel seen by
    the projection estimator).
    """
    system = as_system(fields, mu.manifold)
    cfg = cfg or SolverConfig()
    steps = grid_steps(t, cfg.dt)
    s_list = [float(s) for s in np.atleast_1d(s_list)]
    ks = (malliavin_steps if mode == "increment" else malliavin_grid_times)(s_list, cfg.dt, steps)
    active = [c for c, k in enumerate(ks) if k >= 0]
    results = [None] * len(s_list)
    pairs = replicas // 2 if antithetic else replicas
    if active:
        parent = derive_stream(seed, "clark-ocone")
        tasks = [(f, system, mu.points, mu.weights, cfg, i, steps, [s_list[c] for c in active], parent, lo, hi,
                  antithetic, mode) for lo, hi in chunk_ranges(pairs, CHUNK)]
        vals = np.concatenate(map_chunks(_clark_ocone_chunk, tasks), axis=2)  # (A, C, R)
        ok = np.all(np.isfinite(vals), axis=(0, 1))
        y = _pair_combine(vals[:, :, ok], +1)  # (C, R)
        m, se = _mean_se(y, axis=1)
        for c_idx, c in enumerate(active):
            results[c] = ChaosKernelEstimate(1, i, (s_list[c],), "ClarkOcone", float(m[c_idx]), float(se[c_idx]),
                                             outer_n=int(ok.sum()))
    for c, s in enumerate(s_list):
        if results[c] is None:
            results[c] = ChaosKernelEstimate(1, i, (s,), "ClarkOcone", 0.0, 0.0, outer_n=0)
    return results


def clark_ocone_kernel(f, mu, t, s, i, fields, cfg: SolverConfig = None, replicas: int = 10000, seed: int = 0,
                       antithetic: bool = True, mode: str = "field") -> ChaosKernelEstimate:
    return clark_ocone_kernels(f, mu, t, [s], i, fields, cfg, replicas, seed, antithetic, mode)[0]


# ---------------------------------------------------------------------------
# variance budget
# ---------------------------------------------------------------------------
def truncation_diagnostics(f, mu, t, fields, cfg: SolverConfig = None, replicas: int = 10000, bins=10,
                           seed: int = 0, antithetic: bool = True, mixed: bool = True):
    """Variance budget of ``f(mu_t)`` against its first-order chaos part.

    The mean uses exactly the samples (and the combination rule) of
    :func:`estimate_semigroup` with the same seed.  For each noise index the
    first-order energy ``int a_1^2`` is approximated by
    ``sum_b abar_b^2 |b|`` from binned projections, with and without the
    ``stderr^2`` noise correction.  Mixed-index second-order projections
    ``E[f dB^i(b1) dB^j(b2)] / (|b1||b2|)`` are reported separately.
    """
    system = as_system(fields, mu.manifold)
    cfg = cfg or SolverConfig()
    f0 = f(mu)
    report = {"t": float(t), "replicas": int(replicas), "bins": bins, "seed": int(seed), "n_noise": system.n_noise}
    if t == 0 or system.n_noise == 0:
        report.update(mean=f0, variance=0.0, first_order={}, first_order_total=0.0, first_order_share=None,
                      residual_share=None, mixed={})
        if t == 0:
            return report
    pairs = replicas // 2 if antithetic else replicas
    vals, dB = _semigroup_samples(f, system, mu, t, cfg, pairs, seed, antithetic, keep_noise=True)
    ok = _valid(vals)
    vals, dB = vals[:, ok], dB[ok]
    m = _pair_combine(vals, +1)
    report["mean"] = _centered_mean(m, f0)
    report["mean_stderr"] = float(m.std(ddof=1) / np.sqrt(len(m)))
    flat = vals.ravel()
    var = float(np.var(flat, ddof=1))
    report["variance"] = var
    report["diverged"] = int((~ok).sum())
    if system.n_noise == 0:
        return report
    first = {}
    total_raw = total = 0.0
    for i in range(1, system.n_noise + 1):
        est = _binned_first_order(vals, dB, i, bins, t, cfg)
        widths = np.array([e.times[1] - e.times[0] for e in est])
        a = np.array([e.value for e in est])
        se = np.array([e.stderr for e in est])
        raw = float(np.sum(a**2 * widths))
        corr = float(np.sum((a**2 - se**2) * widths))
        first[i] = {"bins": a.tolist(), "stderr": se.tolist(), "energy_raw": raw, "energy": corr}
        total_raw += raw
        total += corr
    report["first_order"] = first
    report["first_order_total"] = total
    report["first_order_total_raw"] = total_raw
    report["first_order_share"] = total / var if var > 0 else None
    report["residual_share"] = 1.0 - total / var if var > 0 else None
    mixed_rep = {}
    if mixed and system.n_noise > 1:
        for i in range(1, system.n_noise + 1):
            for j in range(1, system.n_noise + 1):
                if i == j:
                    continue
                est = _binned_second_order(vals, dB, i, j, bins, t, cfg)
                v = np.array([e.value for e in est])
                s = np.array([e.stderr for e in est])
                z = np.abs(v) / np.where(s > 0, s, np.inf)
                mixed_rep[f"{i},{j}"] = {"rms": float(np.sqrt(np.mean(v**2))), "max_abs_z": float(z.max()),
                                         "values": v.tolist(), "stderr": s.tolist()}
    report["mixed"] = mixed_rep
    return report

"""Time stepping for the interacting system.

The state of one replica is the stack ``Y = [carriers; tracked]`` of shape
``(P + Q, N)``.  Carriers define the empirical measure ``mu_t`` (with fixed
weights); tracked points feel ``mu_t`` but do not contribute to it.  All
replicas of a batch advance together with array shape ``(B, P + Q, N)``.

The primary scheme is a Heun predictor/corrector for the Stratonovich
equation, with the exponential map as retraction and the measure frozen at
the carrier positions from the start of the step.  Optional tangent-linear
columns are pushed through the exact derivative of that discrete step; they
realize the Jacobian, variational and Malliavin flows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidGrid, ManifoldMismatch, NonFinite
from .fields import FieldSystem, InteractionField
from .measure import EmpiricalMeasure, w2_arrays, w2_uniform_arrays
from .rng import derive_stream, derive_streams, gaussian_increments

__all__ = [
    "NoisePath",
    "simulate_noise",
    "noise_batch",
    "SolverConfig",
    "FlowSolution",
    "integrate_batch",
    "solve_interacting_flow",
    "picard_solve",
    "estimate_stability",
    "sup_w2_gap",
    "StabilityResult",
    "ConvergenceResult",
    "convergence_order",
    "as_system",
    "grid_steps",
]

HEUN = "heun"
ITO_EULER = "ito-euler"
_SCHEMES = {
    HEUN: HEUN, "stratonovich-heun": HEUN, "StratonovichHeun": HEUN,
    ITO_EULER: ITO_EULER, "ito-euler-corrected": ITO_EULER, "ItoEulerCorrected": ITO_EULER,
}


def grid_steps(T: float, dt: float) -> int:
    """Number of steps, insisting that ``T / dt`` is an integer."""
    if not (dt > 0) or not math.isfinite(dt):
        raise InvalidGrid(f"time step must be positive, got {dt}")
    if T < 0 or not math.isfinite(T):
        raise InvalidGrid(f"horizon must be non-negative, got {T}")
    steps = round(T / dt)
    if abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise InvalidGrid(f"T={T} is not an integer multiple of dt={dt}")
    return int(steps)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NoisePath:
    """Brownian increments on a uniform grid, shape ``(steps, n)``."""

    increments: np.ndarray
    dt: float
    seed: int = 0
    stream_id: int = 0

    @property
    def n(self) -> int:
        return self.increments.shape[1]

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def T(self) -> float:
        return self.steps * self.dt

    @property
    def times(self):
        return self.dt * np.arange(self.steps + 1)

    def brownian(self):
        """Path values ``B_{t_j}``, shape ``(steps + 1, n)``."""
        return np.vstack([np.zeros((1, self.n)), np.cumsum(self.increments, axis=0)])

    def coarsen(self, factor: int) -> "NoisePath":
        """Sum consecutive blocks of ``factor`` increments."""
        if factor < 1 or self.steps % factor:
            raise InvalidGrid(f"cannot coarsen {self.steps} steps by {factor}")
        inc = self.increments.reshape(self.steps // factor, factor, self.n).sum(axis=1)
        return NoisePath(inc, self.dt * factor, self.seed, self.stream_id)

    def negated(self) -> "NoisePath":
        return NoisePath(-self.increments, self.dt, self.seed, self.stream_id)


def simulate_noise(n: int, T: float, dt: float, seed: int, stream_id: int = 0) -> NoisePath:
    """Counter-based increments: entry ``(j, i)`` depends only on ``(seed, stream_id, i, j)``."""
    if n < 0:
        raise InvalidGrid("number of Brownian motions must be >= 0")
    steps = grid_steps(T, dt)
    key = derive_stream(seed, stream_id)
    inc = gaussian_increments(np.uint64(key), n, steps, dt)
    return NoisePath(inc, float(dt), int(seed), int(stream_id))


def noise_batch(n: int, steps: int, dt: float, seed: int, stream_ids, parent=None) -> np.ndarray:
    """Increments for many streams at once, shape ``(B, steps, n)``.

    Row ``b`` equals ``simulate_noise(n, steps * dt, dt, seed, stream_ids[b]).increments``
    when ``parent`` is omitted; otherwise streams are children of the key ``parent``.
    """
    base = derive_stream(seed) if parent is None else parent
    keys = derive_streams(np.uint64(base), np.asarray(stream_ids, dtype=np.uint64))
    return gaussian_increments(keys, n, steps, dt)


# ---------------------------------------------------------------------------
# configuration and results
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SolverConfig:
    scheme: str = HEUN
    dt: float = 1e-2
    save_stride: int = 1
    renormalize: bool = True

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        object.__setattr__(self, "scheme", _SCHEMES[self.scheme])
        if not (self.dt > 0):
            raise InvalidGrid("dt must be positive")
        if int(self.save_stride) < 1:
            raise ValueError("save_stride must be >= 1")


def as_system(fields, manifold=None) -> FieldSystem:
    """Accept a FieldSystem or a sequence ``[V0, V1, ..., Vn]`` (``V0`` may be None)."""
    if isinstance(fields, FieldSystem):
        if manifold is not None and fields.manifold != manifold:
            raise ManifoldMismatch(f"fields on {fields.manifold!r}, measure on {manifold!r}")
        return fields
    fields = list(fields)
    if not fields:
        if manifold is None:
            raise ValueError("manifold required for an empty field list")
        return FieldSystem(manifold, None, ())
    ref = next((f.manifold for f in fields if f is not None), manifold)
    if manifold is not None and ref != manifold:
        raise ManifoldMismatch(f"fields on {ref!r}, measure on {manifold!r}")
    return FieldSystem(ref, fields[0], tuple(fields[1:]))


@dataclass
class FlowSolution:
    """Snapshots of one replica.

    ``carriers``/``tracked`` have shape ``(S, P, N)``/``(S, Q, N)``.  The
    optional auxiliary arrays are indexed by snapshot first:

    * ``jacobian``: ``(S, Q, N, N)``, ambient matrix of ``d x(u, t) / d u``
      restricted to ``T_u M``;
    * ``variational``: ``(S, P + Q, N)``, rows ``P:`` are ``D_I^psi x(u, t)``
      for the tracked points and rows ``:P`` the total carrier derivative;
    * ``malliavin``: ``(S, len(malliavin_times), n, P + Q, N)``.
    """

    manifold: object
    weights: np.ndarray
    times: np.ndarray
    carriers: np.ndarray
    tracked: np.ndarray
    config: SolverConfig
    noise: NoisePath = None
    jacobian: np.ndarray = None
    variational: np.ndarray = None
    malliavin: np.ndarray = None
    malliavin_times: tuple = ()
    tangency_error: float = 0.0

    @property
    def n_carriers(self) -> int:
        return self.carriers.shape[1]

    @property
    def measure_path(self):
        return [EmpiricalMeasure(self.manifold, X, self.weights) for X in self.carriers]

    def measure_at(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.manifold, self.carriers[k], self.weights)

    @property
    def tracked_paths(self):
        return self.tracked

    def variational_tracked(self):
        return None if self.variational is None else self.variational[:, self.n_carriers:]

    def malliavin_tracked(self, s_index: int = 0):
        """``(S, n, Q, N)`` Malliavin derivative of tracked points for one ``s``."""
        return None if self.malliavin is None else self.malliavin[:, s_index, :, self.n_carriers:]


# ---------------------------------------------------------------------------
# the batched engine
# ---------------------------------------------------------------------------
def _as_batch(a, B, N):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros((B, 0, N))
    if a.ndim == 2:
        return np.broadcast_to(a, (B,) + a.shape).copy()
    return a.copy()


def _heun_step(system, Y, X, w, dBk, dt, T=None, TX=None, ddB=None):
    M = system.manifold
    inc0 = system.increment(Y, X, w, dBk, dt)
    Ys = M.retract(Y, inc0)
    inc1 = system.increment(Ys, X, w, dBk, dt)
    a = 0.5 * (inc0 + inc1)
    v = M.project_to_tangent(Y, a)
    Ynew = M.retract(Y, v)
    if T is None:
        return Ynew, None
    d0 = system.increment_jvp(Y, X, w, dBk, dt, dY=T, dX=TX, ddB=ddB)
    dYs = M.retract_jvp(Y, inc0, T, d0)
    d1 = system.increment_jvp(Ys, X, w, dBk, dt, dY=dYs, dX=TX, ddB=ddB)
    da = 0.5 * (d0 + d1)
    dv = M.project_to_tangent(Y, da) + M.projector_derivative(Y, T, a)
    return Ynew, M.retract_jvp(Y, v, T, dv)


def _ito_euler_step(system, Y, X, w, dBk, dt):
    M = system.manifold
    inc = system.increment(Y, X, w, dBk, dt) + dt * system.ito_correction(Y, X, w)
    return M.retract(Y, M.project_to_tangent(Y, inc))


def _save_indices(steps, stride, save):
    if save == "final":
        return [steps]
    idx = list(range(0, steps + 1, stride))
    if idx[-1] != steps:
        idx.append(steps)
    return idx


def integrate_batch(system: FieldSystem, carriers, weights, tracked, dB, dt, *, scheme=HEUN,
                    save_stride=1, renormalize=True, measure_path=None, tangent=None,
                    inject=None, seed=None, save="all"):
    """Advance a batch of replicas.

    Parameters
    ----------
    carriers, tracked : array ``(P, N)`` / ``(Q, N)`` or batched ``(B, ., N)``
    dB : array ``(B, steps, n)``
    measure_path : optional array ``(B, steps, P, N)``; when given, the
        measure used in step ``k`` is taken from it instead of from the
        carriers themselves (frozen-path / Picard mode).
    tangent : optional initial tangent columns ``(C, B, P + Q, N)``.
    inject : optional callable ``k -> (C, B, n) or None`` giving the
        derivative of the step-``k`` increment with respect to the column
        parameter (discrete Malliavin columns).
    seed : optional callable ``(k, Y, X) -> (C, B, P + Q, N) or None`` whose
        value is added to the tangent columns at grid time ``k`` before the
        state is recorded (Malliavin columns started from ``V_i`` at ``s``).
    save : ``"all"`` (every ``save_stride`` steps, plus the last) or ``"final"``.

    Returns
    -------
    dict with ``Y`` ``(S, B, P+Q, N)``, ``T`` ``(S, C, B, P+Q, N)`` or None,
    ``steps`` (saved step indices), ``diverged`` ``(B,)`` and ``tangency``.
    """
    M = system.manifold
    N = M.ambient_dim
    dB = np.asarray(dB, dtype=float)
    B, steps, n = dB.shape
    if n != system.n_noise:
        raise ValueError(f"noise has {n} components, system has {system.n_noise} diffusion fields")
    w = np.asarray(weights, dtype=float)
    Xc = _as_batch(carriers, B, N)
    Yt = _as_batch(tracked, B, N)
    P = Xc.shape[1]
    Y = np.concatenate([Xc, Yt], axis=1)
    scheme = _SCHEMES[scheme]
    if scheme != HEUN and (tangent is not None or inject is not None or seed is not None):
        raise ValueError("auxiliary flows are available for the Heun scheme only")

    T = None if tangent is None else np.array(tangent, dtype=float)
    idx = _save_indices(steps, save_stride, save)
    Ysave = np.empty((len(idx),) + Y.shape)
    Tlist = [None] * len(idx)
    pos = 0
    diverged = np.zeros(B, dtype=bool)
    tangency = 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(steps + 1):
            X = Y[:, :P] if (measure_path is None or k == steps) else measure_path[:, k]
            if seed is not None:
                add = seed(k, Y, X)
                if add is not None:
                    T = add if T is None else T + add
            if pos < len(idx) and idx[pos] == k:
                Ysave[pos] = Y
                Tlist[pos] = None if T is None else T.copy()
                pos += 1
            if k == steps:
                break
            ddB = inject(k) if inject is not None else None
            if ddB is not None and T is None:
                T = np.zeros((ddB.shape[0],) + Y.shape)
            if scheme == HEUN:
                TX = None if (T is None or measure_path is not None) else T[:, :, :P]
                Y, T = _heun_step(system, Y, X, w, dB[:, k], dt, T, TX, ddB)
            else:
                Y = _ito_euler_step(system, Y, X, w, dB[:, k], dt)
            if renormalize:
                bad = ~np.isfinite(Y).all(axis=(1, 2))
                if bad.any():
                    Y[bad] = np.nan
                    diverged |= bad
                good = ~diverged
                Y[good] = M.renormalize(Y[good])
            else:
                diverged |= ~np.isfinite(Y).all(axis=(1, 2))
            if T is not None:
                tangency = max(tangency, M.tangent_error(Y[~diverged], T[:, ~diverged]))
                T = M.project_to_tangent(Y, T)
    Tsave = None
    shapes = [a.shape for a in Tlist if a is not None]
    if shapes:
        Tsave = np.zeros((len(idx),) + shapes[0])
        for j, a in enumerate(Tlist):
            if a is not None:
                Tsave[j] = a
    return {"Y": Ysave, "T": Tsave, "steps": idx, "diverged": diverged, "tangency": tangency, "P": P}


# ---------------------------------------------------------------------------
# single-replica front end
# ---------------------------------------------------------------------------
def _direction_values(psi, mu: EmpiricalMeasure):
    M = mu.manifold
    if psi is None:
        return None
    if isinstance(psi, InteractionField):
        vals = psi.evaluate(mu.points, mu.points, mu.weights)
    else:
        vals = np.asarray(psi(mu.points), dtype=float)
    return M.project_to_tangent(mu.points, vals)


def malliavin_steps(s_list, dt, steps):
    """Step index whose increment ``D_s`` differentiates; ``s = T`` maps to the last step, ``s > T`` to none."""
    out = []
    for s in s_list:
        k = int(math.floor(s / dt + 1e-9))
        if k == steps and s <= steps * dt * (1 + 1e-12):
            k = steps - 1
        out.append(k if 0 <= k < steps else -1)
    return out


def malliavin_grid_times(s_list, dt, steps):
    """Grid index at which a column started from ``V_i`` at time ``s`` is seeded (-1 when ``s > T``)."""
    out = []
    for s in s_list:
        k = int(math.floor(s / dt + 1e-9))
        out.append(k if 0 <= k <= steps else -1)
    return out


def malliavin_inject(s_list, n, dt, B, prior_cols, steps, index=None):
    """Columns differentiating the increment of the step containing each ``s``.

    One column per ``(s, i)`` (or per ``s`` when ``index`` selects a single
    1-based noise component).
    """
    ks = malliavin_steps(s_list, dt, steps)
    comps = list(range(n)) if index is None else [index - 1]

    def inject(k):
        hit = [j for j, ks_j in enumerate(ks) if ks_j == k]
        if not hit:
            return None
        ddB = np.zeros((prior_cols + len(s_list) * len(comps), B, n))
        for j in hit:
            for c, i in enumerate(comps):
                ddB[prior_cols + j * len(comps) + c, :, i] = 1.0
        return ddB

    return inject


def malliavin_seed(system, s_list, w, prior_cols, steps, dt, index=None):
    """Columns started from ``V_i(x_s, mu_s)`` at grid time ``s`` (zero before)."""
    ks = malliavin_grid_times(s_list, dt, steps)
    comps = list(range(system.n_noise)) if index is None else [index - 1]
    C = prior_cols + len(s_list) * len(comps)

    def seed(k, Y, X):
        hit = [j for j, ks_j in enumerate(ks) if ks_j == k]
        if not hit:
            return None
        add = np.zeros((C,) + Y.shape)
        vals = {i: system.diffusion[i].evaluate(Y, X, w) for i in comps}
        for j in hit:
            for c, i in enumerate(comps):
                add[prior_cols + j * len(comps) + c] = vals[i]
        return add

    return seed


def solve_interacting_flow(mu0: EmpiricalMeasure, fields, W: NoisePath, tracked=(),
                           cfg: SolverConfig = None, *, jacobian=False, variational=None,
                           malliavin_times: Sequence[float] = (), malliavin_mode: str = "field") -> FlowSolution:
    """Simulate one replica of the interacting system driven by ``W``.

    ``variational`` is a direction field ``psi`` (an InteractionField,
    evaluated at ``mu0``, or a callable on points); ``malliavin_times`` lists
    the times ``s`` for which ``D_s x`` is requested.  With
    ``malliavin_mode="field"`` the columns start from ``V_i(x(u, s), mu_s)``
    at grid time ``s`` and follow the linearized flow; with ``"increment"``
    they are the exact derivatives of the discrete solution with respect to
    the Brownian increment of the step containing ``s``.
    """
    system = as_system(fields, mu0.manifold)
    cfg = cfg or SolverConfig(dt=W.dt)
    if abs(cfg.dt - W.dt) > 1e-12 * W.dt:
        raise InvalidGrid(f"solver dt={cfg.dt} does not match noise dt={W.dt}")
    M = mu0.manifold
    N = M.ambient_dim
    tracked = np.asarray(tracked, dtype=float).reshape(-1, N)
    if tracked.size and not M.contains(tracked):
        raise ValueError("tracked points must lie on the manifold")
    P, Q = mu0.size, tracked.shape[0]

    cols = []
    if jacobian:
        Jcols = np.zeros((N, P + Q, N))
        if Q:
            Jcols[:, P:, :] = np.swapaxes(M.tangent_projector(tracked), 0, 1)
        cols.append(Jcols)
    psi_vals = _direction_values(variational, mu0)
    if psi_vals is not None:
        Vcol = np.zeros((1, P + Q, N))
        Vcol[0, :P] = psi_vals
        cols.append(Vcol)
    prior = sum(c.shape[0] for c in cols)
    tangent = None
    if cols or malliavin_times:
        base = np.concatenate(cols, axis=0) if cols else np.zeros((0, P + Q, N))
        tangent = np.concatenate([base, np.zeros((len(malliavin_times) * W.n, P + Q, N))])[:, None]
    inject = seed = None
    if malliavin_times and malliavin_mode == "increment":
        inject = malliavin_inject(list(malliavin_times), W.n, W.dt, 1, prior, W.steps)
    elif malliavin_times and malliavin_mode == "field":
        seed = malliavin_seed(system, list(malliavin_times), mu0.weights, prior, W.steps, W.dt)
    elif malliavin_times:
        raise ValueError(f"unknown malliavin_mode {malliavin_mode!r}")

    out = integrate_batch(system, mu0.points, mu0.weights, tracked, W.increments[None], W.dt,
                          scheme=cfg.scheme, save_stride=cfg.save_stride, renormalize=cfg.renormalize,
                          tangent=tangent, inject=inject, seed=seed)
    if out["diverged"][0]:
        raise NonFinite("non-finite state encountered; the replica diverged")
    Y = out["Y"][:, 0]
    sol = FlowSolution(M, mu0.weights, W.dt * np.asarray(out["steps"], dtype=float), Y[:, :P], Y[:, P:],
                       cfg, W, tangency_error=out["tangency"])
    if out["T"] is not None:
        Tt = out["T"][:, :, 0]  # (S, C, P+Q, N)
        c = 0
        if jacobian:
            sol.jacobian = Tt[:, c:c + N, P:, :].transpose(0, 2, 3, 1)
            c += N
        if psi_vals is not None:
            sol.variational = Tt[:, c]
            c += 1
        if malliavin_times:
            S = Tt.shape[0]
            sol.malliavin = Tt[:, c:].reshape(S, len(malliavin_times), W.n, P + Q, N)
            sol.malliavin_times = tuple(float(s) for s in malliavin_times)
    return sol


# ---------------------------------------------------------------------------
# Picard iteration
# ---------------------------------------------------------------------------
def picard_solve(mu0: EmpiricalMeasure, fields, W: NoisePath, tracked=(), cfg: SolverConfig = None,
                 iterations: int = 4):
    """Frozen-measure-path iterates ``x^0, x^1, ..., x^{K-1}``.

    Iterate 0 is driven by the constant path ``mu_t = mu0``; iterate ``k``
    by the measure path of iterate ``k - 1``.  All share ``W``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    system = as_system(fields, mu0.manifold)
    cfg = cfg or SolverConfig(dt=W.dt)
    M = mu0.manifold
    tracked = np.asarray(tracked, dtype=float).reshape(-1, M.ambient_dim)
    P = mu0.size
    path = np.broadcast_to(mu0.points, (1, W.steps, P, M.ambient_dim))
    stride_idx = _save_indices(W.steps, cfg.save_stride, "all")
    out = []
    for _ in range(iterations):
        res = integrate_batch(system, mu0.points, mu0.weights, tracked, W.increments[None], W.dt,
                              scheme=cfg.scheme, save_stride=1, renormalize=cfg.renormalize,
                              measure_path=path)
        if res["diverged"][0]:
            raise NonFinite("Picard iterate diverged")
        Y = res["Y"][:, 0]
        path = Y[None, :-1, :P]
        Ys = Y[stride_idx]
        out.append(FlowSolution(M, mu0.weights, W.dt * np.asarray(stride_idx, dtype=float),
                                Ys[:, :P], Ys[:, P:], cfg, W))
    return out


def sup_w2_gap(a: FlowSolution, b: FlowSolution) -> float:
    """``sup_t W2(mu^a_t, mu^b_t)`` over common snapshots."""
    M = a.manifold
    if np.all(a.weights == a.weights[0]) and np.all(b.weights == b.weights[0]) and a.n_carriers == b.n_carriers:
        return max(w2_uniform_arrays(M, x, y) for x, y in zip(a.carriers, b.carriers))
    return max(w2_arrays(M, x, y, a.weights, b.weights) for x, y in zip(a.carriers, b.carriers))


# ---------------------------------------------------------------------------
# stability and convergence studies
# ---------------------------------------------------------------------------
def _w2_path(M, A, Bm, wa, wb):
    uniform = len(wa) == len(wb) and np.all(wa == wa[0]) and np.all(wb == wb[0])
    if uniform:
        return np.array([w2_uniform_arrays(M, x, y) for x, y in zip(A, Bm)])
    return np.array([w2_arrays(M, x, y, wa, wb) for x, y in zip(A, Bm)])


@dataclass
class StabilityResult:
    initial_w2: float
    ratio: dict
    stderr: dict
    tracked_ratio: dict = field(default_factory=dict)
    tracked_stderr: dict = field(default_factory=dict)
    numerator: dict = field(default_factory=dict)
    replicas: int = 0
    diverged: int = 0


def estimate_stability(mu0: EmpiricalMeasure, nu0: EmpiricalMeasure, fields, cfg: SolverConfig, T: float,
                       replicas: int, seed: int, tracked_pair=None, powers=(2, 4), chunk: int = 64):
    """Monte Carlo ratios ``E[sup_t W2(mu_t, nu_t)^p] / W2(mu0, nu0)^p``.

    Both measures are driven by the same noise in each replica.  With
    ``tracked_pair=(u, v)`` the ratio
    ``E[sup_t d(x_mu(u,t), x_nu(v,t))^p] / (d(u,v)^p + W2(mu0,nu0)^p)`` is
    reported as well.
    """
    system = as_system(fields, mu0.manifold)
    M = mu0.manifold
    steps = grid_steps(T, cfg.dt)
    g0 = w2_arrays(M, mu0.points, nu0.points, mu0.weights, nu0.weights)
    u = v = np.zeros((0, M.ambient_dim))
    if tracked_pair is not None:
        u = np.asarray(tracked_pair[0], dtype=float).reshape(1, -1)
        v = np.asarray(tracked_pair[1], dtype=float).reshape(1, -1)
    sups, tsups, n_div = [], [], 0
    for start in range(0, replicas, chunk):
        ids = np.arange(start, min(start + chunk, replicas))
        dB = noise_batch(system.n_noise, steps, cfg.dt, seed, ids)
        kw = dict(scheme=cfg.scheme, save_stride=cfg.save_stride, renormalize=cfg.renormalize)
        ra = integrate_batch(system, mu0.points, mu0.weights, u, dB, cfg.dt, **kw)
        rb = integrate_batch(system, nu0.points, nu0.weights, v, dB, cfg.dt, **kw)
        ok = ~(ra["diverged"] | rb["diverged"])
        n_div += int((~ok).sum())
        Pa, Pb = mu0.size, nu0.size
        for b in np.flatnonzero(ok):
            sups.append(_w2_path(M, ra["Y"][:, b, :Pa], rb["Y"][:, b, :Pb], mu0.weights, nu0.weights).max())
            if tracked_pair is not None:
                d = M.geodesic_distance(ra["Y"][:, b, Pa], rb["Y"][:, b, Pb])
                tsups.append(d.max())
    sups = np.asarray(sups)
    ratio, stderr, num = {}, {}, {}
    tr, tse = {}, {}
    R = max(len(sups), 1)
    for p in powers:
        vals = sups**p
        num[p] = float(vals.mean()) if len(vals) else float("nan")
        denom = g0**p
        ratio[p] = num[p] / denom if denom > 0 else (0.0 if num[p] == 0 else float("inf"))
        se = float(vals.std(ddof=1) / np.sqrt(R)) if len(vals) > 1 else 0.0
        stderr[p] = se / denom if denom > 0 else 0.0
        if tracked_pair is not None:
            tv = np.asarray(tsups) ** p
            d0 = float(M.geodesic_distance(u[0], v[0])) ** p + denom
            tr[p] = float(tv.mean()) / d0 if d0 > 0 else 0.0
            tse[p] = (float(tv.std(ddof=1) / np.sqrt(R)) / d0) if d0 > 0 and len(tv) > 1 else 0.0
    return StabilityResult(g0, ratio, stderr, tr, tse, num, len(sups), n_div)


@dataclass
class ConvergenceResult:
    dts: list
    gaps: list
    order: float


def convergence_order(mu0: EmpiricalMeasure, fields, seed: int, dts: Sequence[float], T: float,
                      replicas: int = 1, tracked=(), scheme=HEUN, renormalize=True):
    """Strong self-convergence order on a dyadic ladder with nested noise.

    ``dts`` must be decreasing with ratio 2.  The finest noise is generated
    once per replica; coarser paths sum consecutive fine increments.  The gap
    between consecutive levels is the root-mean-square over replicas of the
    largest geodesic displacement of any particle at the common coarse times.
    """
    system = as_system(fields, mu0.manifold)
    M = mu0.manifold
    dts = [float(d) for d in dts]
    for a, b in zip(dts, dts[1:]):
        if abs(a / b - 2.0) > 1e-9:
            raise InvalidGrid("dt ladder must be dyadic and decreasing")
    fine_steps = grid_steps(T, dts[-1])
    for d in dts:
        grid_steps(T, d)
    dB_fine = noise_batch(system.n_noise, fine_steps, dts[-1], seed, np.arange(replicas))
    tracked = np.asarray(tracked, dtype=float).reshape(-1, M.ambient_dim)
    sols = []
    for level, d in enumerate(dts):
        factor = 2 ** (len(dts) - 1 - level)
        dB = dB_fine.reshape(replicas, fine_steps // factor, factor, system.n_noise).sum(axis=2)
        stride = 2 ** level  # snapshots at the coarsest grid
        res = integrate_batch(system, mu0.points, mu0.weights, tracked, dB, d, scheme=scheme,
                              save_stride=stride, renormalize=renormalize)
        sols.append(res["Y"])
    gaps = []
    for a, b in zip(sols, sols[1:]):
        d = M.geodesic_distance(a, b)  # (S, B, P+Q)
        per_rep = d.max(axis=(0, 2))
        gaps.append(float(np.sqrt(np.mean(per_rep**2))))
    gaps_arr = np.asarray(gaps)
    if np.all(gaps_arr > 0) and len(gaps) >= 2:
        h = np.asarray(dts[:-1])
        order = float(np.polyfit(np.log(h), np.log(gaps_arr), 1)[0])
    else:
        order = float("nan")
    return ConvergenceResult(dts, gaps, order)

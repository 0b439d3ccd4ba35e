"""Seeded experiments: dispatch suites, collect records, write result files.

Output layout under ``<out>``::

    resolved-config.json   the validated config with every default filled in
    records.csv            one row per check or measured quantity
    report.json            summary (counts, failed acceptance checks, details)
    timings.json           wall time per record (kept apart so the files
                           above are bitwise reproducible)
    checkpoints/*.jsonl    measure snapshots (simulate)
    trajectories.csv       (replica, time, particle_id, coords...) (simulate)
    kernels-order{1,2}.csv chaos-kernel estimates (kv-kernels)
    diagnostics.json       variance budgets (kv-diagnostics)
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .calculus import (CompositeFunctional, FlowPath, LinearFunctional, analytic_directional, chain_rule_residual,
                       directional_arrays, empirical_gradient_identity, fd_intrinsic_directional, ito_residual_arrays,
                       perturb_measure)
from .chaos import (KVBudgets, clark_ocone_kernels, kernel_nodes, kv_kernel_order1, kv_kernel_order2,
                    projection_kernel_order1, projection_kernel_order2, projection_regression_order1,
                    truncation_diagnostics)
from .config import (ExperimentConfig, build_field, build_functional, build_manifold, build_measure, build_solver,
                     build_system)
from .errors import ConfigInvalid, InvalidGrid, KVFlowsError, OutputUnwritable
from .fields import affine_field, rotation_field
from .geometry import EmbeddedManifold
from .measure import EmpiricalMeasure, UniformSampler, w2_arrays, write_jsonl
from .parallel import chunk_ranges, map_chunks
from .rng import derive_stream
from .solver import (convergence_order, estimate_stability, grid_steps, integrate_batch, noise_batch, picard_solve,
                     simulate_noise, solve_interacting_flow, sup_w2_gap)

__all__ = ["ResultRecord", "RunResult", "run_experiment", "config_hash", "ladder_slope", "agreement_tolerance",
           "ito_ladder", "calculus_sampler", "perturbation_for_size"]

RECORD_COLUMNS = ["experiment", "config_hash", "seed", "suite", "test", "params", "value", "stderr", "tolerance",
                  "passed", "acceptance"]
ROUNDOFF = 1e-10


@dataclass
class ResultRecord:
    experiment: str
    config_hash: str
    seed: int
    suite: str
    test: str
    params: dict
    value: float
    stderr: float = None
    tolerance: float = None
    passed: bool = None
    acceptance: bool = False
    wall_time: float = 0.0

    def row(self):
        def num(x):
            return "" if x is None else repr(float(x))

        return {
            "experiment": self.experiment, "config_hash": self.config_hash, "seed": self.seed, "suite": self.suite,
            "test": self.test, "params": json.dumps(_clean(self.params), sort_keys=True), "value": num(self.value),
            "stderr": num(self.stderr), "tolerance": num(self.tolerance),
            "passed": "" if self.passed is None else str(bool(self.passed)).lower(),
            "acceptance": str(bool(self.acceptance)).lower(),
        }


@dataclass
class RunResult:
    out_dir: str
    config_hash: str
    records: list
    report: dict

    @property
    def success(self) -> bool:
        return self.report["success"]


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Git blob hash of the canonical resolved config (output path excluded)."""
    d = cfg.to_dict()
    d.pop("output", None)
    body = json.dumps(_clean(d), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# ---------------------------------------------------------------------------
# shared numerical helpers
# ---------------------------------------------------------------------------
def ladder_slope(steps, errors, floor=1e-11):
    """Least-squares slope of ``log err`` against ``log step``; ``nan`` when
    fewer than two errors exceed ``floor`` (the difference is exact)."""
    steps = np.asarray(steps, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = errors > floor
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(steps[keep]), np.log(errors[keep]), 1)[0])


def agreement_tolerance(se_a, se_b=0.0, bias_a=0.0, bias_b=0.0, sigma=3.0):
    """``sigma`` combined standard errors plus reported biases plus a roundoff floor."""
    return sigma * math.sqrt(se_a**2 + se_b**2) + abs(bias_a) + abs(bias_b) + ROUNDOFF


def calculus_sampler(M: EmbeddedManifold):
    if M.kind == "euclidean":
        return lambda n, rng: rng.standard_normal((n, M.ambient_dim))
    return UniformSampler(M)


def random_measure(M, n, rng):
    pts = calculus_sampler(M)(n, rng)
    w = rng.uniform(0.5, 1.5, size=n)
    return EmpiricalMeasure(M, pts, w / w.sum())


def random_measure_free_field(M, rng):
    A = rng.standard_normal((M.ambient_dim, M.ambient_dim))
    c = rng.standard_normal(M.ambient_dim)
    return affine_field(M, A, c)


def default_perturbation_field(M):
    if M.kind == "sphere" and M.ambient_dim == 3:
        return rotation_field(M, axis=(1.0, 0.0, 0.0))
    return affine_field(M, np.zeros((M.ambient_dim, M.ambient_dim)), np.eye(M.ambient_dim)[0])


def perturbation_for_size(mu, V, size, iterations=8):
    """Push ``mu`` along ``V`` for the time ``theta`` at which ``W2(mu, mu_theta) = size`` (secant search)."""
    if size == 0:
        return mu, 0.0

    def gap(theta):
        nu = perturb_measure(mu, V, theta)
        return w2_arrays(mu.manifold, mu.points, nu.points, mu.weights, nu.weights) - size, nu

    a, (ga, nu) = size, gap(size)
    if abs(ga) <= 1e-12 * size:
        return nu, a
    b = size * (1 + 0.5 * np.sign(-ga))
    gb, nu = gap(b)
    for _ in range(iterations):
        if gb == ga:
            break
        a, b, ga = b, b - gb * (b - a) / (gb - ga), gb
        gb, nu = gap(b)
        if abs(gb) <= 1e-12 * size:
            break
    return nu, b


def ito_ladder(F, system, mu, dts, T, replicas, seed, scheme="heun", chunk=16):
    """RMS at ``T`` of the Ito-formula residual on a dyadic ladder with nested noise.

    Returns ``(rms, stderr)`` lists, one entry per ``dt``.
    """
    dts = [float(d) for d in dts]
    fine = grid_steps(T, dts[-1])
    M = system.manifold
    parent = derive_stream(seed, "ito-ladder")
    finals = [[] for _ in dts]
    for lo, hi in chunk_ranges(replicas, chunk):
        dB_fine = noise_batch(system.n_noise, fine, dts[-1], seed, np.arange(lo, hi), parent=parent)
        for level, d in enumerate(dts):
            factor = int(round(d / dts[-1]))
            dB = dB_fine.reshape(hi - lo, fine // factor, factor, system.n_noise).sum(axis=2)
            res = integrate_batch(system, mu.points, mu.weights, np.zeros((0, M.ambient_dim)), dB, d,
                                  scheme=scheme, save="all")
            Xpath = res["Y"]
            R = ito_residual_arrays(F, system, Xpath, mu.weights, dB, d)
            finals[level].append(R[-1])
    rms, se = [], []
    for vals in finals:
        sq = np.concatenate(vals) ** 2
        m = float(np.mean(sq))
        rms.append(math.sqrt(m))
        s = float(np.std(sq, ddof=1) / math.sqrt(len(sq))) if len(sq) > 1 else 0.0
        se.append(s / (2 * math.sqrt(m)) if m > 0 else 0.0)
    return rms, se


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------
class _Context:
    def __init__(self, cfg: ExperimentConfig, out_dir: str, chash: str):
        self.cfg = cfg
        self.out = out_dir
        self.hash = chash
        self.M = build_manifold(cfg.manifold)
        self.system = build_system(cfg)
        self.mu0 = build_measure(cfg.initial_measure, self.M, cfg.seed)
        self.solver = build_solver(cfg.solver)
        self.b = cfg.budgets
        self.functionals = [(d, build_functional(d, self.M)) for d in cfg.functionals]
        self.records = []
        self.timings = []
        self.details = {}
        self.artifacts = []
        self._t0 = time.perf_counter()
        self.suite = None

    def indices(self):
        n = self.system.n_noise
        return list(range(1, n + 1)) if self.b.noise_indices is None else list(self.b.noise_indices)

    def emit(self, test, value, *, params=None, stderr=None, tolerance=None, passed=None, acceptance=False):
        now = time.perf_counter()
        rec = ResultRecord(self.cfg.name, self.hash, self.cfg.seed, self.suite, test, params or {},
                           value, stderr, tolerance, None if passed is None else bool(passed), acceptance,
                           now - self._t0)
        self._t0 = now
        self.records.append(rec)
        return rec

    def path(self, name):
        self.artifacts.append(name)
        return os.path.join(self.out, name)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------
def _simulate_chunk(system, mu0, solver, steps, seed, lo, hi):
    dB = noise_batch(system.n_noise, steps, solver.dt, seed, np.arange(lo, hi),
                     parent=derive_stream(seed, "simulate"))
    N = mu0.manifold.ambient_dim
    res = integrate_batch(system, mu0.points, mu0.weights, np.zeros((0, N)), dB, solver.dt, scheme=solver.scheme,
                          save_stride=solver.save_stride, renormalize=solver.renormalize)
    return res


def suite_simulate(ctx: _Context):
    b, M, mu0, solver = ctx.b, ctx.M, ctx.mu0, ctx.solver
    steps = grid_steps(b.horizon, solver.dt)
    tasks = [(ctx.system, mu0, solver, steps, ctx.cfg.seed, lo, hi) for lo, hi in chunk_ranges(b.replicas, 64)]
    parts = map_chunks(_simulate_chunk, tasks)
    Y = np.concatenate([p["Y"] for p in parts], axis=1)  # (S, R, P, N)
    diverged = np.concatenate([p["diverged"] for p in parts])
    times = solver.dt * np.asarray(parts[0]["steps"], dtype=float)
    ok = ~diverged
    err = float(np.max(M.on_manifold_error(Y[:, ok]))) if ok.any() else float("nan")
    tol = 1e-10 if solver.renormalize else None
    ctx.emit("on-manifold", err, params={"replicas": b.replicas, "steps": steps}, tolerance=tol,
             passed=None if tol is None else err <= tol, acceptance=tol is not None)
    ctx.emit("diverged-replicas", int(diverged.sum()), params={"replicas": b.replicas})
    for d, F in ctx.functionals:
        vals = F.values(Y[-1, ok], mu0.weights)
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        ctx.emit(f"mean-at-horizon[{d['name']}]", float(np.mean(vals)),
                 params={"t": b.horizon, "replicas": int(ok.sum())}, stderr=se)
    keep = min(b.trajectory_replicas, b.replicas)
    if keep:
        os.makedirs(os.path.join(ctx.out, "checkpoints"), exist_ok=True)
        with open(ctx.path("trajectories.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["replica", "time", "particle_id"] + [f"x{j}" for j in range(M.ambient_dim)])
            for r in range(keep):
                for s, t in enumerate(times):
                    for p in range(mu0.size):
                        wr.writerow([r, repr(float(t)), p] + [repr(float(v)) for v in Y[s, r, p]])
        for r in range(keep):
            snaps = [EmpiricalMeasure(M, Y[s, r], mu0.weights) for s in range(len(times))]
            write_jsonl(ctx.path(f"checkpoints/replica-{r:05d}.jsonl"), snaps, times)
    ctx.details["simulate"] = {"replicas": b.replicas, "steps": steps, "snapshots": len(times),
                               "diverged": int(diverged.sum()), "max_on_manifold_error": err}


def _ladder_check(ctx, test, ladder, errs, scales, acceptance=True, params=None):
    """``errs`` is (configs, ladder); relative errors use per-config ``scales``."""
    rel = np.asarray(errs) / np.maximum(np.asarray(scales)[:, None], 1e-300)
    slopes = [ladder_slope(ladder, r) for r in rel]
    finite = [s for s in slopes if math.isfinite(s)]
    min_slope = min(finite) if finite else float("nan")
    terminal = float(np.max(rel[:, -1]))
    ok = terminal <= ctx.b.max_rel_error and (not finite or min_slope >= ctx.b.min_slope)
    p = {"configs": len(rel), "min_slope": min_slope, "exact_configs": len(slopes) - len(finite),
         "ladder": list(ladder)}
    p.update(params or {})
    ctx.emit(test, terminal, params=p, tolerance=ctx.b.max_rel_error, passed=ok, acceptance=acceptance)
    return ok


def suite_check_calculus(ctx: _Context):
    b, M, system = ctx.b, ctx.M, ctx.system
    ladder = list(b.eps_ladder)
    fields = [("drift", system.drift)] if system.drift is not None else []
    fields += [(f"V{i + 1}", V) for i, V in enumerate(system.diffusion)]
    summary = {}
    for d, F in ctx.functionals:
        name = d["name"]
        # directional derivatives along the configured fields and along random measure-free fields
        errs, scales, errs_rand, scales_rand, cr_errs, cr_scales, gi = [], [], [], [], [], [], []
        for j in range(b.calculus_configs):
            rng = np.random.default_rng(derive_stream(ctx.cfg.seed, "calculus", name, j))
            mu = random_measure(M, b.calculus_particles, rng)
            Vr = random_measure_free_field(M, rng)
            for label, V in fields + [("random", Vr)]:
                an = analytic_directional(F, mu, V)
                Vx = M.project_to_tangent(mu.points, V.evaluate(mu.points, mu.points, mu.weights))
                G = F.gradients(M, mu.points, mu.weights)
                scale = float(np.sum(mu.weights * np.linalg.norm(G, axis=-1) * np.linalg.norm(Vx, axis=-1)))
                e = [abs(fd_intrinsic_directional(F, mu, V, eps) - an) for eps in ladder]
                (errs_rand if label == "random" else errs).append(e)
                (scales_rand if label == "random" else scales).append(scale)
            theta = float(rng.uniform(0.0, 0.5))
            path = FlowPath(Vr)
            parts = chain_rule_residual(F, path, mu, theta, ladder, return_parts=True)
            Xt = path.apply(mu.points, theta)
            vel = path.velocity(mu.points, theta)
            G = F.gradients(M, Xt, mu.weights)
            cr_errs.append([p[0] for p in parts])
            cr_scales.append(float(np.sum(mu.weights * np.linalg.norm(G, axis=-1) * np.linalg.norm(vel, axis=-1))))
            pts = calculus_sampler(M)(b.calculus_particles, rng)
            gi.append([empirical_gradient_identity(F, M, pts, h) for h in ladder])
        if errs:
            _ladder_check(ctx, f"intrinsic-derivative[{name}]", ladder, errs, scales, params={"fields": "system"})
        _ladder_check(ctx, f"intrinsic-derivative-random-field[{name}]", ladder, errs_rand, scales_rand)
        _ladder_check(ctx, f"chain-rule[{name}]", ladder, cr_errs, cr_scales)
        _ladder_check(ctx, f"empirical-gradient[{name}]", ladder, gi, np.ones(len(gi)))
        # Ito formula along the configured dynamics
        if system.n_noise and isinstance(F, (LinearFunctional, CompositeFunctional)):
            rms, se = ito_ladder(F, system, ctx.mu0, b.ito_ladder, b.ito_horizon, b.ito_replicas, ctx.cfg.seed,
                                 ctx.solver.scheme)
            exact = max(rms) <= ROUNDOFF
            ratios = [r1 / r0 if r0 > 0 else float("nan") for r0, r1 in zip(rms, rms[1:])]
            lo, hi = 0.5 * (1 - b.ito_tolerance), 0.5 * (1 + b.ito_tolerance)
            ok = exact or all(lo <= r <= hi for r in ratios)
            ctx.emit(f"ito-residual-ratio[{name}]", max(ratios, key=lambda r: abs(r - 0.5)) if ratios and not exact
                     else 0.0, params={"dts": b.ito_ladder, "rms": rms, "rms_stderr": se, "ratios": ratios,
                                       "exact": exact, "replicas": b.ito_replicas, "T": b.ito_horizon},
                     tolerance=b.ito_tolerance, passed=ok, acceptance=True)
            summary[name] = {"ito_rms": rms, "ito_ratios": ratios}
        # Malliavin duality: binned projection against averaged Clark-Ocone
        if system.n_noise:
            _duality(ctx, d, F)
    ctx.details["check-calculus"] = summary


def _duality(ctx, d, F):
    b, cfg = ctx.b, ctx.solver
    t = b.kernel_t
    steps = grid_steps(t, cfg.dt)
    for i in ctx.indices():
        proj = projection_kernel_order1(F, ctx.mu0, t, b.duality_bins, i, ctx.system, cfg, b.duality_replicas,
                                        seed=derive_stream(ctx.cfg.seed, "duality-projection"),
                                        antithetic=b.antithetic)
        grid = [k * cfg.dt for k in range(steps)]
        co = clark_ocone_kernels(F, ctx.mu0, t, grid, i, ctx.system, cfg, b.duality_replicas,
                                 seed=derive_stream(ctx.cfg.seed, "duality-clark-ocone"), antithetic=b.antithetic)
        for e in proj:
            lo_t, hi_t = e.times
            inside = [c for c, s in zip(co, grid) if lo_t - 1e-12 <= s < hi_t - 1e-12]
            # the bin average of E[D_s f] uses the same samples for every s, so errors add linearly
            co_val = float(np.mean([c.value for c in inside]))
            co_se = float(np.mean([c.stderr for c in inside]))
            tol = agreement_tolerance(e.stderr, co_se, sigma=b.sigma)
            diff = abs(e.value - co_val)
            ctx.emit(f"malliavin-duality[{d['name']},i={i},bin=[{lo_t:.6g},{hi_t:.6g}]]", diff,
                     params={"projection": e.value, "projection_stderr": e.stderr, "clark_ocone": co_val,
                             "clark_ocone_stderr": co_se, "replicas": b.duality_replicas},
                     stderr=math.hypot(e.stderr, co_se), tolerance=tol, passed=diff <= tol, acceptance=True)


def _kernel_rows(fname, ests):
    rows = []
    for e in ests:
        r = e.as_row()
        r["functional"] = fname
        rows.append(r)
    return rows


def _write_kernels(ctx, order, rows):
    cols = ["functional", "method", "i", "tau1", "tau2", "value", "stderr", "outer_n", "inner_n", "eps", "bias"]
    with open(ctx.path(f"kernels-order{order}.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def _kv_budgets(b):
    return KVBudgets(outer=b.outer, inner=b.inner, middle=b.middle, eps=b.eps, eps_ratio=b.eps_ratio,
                     antithetic=b.antithetic)


def _compare(ctx, test, a, bb, params):
    tol = agreement_tolerance(a.stderr, bb.stderr, a.bias, bb.bias, ctx.b.sigma)
    diff = abs(a.value - bb.value)
    ctx.emit(test, diff, params=params, stderr=math.hypot(a.stderr, bb.stderr), tolerance=tol, passed=diff <= tol,
             acceptance=True)


def _closed_form(ctx, test, e, expected, params):
    tol = agreement_tolerance(e.stderr, 0.0, e.bias, 0.0, ctx.b.sigma)
    diff = abs(e.value - expected)
    ctx.emit(test, e.value, params=dict(params, expected=expected), stderr=e.stderr, tolerance=tol,
             passed=diff <= tol, acceptance=True)


def suite_kv_kernels(ctx: _Context, order: int = 1):
    b, cfg, mu = ctx.b, ctx.solver, ctx.mu0
    t = b.kernel_t
    rows = []
    seed = ctx.cfg.seed
    if order == 1:
        nodes = kernel_nodes(t, b.nodes, cfg.dt)
        for d, F in ctx.functionals:
            name = d["name"]
            for i in ctx.indices():
                kv = [kv_kernel_order1(F, mu, t, float(tau), i, ctx.system, cfg, _kv_budgets(b),
                                       seed=derive_stream(seed, "kv1", name, i)) for tau in nodes]
                pr = projection_regression_order1(F, mu, t, nodes, i, ctx.system, cfg, b.kernel_replicas,
                                                  seed=derive_stream(seed, "projection", name, i),
                                                  antithetic=b.antithetic)
                co = clark_ocone_kernels(F, mu, t, list(nodes), i, ctx.system, cfg, b.kernel_replicas,
                                         seed=derive_stream(seed, "clark-ocone", name, i), antithetic=b.antithetic)
                rows += _kernel_rows(name, kv + pr + co)
                for tau, a, p, c in zip(nodes, kv, pr, co):
                    params = {"t": t, "tau": float(tau), "i": i}
                    lab = f"[{name},i={i},tau={float(tau):.6g}]"
                    _compare(ctx, "kv1-semigroup-vs-projection" + lab, a, p, params)
                    _compare(ctx, "kv1-semigroup-vs-clark-ocone" + lab, a, c, params)
                    _compare(ctx, "kv1-projection-vs-clark-ocone" + lab, p, c, params)
                    if d["kernel1"] is not None:
                        for e in (a, p, c):
                            _closed_form(ctx, f"kv1-closed-form-{e.method}" + lab, e, d["kernel1"], params)
    else:
        nb = b.order2_bins
        for d, F in ctx.functionals:
            name = d["name"]
            for i in ctx.indices():
                pr = projection_kernel_order2(F, mu, t, nb, i, ctx.system, cfg, b.kernel_replicas,
                                              seed=derive_stream(seed, "projection2", name, i),
                                              antithetic=b.antithetic)
                for e in pr:
                    # bin-pair centers, snapped to the grid
                    (a0, a1), (c0, c1) = e.extra["bins"]
                    tau1 = float(np.round(0.5 * (a0 + a1) / cfg.dt) * cfg.dt)
                    tau2 = float(np.round(0.5 * (c0 + c1) / cfg.dt) * cfg.dt)
                    kv = kv_kernel_order2(F, mu, t, tau1, tau2, i, ctx.system, cfg, _kv_budgets(b),
                                          seed=derive_stream(seed, "kv2", name, i, int(round(tau1 / cfg.dt)),
                                                             int(round(tau2 / cfg.dt))))
                    rows += _kernel_rows(name, [kv, e])
                    params = {"t": t, "tau1": tau1, "tau2": tau2, "i": i}
                    lab = f"[{name},i={i},tau=({tau1:.6g},{tau2:.6g})]"
                    _compare(ctx, "kv2-semigroup-vs-projection" + lab, kv, e, params)
                    if d["kernel2"] is not None:
                        for est in (kv, e):
                            _closed_form(ctx, f"kv2-closed-form-{est.method}" + lab, est, d["kernel2"], params)
    _write_kernels(ctx, order, rows)
    ctx.details[f"kv-kernels-order{order}"] = {"rows": len(rows)}


def suite_kv_diagnostics(ctx: _Context):
    b = ctx.b
    report = {}
    for d, F in ctx.functionals:
        name = d["name"]
        per_t = []
        for t in b.diagnostic_times:
            r = truncation_diagnostics(F, ctx.mu0, t, ctx.system, ctx.solver, b.diagnostic_replicas, bins=b.bins,
                                       seed=derive_stream(ctx.cfg.seed, "diagnostics", name))
            per_t.append(r)
            share = r.get("first_order_share")
            ctx.emit(f"first-order-share[{name},t={t:.6g}]", share if share is not None else float("nan"),
                     params={"t": t, "variance": r["variance"], "replicas": b.diagnostic_replicas})
            for key, m in (r.get("mixed") or {}).items():
                ctx.emit(f"mixed-index-projection[{name},t={t:.6g},ij={key}]", m["rms"],
                         params={"max_abs_z": m["max_abs_z"]})
        report[name] = per_t
        shares = {t: r.get("first_order_share") for t, r in zip(b.diagnostic_times, per_t)}
        if b.min_first_order_share is None or any(v is None for v in shares.values()):
            continue
        checked = [t for t in shares if t <= b.share_check_time + 1e-12]
        low = min(shares[t] for t in checked) if checked else float("nan")
        ctx.emit(f"first-order-share-min[{name}]", low, params={"times": checked},
                 tolerance=b.min_first_order_share, passed=bool(checked) and low >= b.min_first_order_share,
                 acceptance=True)
        ts = sorted(shares, reverse=True)
        seq = [shares[t] for t in ts]
        mono = all(s1 > s0 for s0, s1 in zip(seq, seq[1:]))
        ctx.emit(f"first-order-share-monotone[{name}]", float(mono), params={"times": ts, "shares": seq},
                 passed=mono, acceptance=True)
    with open(ctx.path("diagnostics.json"), "w") as fh:
        fh.write(_dumps(report))
    ctx.details["kv-diagnostics"] = {name: [r.get("first_order_share") for r in v] for name, v in report.items()}


def suite_stability(ctx: _Context):
    b, M, mu0 = ctx.b, ctx.M, ctx.mu0
    V = build_field(b.perturbation_field, M) if b.perturbation_field is not None else default_perturbation_field(M)
    u = mu0.points[0]
    ratios = {}
    for size in sorted(set(b.perturbations) | {0.0}, reverse=True):
        nu0, theta = perturbation_for_size(mu0, V, size)
        v = nu0.points[0]
        res = estimate_stability(mu0, nu0, ctx.system, ctx.solver, b.horizon, b.replicas,
                                 derive_stream(ctx.cfg.seed, "stability"), tracked_pair=(u, v))
        params = {"size": size, "initial_w2": res.initial_w2, "theta": theta, "replicas": res.replicas,
                  "diverged": res.diverged, "tracked_ratio": res.tracked_ratio}
        for p in sorted(res.ratio):
            if size == 0:
                ctx.emit(f"stability-zero-numerator[p={p}]", res.numerator[p], params=params, tolerance=0.0,
                         passed=res.numerator[p] == 0.0, acceptance=True)
            else:
                ctx.emit(f"stability-ratio[p={p},size={size:.6g}]", res.ratio[p], params=params,
                         stderr=res.stderr[p], passed=math.isfinite(res.ratio[p]), acceptance=True)
                ratios.setdefault(p, []).append(res.ratio[p])
    for p, vals in ratios.items():
        spread = max(vals) / min(vals) if min(vals) > 0 else float("inf")
        ctx.emit(f"stability-ratio-spread[p={p}]", spread, params={"ratios": vals}, tolerance=b.stability_factor,
                 passed=spread <= b.stability_factor, acceptance=True)
    ctx.details["stability"] = {f"p={p}": v for p, v in ratios.items()}


def suite_convergence(ctx: _Context):
    b = ctx.b
    res = convergence_order(ctx.mu0, ctx.system, derive_stream(ctx.cfg.seed, "convergence"), b.dt_ladder,
                            b.horizon, replicas=b.convergence_replicas, scheme=ctx.solver.scheme)
    exact = max(res.gaps) <= ROUNDOFF
    lo, hi = b.order_range
    ok = exact or (math.isfinite(res.order) and lo <= res.order <= hi)
    ctx.emit("strong-order", res.order if not exact else float("nan"),
             params={"dts": res.dts, "gaps": res.gaps, "exact": exact, "range": [lo, hi]}, passed=ok,
             acceptance=True)
    ctx.details["convergence"] = {"dts": res.dts, "gaps": res.gaps, "order": res.order}


def suite_picard(ctx: _Context):
    b, cfg = ctx.b, ctx.solver
    W = simulate_noise(ctx.system.n_noise, b.horizon, cfg.dt, derive_stream(ctx.cfg.seed, "picard"), 0)
    its = picard_solve(ctx.mu0, ctx.system, W, cfg=cfg, iterations=b.picard_iterations + 1)
    gaps = [sup_w2_gap(x, y) for x, y in zip(its, its[1:])]  # gaps[k-1] = gap between iterates k and k-1
    for k, g in enumerate(gaps, start=1):
        ctx.emit(f"picard-gap[K={k}]", g, params={"T": b.horizon})
    for k in range(2, len(gaps) + 1):
        g0, g1 = gaps[k - 2], gaps[k - 1]
        r = g1 / g0 if g0 > 0 else (0.0 if g1 == 0 else float("inf"))
        ctx.emit(f"picard-ratio[K={k}]", r, tolerance=b.picard_ratio, passed=r < b.picard_ratio or g1 <= ROUNDOFF,
                 acceptance=True)
    direct = solve_interacting_flow(ctx.mu0, ctx.system, W, cfg=cfg)
    gap = sup_w2_gap(its[-1], direct)
    tol = b.picard_match_factor * gaps[-1] + ROUNDOFF
    ctx.emit(f"picard-vs-direct[K={len(gaps)}]", gap, params={"final_gap": gaps[-1]}, tolerance=tol,
             passed=gap <= tol, acceptance=True)
    ctx.details["picard"] = {"gaps": gaps, "direct_gap": gap}


SUITE_FUNCS = {
    "simulate": suite_simulate,
    "check-calculus": suite_check_calculus,
    "kv-kernels": suite_kv_kernels,
    "kv-diagnostics": suite_kv_diagnostics,
    "stability": suite_stability,
    "convergence": suite_convergence,
    "picard": suite_picard,
}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------
def _prepare_out(out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise OutputUnwritable(f"cannot write to {out_dir}: {exc}") from exc


def run_experiment(cfg: ExperimentConfig, out_dir: str = None, suites=None, kv_order: int = 1) -> RunResult:
    """Run the configured suites (or ``suites``) and write the result files.

    The run succeeds iff no acceptance-tagged check fails.  Diverged replicas
    and failed checks become records; only config and output errors raise.
    """
    if not isinstance(cfg, ExperimentConfig):
        raise ConfigInvalid("run_experiment expects a validated ExperimentConfig")
    if kv_order not in (1, 2):
        raise ConfigInvalid("kv order must be 1 or 2")
    suites = list(cfg.suites if suites is None else suites)
    unknown = [s for s in suites if s not in SUITE_FUNCS]
    if unknown:
        raise ConfigInvalid(f"unknown suite(s) {unknown}")
    out_dir = out_dir or cfg.output
    if not out_dir:
        raise ConfigInvalid("no output directory given")
    _prepare_out(out_dir)
    chash = config_hash(cfg)
    try:
        with open(os.path.join(out_dir, "resolved-config.json"), "w") as fh:
            fh.write(_dumps(dict(cfg.to_dict(), config_hash=chash)))
        ctx = _Context(cfg, out_dir, chash)
        for s in suites:
            ctx.suite = s
            try:
                if s == "kv-kernels":
                    suite_kv_kernels(ctx, kv_order)
                else:
                    SUITE_FUNCS[s](ctx)
            except InvalidGrid as exc:
                raise ConfigInvalid(f"{s}: {exc}") from exc
            except KVFlowsError as exc:
                ctx.emit("suite-error", float("nan"), params={"error": type(exc).__name__, "message": str(exc)},
                         passed=False, acceptance=True)
        failed = [r.test for r in ctx.records if r.acceptance and r.passed is False]
        with open(os.path.join(out_dir, "records.csv"), "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=RECORD_COLUMNS)
            wr.writeheader()
            for r in ctx.records:
                wr.writerow(r.row())
        report = {
            "experiment": cfg.name, "config_hash": chash, "seed": cfg.seed, "suites": suites,
            "kv_order": kv_order if "kv-kernels" in suites else None,
            "records": len(ctx.records),
            "checks": sum(r.passed is not None for r in ctx.records),
            "passed": sum(r.passed is True for r in ctx.records),
            "failed": sum(r.passed is False for r in ctx.records),
            "acceptance_failed": failed, "success": not failed,
            "artifacts": ["resolved-config.json", "records.csv", "report.json"] + ctx.artifacts,
            "details": ctx.details,
        }
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(_dumps(report))
        with open(os.path.join(out_dir, "timings.json"), "w") as fh:
            fh.write(_dumps({"records": [{"suite": r.suite, "test": r.test, "wall_time": r.wall_time}
                                         for r in ctx.records],
                             "total": sum(r.wall_time for r in ctx.records)}))
    except OSError as exc:
        raise OutputUnwritable(str(exc)) from exc
    return RunResult(out_dir, chash, ctx.records, report)

"""Experiment configuration: schema validation, defaults and object builders.

A config is one flat JSON document.  Every section is validated before any
computation starts; unknown keys are rejected and all defaults are written
back so that the resolved file fully describes the run.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields as dc_fields

import numpy as np

from .calculus import CompositeFunctional, ExpCurve, LinearFunctional, PairInteractionFunctional, PolynomialCurve
from .errors import ConfigInvalid
from .fields import (AffineMap, AlignmentKernel, FieldSystem, GaussianChordalKernel, KernelField, LinearObservable,
                     MomentField, QuadraticObservable, affine_field, constant_field, coordinate, rotation_field)
from .geometry import EmbeddedManifold
from .measure import CapSampler, EmpiricalMeasure, UniformSampler, sample_iid
from .rng import derive_stream
from .solver import SolverConfig

__all__ = [
    "SUITES",
    "ManifoldSpec",
    "SolverSpec",
    "Budgets",
    "ExperimentConfig",
    "config_from_dict",
    "load_config",
    "build_manifold",
    "build_field",
    "build_system",
    "build_observable",
    "build_functional",
    "build_measure",
    "build_solver",
]

SUITES = ("simulate", "check-calculus", "kv-kernels", "kv-diagnostics", "stability", "convergence", "picard")

_REQUIRED = object()


def _fail(path, msg):
    raise ConfigInvalid(f"{path}: {msg}")


def _take(data, allowed: dict, path: str) -> dict:
    """Reject unknown keys, fill defaults, complain about missing required ones."""
    if not isinstance(data, dict):
        _fail(path, f"expected an object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        _fail(path, f"unknown key(s) {unknown}; allowed: {sorted(allowed)}")
    out = {}
    for k, default in allowed.items():
        if k in data:
            out[k] = data[k]
        elif default is _REQUIRED:
            _fail(path, f"missing required key {k!r}")
        else:
            out[k] = default
    return out


def _num(x, path, positive=False, nonneg=False):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        _fail(path, f"expected a number, got {x!r}")
    x = float(x)
    if not np.isfinite(x):
        _fail(path, "must be finite")
    if positive and x <= 0:
        _fail(path, "must be positive")
    if nonneg and x < 0:
        _fail(path, "must be non-negative")
    return x


def _int(x, path, minimum=None):
    if isinstance(x, bool) or not isinstance(x, int):
        _fail(path, f"expected an integer, got {x!r}")
    if minimum is not None and x < minimum:
        _fail(path, f"must be >= {minimum}")
    return int(x)


def _vec(x, path, n=None):
    try:
        a = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        _fail(path, f"expected a numeric vector, got {x!r}")
    if a.ndim != 1 or (n is not None and a.shape[0] != n) or not np.all(np.isfinite(a)):
        _fail(path, f"expected a finite vector of length {n}")
    return [float(v) for v in a]


def _mat(x, path, shape=None):
    try:
        a = np.asarray(x, dtype=float)
    except (TypeError, ValueError):
        _fail(path, f"expected a numeric matrix, got {x!r}")
    if a.ndim != 2 or (shape is not None and a.shape != shape) or not np.all(np.isfinite(a)):
        _fail(path, f"expected a finite matrix of shape {shape}")
    return [[float(v) for v in row] for row in a]


# ---------------------------------------------------------------------------
# sections with fixed schemas
# ---------------------------------------------------------------------------
@dataclass
class ManifoldSpec:
    kind: str = "sphere"
    dim: int = 2

    def validate(self, path="manifold"):
        if self.kind not in ("euclidean", "sphere", "torus"):
            _fail(path + ".kind", f"unknown manifold {self.kind!r}")
        _int(self.dim, path + ".dim", minimum=1)


@dataclass
class SolverSpec:
    scheme: str = "heun"
    dt: float = 1e-2
    save_stride: int = 1
    renormalize: bool = True

    def validate(self, path="solver"):
        try:
            SolverConfig(self.scheme, _num(self.dt, path + ".dt", positive=True),
                         _int(self.save_stride, path + ".save_stride", 1), bool(self.renormalize))
        except (ValueError, TypeError) as exc:
            _fail(path, str(exc))


@dataclass
class Budgets:
    """Replica counts, time horizons and check thresholds for every suite."""

    horizon: float = 0.5
    replicas: int = 1000
    trajectory_replicas: int = 2
    kernel_t: float = 0.2
    nodes: int = 5
    bins: int = 5
    order2_bins: int = 2
    outer: int = 1000
    inner: int = 16
    middle: int = 4
    eps: float = None
    eps_ratio: float = 0.5
    antithetic: bool = True
    kernel_replicas: int = 10000
    noise_indices: list = None
    sigma: float = 3.0
    diagnostic_times: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    diagnostic_replicas: int = 20000
    min_first_order_share: float = 0.8
    share_check_time: float = 0.1
    picard_iterations: int = 8
    picard_ratio: float = 0.8
    picard_match_factor: float = 3.0
    dt_ladder: list = field(default_factory=lambda: [0.02, 0.01, 0.005, 0.0025])
    convergence_replicas: int = 16
    order_range: list = field(default_factory=lambda: [0.45, 1.1])
    perturbations: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    perturbation_field: dict = None
    stability_factor: float = 2.0
    calculus_configs: int = 50
    calculus_particles: int = 6
    eps_ladder: list = field(default_factory=lambda: [1e-2, 5e-3, 2.5e-3, 1.25e-3])
    min_slope: float = 1.8
    max_rel_error: float = 1e-4
    ito_ladder: list = field(default_factory=lambda: [4e-3, 2e-3, 1e-3])
    ito_horizon: float = 0.2
    ito_replicas: int = 64
    ito_tolerance: float = 0.3
    duality_replicas: int = 10000
    duality_bins: int = 4

    def validate(self, path="budgets"):
        for name in ("horizon", "kernel_t", "eps_ratio", "sigma", "picard_ratio", "picard_match_factor",
                     "stability_factor", "min_slope", "max_rel_error", "ito_horizon", "ito_tolerance",
                     "share_check_time"):
            _num(getattr(self, name), f"{path}.{name}", positive=True)
        if self.min_first_order_share is not None:
            _num(self.min_first_order_share, f"{path}.min_first_order_share", nonneg=True)
        for name in ("replicas", "kernel_replicas", "diagnostic_replicas", "duality_replicas"):
            _int(getattr(self, name), f"{path}.{name}", minimum=2)
        for name in ("outer", "inner", "middle", "nodes", "bins", "order2_bins", "picard_iterations",
                     "convergence_replicas", "calculus_configs", "calculus_particles", "ito_replicas",
                     "duality_bins"):
            _int(getattr(self, name), f"{path}.{name}", minimum=1)
        _int(self.trajectory_replicas, f"{path}.trajectory_replicas", minimum=0)
        if self.picard_iterations < 2:
            _fail(f"{path}.picard_iterations", "must be >= 2")
        if self.eps is not None:
            _num(self.eps, f"{path}.eps", positive=True)
        if self.noise_indices is not None:
            self.noise_indices = [_int(i, f"{path}.noise_indices", minimum=1) for i in self.noise_indices]
        for name in ("diagnostic_times", "dt_ladder", "eps_ladder", "ito_ladder"):
            v = _vec(getattr(self, name), f"{path}.{name}")
            if not v or min(v) <= 0:
                _fail(f"{path}.{name}", "must be a non-empty list of positive numbers")
        self.perturbations = [_num(v, f"{path}.perturbations", nonneg=True) for v in self.perturbations]
        if len(_vec(self.order_range, f"{path}.order_range")) != 2:
            _fail(f"{path}.order_range", "expected [low, high]")


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    manifold: ManifoldSpec
    fields: dict
    initial_measure: dict
    functionals: list
    solver: SolverSpec
    budgets: Budgets
    suites: list
    output: str = None

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, seed=None, replicas=None, output=None, suites=None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if replicas is not None:
            d["budgets"]["replicas"] = replicas
        if output is not None:
            d["output"] = output
        if suites is not None:
            d["suites"] = list(suites)
        return config_from_dict(d)


# ---------------------------------------------------------------------------
# polymorphic specs (dicts validated per kind)
# ---------------------------------------------------------------------------
_KERNEL_KEYS = {
    "alignment": {"kind": _REQUIRED, "kappa": 1.0},
    "gaussian": {"kind": _REQUIRED, "kappa": 1.0, "sigma": 1.0},
}
_OBSERVABLE_KEYS = {
    "linear": {"kind": _REQUIRED, "a": _REQUIRED, "b": 0.0},
    "coordinate": {"kind": _REQUIRED, "index": _REQUIRED},
    "quadratic": {"kind": _REQUIRED, "Q": _REQUIRED, "a": None, "c": 0.0},
}
_CURVE_KEYS = {
    "exp": {"kind": _REQUIRED, "rate": 1.0},
    "polynomial": {"kind": _REQUIRED, "coeffs": _REQUIRED},
}
_FIELD_KEYS = {
    "zero": {"kind": _REQUIRED},
    "constant": {"kind": _REQUIRED, "vector": _REQUIRED, "scale": 1.0},
    "rotation": {"kind": _REQUIRED, "axis": [0.0, 0.0, 1.0], "scale": 1.0},
    "affine": {"kind": _REQUIRED, "matrix": _REQUIRED, "offset": None, "scale": 1.0},
    "kernel": {"kind": _REQUIRED, "kernel": _REQUIRED, "order": 1, "scale": 1.0},
    "moment": {"kind": _REQUIRED, "A": None, "B": None, "c": None, "observables": [], "scale": 1.0},
}
_FUNCTIONAL_KEYS = {
    "linear": {"name": _REQUIRED, "kind": _REQUIRED, "observable": _REQUIRED, "kernel1": None, "kernel2": None},
    "composite": {"name": _REQUIRED, "kind": _REQUIRED, "curve": _REQUIRED, "observable": _REQUIRED,
                  "kernel1": None, "kernel2": None},
    "pair": {"name": _REQUIRED, "kind": _REQUIRED, "kernel": _REQUIRED, "kernel1": None, "kernel2": None},
}
_MEASURE_KEYS = {
    "cap": {"kind": _REQUIRED, "particles": 100, "center": None, "spread": 0.8},
    "uniform": {"kind": _REQUIRED, "particles": 100},
    "points": {"kind": _REQUIRED, "points": _REQUIRED, "weights": None},
}


def _kind(data, table, path):
    if not isinstance(data, dict) or "kind" not in data:
        _fail(path, "expected an object with a 'kind'")
    if data["kind"] not in table:
        _fail(path + ".kind", f"unknown kind {data['kind']!r}; allowed: {sorted(table)}")
    return _take(data, table[data["kind"]], path)


def _resolve_kernel(data, path):
    d = _kind(data, _KERNEL_KEYS, path)
    d["kappa"] = _num(d["kappa"], path + ".kappa")
    if "sigma" in d:
        d["sigma"] = _num(d["sigma"], path + ".sigma", positive=True)
    return d


def _resolve_observable(data, N, path):
    d = _kind(data, _OBSERVABLE_KEYS, path)
    if d["kind"] == "linear":
        d["a"] = _vec(d["a"], path + ".a", N)
        d["b"] = _num(d["b"], path + ".b")
    elif d["kind"] == "coordinate":
        d["index"] = _int(d["index"], path + ".index", 0)
        if d["index"] >= N:
            _fail(path + ".index", f"must be < {N}")
    else:
        d["Q"] = _mat(d["Q"], path + ".Q", (N, N))
        d["a"] = None if d["a"] is None else _vec(d["a"], path + ".a", N)
        d["c"] = _num(d["c"], path + ".c")
    return d


def _resolve_field(data, N, path):
    d = _kind(data, _FIELD_KEYS, path)
    if "scale" in d:
        d["scale"] = _num(d["scale"], path + ".scale")
    k = d["kind"]
    if k == "constant":
        d["vector"] = _vec(d["vector"], path + ".vector", N)
    elif k == "rotation":
        if N != 3:
            _fail(path, "rotation fields need a 3-dimensional ambient space")
        d["axis"] = _vec(d["axis"], path + ".axis", 3)
    elif k == "affine":
        d["matrix"] = _mat(d["matrix"], path + ".matrix", (N, N))
        d["offset"] = None if d["offset"] is None else _vec(d["offset"], path + ".offset", N)
    elif k == "kernel":
        d["kernel"] = _resolve_kernel(d["kernel"], path + ".kernel")
        d["order"] = _int(d["order"], path + ".order", 1)
    elif k == "moment":
        obs = [_resolve_observable(o, N, f"{path}.observables[{j}]") for j, o in enumerate(d["observables"])]
        d["observables"] = obs
        K = len(obs)
        d["A"] = None if d["A"] is None else _mat(d["A"], path + ".A", (N, N))
        d["B"] = None if d["B"] is None else _mat(d["B"], path + ".B", (N, K))
        d["c"] = None if d["c"] is None else _vec(d["c"], path + ".c", N)
    return d


def _resolve_functional(data, N, path):
    d = _kind(data, _FUNCTIONAL_KEYS, path)
    if not isinstance(d["name"], str) or not d["name"]:
        _fail(path + ".name", "must be a non-empty string")
    if "observable" in d:
        d["observable"] = _resolve_observable(d["observable"], N, path + ".observable")
    if d["kind"] == "composite":
        c = _kind(d["curve"], _CURVE_KEYS, path + ".curve")
        if c["kind"] == "exp":
            c["rate"] = _num(c["rate"], path + ".curve.rate")
        else:
            c["coeffs"] = _vec(c["coeffs"], path + ".curve.coeffs")
        d["curve"] = c
    if d["kind"] == "pair":
        d["kernel"] = _resolve_kernel(d["kernel"], path + ".kernel")
    for key in ("kernel1", "kernel2"):
        if d[key] is not None:
            d[key] = _num(d[key], f"{path}.{key}")
    return d


def _resolve_measure(data, N, path):
    d = _kind(data, _MEASURE_KEYS, path)
    if d["kind"] in ("cap", "uniform"):
        d["particles"] = _int(d["particles"], path + ".particles", 1)
    if d["kind"] == "cap":
        d["center"] = None if d["center"] is None else _vec(d["center"], path + ".center", N)
        d["spread"] = _num(d["spread"], path + ".spread", nonneg=True)
    if d["kind"] == "points":
        pts = np.asarray(d["points"], dtype=float)
        if pts.ndim != 2 or pts.shape[1] != N or pts.shape[0] == 0:
            _fail(path + ".points", f"expected a non-empty list of {N}-vectors")
        d["points"] = _mat(d["points"], path + ".points")
        if d["weights"] is not None:
            d["weights"] = _vec(d["weights"], path + ".weights", pts.shape[0])
    return d


def _section(cls, data, path):
    allowed = {f.name: _REQUIRED for f in dc_fields(cls)}
    defaults = asdict(cls())
    allowed.update(defaults)
    return cls(**_take(data if data is not None else {}, allowed, path))


def config_from_dict(data: dict) -> ExperimentConfig:
    """Validate a config document and return it with every default filled in."""
    top = _take(data, {"name": "experiment", "seed": 0, "manifold": {}, "fields": {}, "initial_measure": _REQUIRED,
                       "functionals": [], "solver": {}, "budgets": {}, "suites": [], "output": None}, "config")
    if not isinstance(top["name"], str):
        _fail("config.name", "must be a string")
    seed = _int(top["seed"], "config.seed", 0)
    man = _section(ManifoldSpec, top["manifold"], "manifold")
    man.validate()
    N = build_manifold(man).ambient_dim
    fl = _take(top["fields"], {"drift": None, "diffusion": []}, "fields")
    fl["drift"] = None if fl["drift"] is None else _resolve_field(fl["drift"], N, "fields.drift")
    if not isinstance(fl["diffusion"], list):
        _fail("fields.diffusion", "expected a list")
    fl["diffusion"] = [_resolve_field(f, N, f"fields.diffusion[{j}]") for j, f in enumerate(fl["diffusion"])]
    meas = _resolve_measure(top["initial_measure"], N, "initial_measure")
    if meas["kind"] == "uniform" and man.kind == "euclidean":
        _fail("initial_measure.kind", "no uniform distribution on a Euclidean space")
    if not isinstance(top["functionals"], list):
        _fail("functionals", "expected a list")
    funcs = [_resolve_functional(f, N, f"functionals[{j}]") for j, f in enumerate(top["functionals"])]
    names = [f["name"] for f in funcs]
    if len(set(names)) != len(names):
        _fail("functionals", "names must be unique")
    solver = _section(SolverSpec, top["solver"], "solver")
    solver.validate()
    budgets = _section(Budgets, top["budgets"], "budgets")
    budgets.validate()
    if budgets.perturbation_field is not None:
        budgets.perturbation_field = _resolve_field(budgets.perturbation_field, N, "budgets.perturbation_field")
    n_noise = len(fl["diffusion"])
    if budgets.noise_indices is not None and any(i > n_noise for i in budgets.noise_indices):
        _fail("budgets.noise_indices", f"indices must be <= {n_noise}")
    suites = top["suites"]
    if not isinstance(suites, list) or any(s not in SUITES for s in suites):
        _fail("suites", f"expected a list drawn from {list(SUITES)}")
    out = top["output"]
    if out is not None and not isinstance(out, str):
        _fail("output", "must be a path string")
    return ExperimentConfig(top["name"], seed, man, fl, meas, funcs, solver, budgets, list(suites), out)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------
def build_manifold(spec: ManifoldSpec) -> EmbeddedManifold:
    return EmbeddedManifold(spec.kind, spec.dim)


def _kernel(d):
    if d["kind"] == "alignment":
        return AlignmentKernel(d["kappa"])
    return GaussianChordalKernel(d["kappa"], d["sigma"])


def _tup(m):
    return None if m is None else tuple(map(tuple, m)) if np.ndim(m) == 2 else tuple(m)


def build_observable(d, N):
    if d["kind"] == "linear":
        return LinearObservable(tuple(d["a"]), d["b"])
    if d["kind"] == "coordinate":
        return coordinate(d["index"], N)
    return QuadraticObservable(_tup(d["Q"]), _tup(d["a"]), d["c"])


def build_field(d, M: EmbeddedManifold):
    k = d["kind"]
    N = M.ambient_dim
    if k == "zero":
        return constant_field(M, np.zeros(N))
    if k == "constant":
        V = constant_field(M, np.asarray(d["vector"]))
    elif k == "rotation":
        return rotation_field(M, tuple(d["axis"]), d["scale"])
    elif k == "affine":
        V = affine_field(M, np.asarray(d["matrix"]), None if d["offset"] is None else np.asarray(d["offset"]))
    elif k == "kernel":
        V = KernelField(M, _kernel(d["kernel"]), d["order"])
    else:
        obs = tuple(build_observable(o, N) for o in d["observables"])
        V = MomentField(M, AffineMap(_tup(d["A"]), _tup(d["B"]), _tup(d["c"])), obs)
    return V if d["scale"] == 1.0 else V.with_scale(d["scale"])


def build_system(cfg: ExperimentConfig) -> FieldSystem:
    M = build_manifold(cfg.manifold)
    drift = None if cfg.fields["drift"] is None else build_field(cfg.fields["drift"], M)
    return FieldSystem(M, drift, tuple(build_field(f, M) for f in cfg.fields["diffusion"]))


def build_functional(d, M: EmbeddedManifold):
    N = M.ambient_dim
    if d["kind"] == "linear":
        return LinearFunctional(build_observable(d["observable"], N))
    if d["kind"] == "composite":
        c = d["curve"]
        curve = ExpCurve(c["rate"]) if c["kind"] == "exp" else PolynomialCurve(tuple(c["coeffs"]))
        return CompositeFunctional(curve, build_observable(d["observable"], N))
    return PairInteractionFunctional(_kernel(d["kernel"]))


def build_measure(d, M: EmbeddedManifold, seed: int) -> EmpiricalMeasure:
    """Initial measure; random samplers draw from the ``initial-measure`` stream of ``seed``."""
    if d["kind"] == "points":
        pts = np.asarray(d["points"], dtype=float)
        if not M.contains(pts):
            raise ConfigInvalid("initial_measure.points: points must lie on the manifold")
        if d["weights"] is None:
            return EmpiricalMeasure.uniform(M, pts)
        return EmpiricalMeasure(M, pts, np.asarray(d["weights"], dtype=float))
    rng = np.random.default_rng(derive_stream(seed, "initial-measure"))
    if d["kind"] == "uniform":
        return sample_iid(UniformSampler(M), d["particles"], rng)
    center = d["center"]
    if center is None:
        e = np.tile([1.0, 0.0], M.intrinsic_dim) if M.kind == "torus" else np.eye(M.ambient_dim)[0]
        center = M.project_to_manifold(e)
    return sample_iid(CapSampler(M, tuple(center), d["spread"]), d["particles"], rng)


def build_solver(spec: SolverSpec) -> SolverConfig:
    return SolverConfig(spec.scheme, spec.dt, spec.save_stride, spec.renormalize)

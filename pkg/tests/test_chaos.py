import numpy as np
import pytest

from kvflows.calculus import CompositeFunctional, ExpCurve, LinearFunctional
from kvflows.chaos import (
    KVBudgets,
    SemigroupFunctional,
    apply_A,
    clark_ocone_kernel,
    clark_ocone_kernels,
    disable_noise,
    estimate_semigroup,
    estimate_semigroup_nested,
    kernel_nodes,
    kv_kernel_order1,
    kv_kernel_order2,
    projection_kernel_order1,
    projection_kernel_order2,
    projection_regression_order1,
    truncation_diagnostics,
)
from kvflows.errors import BudgetExhausted, InvalidGrid
from kvflows.fields import FieldSystem, LinearObservable, QuadraticObservable, constant_field, coordinate
from kvflows.geometry import Sphere
from kvflows.models import additive_gaussian, alignment_sphere
from kvflows.solver import SolverConfig

S2 = Sphere(2)
ADD = additive_gaussian(dt=0.01)
X1 = LinearFunctional(coordinate(0, 1))
X2 = LinearFunctional(QuadraticObservable(((1.0,),)))
CONST = LinearFunctional(LinearObservable((0.0,), 2.5))


def within(est, target, sigma=3.0, extra=0.0):
    return abs(est.value - target) <= sigma * est.stderr + abs(getattr(est, "bias", 0.0)) + extra + 1e-12


def zero_noise(model):
    M = model.manifold
    return FieldSystem(M, model.system.drift, (constant_field(M, np.zeros(M.ambient_dim)),) * model.system.n_noise)


def small_alignment():
    return alignment_sphere(particles=6, seed=2, dt=0.02)


# -- semigroup ----------------------------------------------------------------
def test_semigroup_trivial():
    m = small_alignment()
    F = LinearFunctional(coordinate(1, 3))
    e = estimate_semigroup(F, m.mu0, 0.0, m.system, m.cfg, replicas=10)
    assert e.value == F(m.mu0) and e.stderr == 0.0
    z = estimate_semigroup(F, m.mu0, 0.2, zero_noise(m).with_drift(None), m.cfg, replicas=10)
    assert z.value == F(m.mu0)
    with pytest.raises(ValueError):
        estimate_semigroup(F, m.mu0, 0.2, m.system, m.cfg, replicas=1)


def test_semigroup_additive_second_moment():
    e = estimate_semigroup(X2, ADD.mu0, 0.5, ADD.system, ADD.cfg, replicas=20_000, seed=1)
    assert within(e, 0.5)
    # antithetic pairing makes the odd moment exact
    assert estimate_semigroup(X1, ADD.mu0, 0.5, ADD.system, ADD.cfg, replicas=200, seed=1).value == 0.0


def test_semigroup_deterministic_in_seed():
    m = small_alignment()
    F = LinearFunctional(coordinate(1, 3))
    a = estimate_semigroup(F, m.mu0, 0.2, m.system, m.cfg, replicas=64, seed=3)
    b = estimate_semigroup(F, m.mu0, 0.2, m.system, m.cfg, replicas=64, seed=3)
    assert a.value == b.value and a.stderr == b.stderr


def test_semigroup_markov_property():
    m = small_alignment()
    F = CompositeFunctional(ExpCurve(1.0), coordinate(1, 3))
    direct = estimate_semigroup(F, m.mu0, 0.2, m.system, m.cfg, replicas=4000, seed=5)
    nested = estimate_semigroup_nested(F, m.mu0, 0.1, 0.1, m.system, m.cfg, outer=1000, inner=4, seed=6)
    assert abs(direct.value - nested.value) <= 3 * np.hypot(direct.stderr, nested.stderr)


# -- A_i ----------------------------------------------------------------------
def test_apply_A_zero_field():
    m = small_alignment()
    F = LinearFunctional(coordinate(1, 3))
    r = apply_A(1, F, m.mu0, zero_noise(m))
    assert r.fd == 0.0 and r.analytic == 0.0


def test_apply_A_eps_ladder():
    m = small_alignment()
    F = CompositeFunctional(ExpCurve(2.0), coordinate(1, 3))
    errs = [abs(apply_A(2, F, m.mu0, m.system, eps).fd - apply_A(2, F, m.mu0, m.system, eps).analytic)
            for eps in (4e-2, 2e-2, 1e-2)]
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes > 1.8)


def test_apply_A_constant_semigroup_estimator():
    m = small_alignment()
    g = SemigroupFunctional(LinearFunctional(LinearObservable((0.0, 0.0, 0.0), 1.0)), 0.1, m.system, m.cfg, 32, 1)
    r = apply_A(1, g, m.mu0, m.system)
    assert r.fd == 0.0


# -- first-order kernels --------------------------------------------------------
def test_kv1_endpoints():
    m = small_alignment()
    F = LinearFunctional(coordinate(1, 3))
    V1 = m.system.diffusion[0]
    exact = float(np.sum(m.mu0.weights * np.sum(S2.project_to_tangent(m.mu0.points, np.array([0, 1.0, 0]))
                                                   * V1.evaluate(m.mu0.points, m.mu0.points, m.mu0.weights), axis=1)))
    e0 = kv_kernel_order1(F, m.mu0, 0.0, 0.0, 1, m.system, m.cfg, KVBudgets(outer=4, inner=2))
    assert e0.value == pytest.approx(exact, abs=1e-15) and e0.stderr == 0.0
    # tau = t: the outer average of the analytic A_i f at mu_t
    et = kv_kernel_order1(F, m.mu0, 0.1, 0.1, 1, m.system, m.cfg, KVBudgets(outer=500, inner=2), seed=2)
    assert et.bias == 0.0 and et.inner_n == 0
    co = clark_ocone_kernel(F, m.mu0, 0.1, 0.1, 1, m.system, m.cfg, replicas=2000, seed=3)
    assert abs(et.value - co.value) <= 3 * np.hypot(et.stderr, co.stderr)


def test_kv1_zero_field():
    m = small_alignment()
    e = kv_kernel_order1(LinearFunctional(coordinate(1, 3)), m.mu0, 0.1, 0.04, 1, zero_noise(m), m.cfg,
                         KVBudgets(outer=20, inner=2))
    assert e.value == 0.0


@pytest.mark.parametrize("tau", [0.0, 0.2, 0.5])
def test_kv1_additive_closed_forms(tau):
    b = KVBudgets(outer=400, inner=8)
    # d/dx of x is 1 along every path; common noise makes the difference exact
    e1 = kv_kernel_order1(X1, ADD.mu0, 0.5, tau, 1, ADD.system, ADD.cfg, b, seed=1)
    assert e1.value == pytest.approx(1.0, abs=1e-12)
    # kernel of x^2 is E[2 x_tau] = 0; check calibration over independent seeds
    est = [kv_kernel_order1(X2, ADD.mu0, 0.5, tau, 1, ADD.system, ADD.cfg, b, seed=s) for s in range(20)]
    vals = np.array([e.value for e in est])
    if tau == 0.0:
        assert np.all(np.abs(vals) < 1e-12)
        return
    zs = vals / np.array([e.stderr for e in est])
    assert abs(zs.mean()) * np.sqrt(len(zs)) < 3.0
    assert 0.6 < zs.std(ddof=1) < 1.5


def test_kv1_rejects_bad_tau_and_budget():
    with pytest.raises(InvalidGrid):
        kv_kernel_order1(X1, ADD.mu0, 0.5, 0.6, 1, ADD.system, ADD.cfg)
    with pytest.raises(BudgetExhausted):
        kv_kernel_order1(X1, ADD.mu0, 0.5, 0.2, 1, ADD.system, ADD.cfg, KVBudgets(outer=10**6, inner=10**4))


def test_projection_order1_examples():
    bins = 5
    zero = projection_kernel_order1(X1, ADD.mu0, 0.5, bins, 1, zero_noise(ADD), ADD.cfg, replicas=100)
    assert all(e.value == 0.0 for e in zero)
    const = projection_kernel_order1(CONST, ADD.mu0, 0.5, bins, 1, ADD.system, ADD.cfg, replicas=1000)
    assert all(within(e, 0.0) for e in const)
    lin = projection_kernel_order1(X1, ADD.mu0, 0.5, bins, 1, ADD.system, ADD.cfg, replicas=100_000, seed=4)
    assert all(within(e, 1.0) for e in lin)
    assert [e.times for e in lin] == [(0.0, 0.1), (0.1, 0.2), (0.2, 0.3), (0.30000000000000004, 0.4), (0.4, 0.5)] or \
        np.allclose([e.times for e in lin], [(0.1 * k, 0.1 * (k + 1)) for k in range(5)])


def test_projection_orthogonal_to_disabled_noise():
    m = small_alignment()
    F = CompositeFunctional(ExpCurve(2.0), coordinate(1, 3))
    system = disable_noise(m.system, 1)
    est = projection_kernel_order1(F, m.mu0, 0.2, 4, 2, system, m.cfg, replicas=4000, seed=7)
    assert all(within(e, 0.0) for e in est)
    co = clark_ocone_kernel(F, m.mu0, 0.2, 0.1, 2, system, m.cfg, replicas=100)
    assert co.value == 0.0


def test_clark_ocone_examples():
    assert clark_ocone_kernel(X1, ADD.mu0, 0.5, 0.7, 1, ADD.system, ADD.cfg, replicas=10).value == 0.0
    e = clark_ocone_kernel(X1, ADD.mu0, 0.5, 0.2, 1, ADD.system, ADD.cfg, replicas=100)
    assert e.value == pytest.approx(1.0, abs=1e-12)
    z = clark_ocone_kernel(X1, ADD.mu0, 0.5, 0.2, 1, zero_noise(ADD), ADD.cfg, replicas=100)
    assert z.value == 0.0


def test_three_way_agreement_alignment():
    m = small_alignment()
    F = CompositeFunctional(ExpCurve(2.0), coordinate(1, 3))
    t = 0.2
    nodes = kernel_nodes(t, 4, m.cfg.dt)
    assert nodes[0] == 0.0 and nodes[-1] == pytest.approx(t)
    for i in (1, 2):
        co = clark_ocone_kernels(F, m.mu0, t, nodes, i, m.system, m.cfg, replicas=8000, seed=11)
        reg = projection_regression_order1(F, m.mu0, t, nodes, i, m.system, m.cfg, replicas=20000, seed=12, degree=2)
        for tau, c, r in zip(nodes, co, reg):
            kv = kv_kernel_order1(F, m.mu0, t, tau, i, m.system, m.cfg, KVBudgets(outer=800, inner=8), seed=13)
            sig = lambda a, b: 3 * np.hypot(a.stderr, b.stderr) + abs(a.bias) + abs(b.bias) + 0.02 * abs(c.value)  # noqa: E731
            assert abs(kv.value - c.value) <= sig(kv, c)
            assert abs(r.value - c.value) <= sig(r, c)


def test_increment_mode_matches_projection_exactly_in_expectation():
    m = small_alignment()
    F = CompositeFunctional(ExpCurve(2.0), coordinate(1, 3))
    t, dt = 0.2, m.cfg.dt
    proj = projection_kernel_order1(F, m.mu0, t, 10, 1, m.system, m.cfg, replicas=20000, seed=21)
    mids = [e.times[0] for e in proj]
    co = clark_ocone_kernels(F, m.mu0, t, mids, 1, m.system, m.cfg, replicas=4000, seed=22, mode="increment")
    z = [(p.value - c.value) / np.hypot(p.stderr, c.stderr) for p, c in zip(proj, co)]
    assert np.max(np.abs(z)) < 3.5
    assert abs(np.mean(z)) * np.sqrt(len(z)) < 3.0


# -- second-order kernels --------------------------------------------------------
def test_kv2_examples():
    b = KVBudgets(outer=300, inner=4, middle=4)
    m = small_alignment()
    z = kv_kernel_order2(LinearFunctional(coordinate(1, 3)), m.mu0, 0.1, 0.02, 0.06, 1, zero_noise(m), m.cfg,
                         KVBudgets(outer=10, inner=2, middle=2))
    assert z.value == 0.0
    e1 = kv_kernel_order2(X1, ADD.mu0, 0.5, 0.1, 0.3, 1, ADD.system, ADD.cfg, b, seed=1)
    assert within(e1, 0.0, extra=1e-6)
    e2 = kv_kernel_order2(X2, ADD.mu0, 0.5, 0.1, 0.3, 1, ADD.system, ADD.cfg, b, seed=2)
    assert within(e2, 2.0, extra=1e-6)
    with pytest.raises(InvalidGrid):
        kv_kernel_order2(X2, ADD.mu0, 0.5, 0.3, 0.1, 1, ADD.system, ADD.cfg, b)


def test_projection_order2_closed_forms():
    p1 = projection_kernel_order2(X1, ADD.mu0, 0.5, 3, 1, ADD.system, ADD.cfg, replicas=50_000, seed=5)
    p2 = projection_kernel_order2(X2, ADD.mu0, 0.5, 3, 1, ADD.system, ADD.cfg, replicas=50_000, seed=6)
    assert len(p1) == 3
    assert all(within(e, 0.0) for e in p1)
    assert all(within(e, 2.0) for e in p2)


# -- diagnostics -----------------------------------------------------------------
def test_diagnostics_zero_diffusion():
    rep = truncation_diagnostics(X1, ADD.mu0, 0.5, zero_noise(ADD), ADD.cfg, replicas=100, bins=5)
    assert rep["variance"] == 0.0 and rep["first_order_total"] == 0.0


def test_diagnostics_additive_full_first_order():
    rep = truncation_diagnostics(X1, ADD.mu0, 0.5, ADD.system, ADD.cfg, replicas=20000, bins=5, seed=3)
    # x_t = B_t lives entirely in the first chaos
    var_se = rep["variance"] * np.sqrt(2 / 20000)
    assert abs(rep["first_order_share"] - 1.0) <= 3 * var_se / rep["variance"] + 0.03


def test_diagnostics_mean_equals_semigroup():
    m = small_alignment()
    F = CompositeFunctional(ExpCurve(2.0), coordinate(1, 3))
    rep = truncation_diagnostics(F, m.mu0, 0.1, m.system, m.cfg, replicas=400, bins=5, seed=9)
    sg = estimate_semigroup(F, m.mu0, 0.1, m.system, m.cfg, replicas=400, seed=9)
    assert rep["mean"] == sg.value
    assert set(rep["mixed"]) == {"1,2", "2,1"}


def test_kernel_nodes_on_grid():
    nodes = kernel_nodes(0.5, 5, 0.01)
    assert nodes[0] == 0.0 and nodes[-1] == pytest.approx(0.5)
    assert np.allclose(np.round(nodes / 0.01) * 0.01, nodes)
    assert np.all(np.diff(nodes) > 0)

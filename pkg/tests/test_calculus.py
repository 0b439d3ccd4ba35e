import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvflows.calculus import (
    CompositeFunctional,
    ExpCurve,
    FlowPath,
    LinearFunctional,
    PairInteractionFunctional,
    PolynomialCurve,
    RotationPath,
    StationaryPath,
    TranslationPath,
    analytic_directional,
    analytic_double_directional,
    analytic_intrinsic_derivative,
    chain_rule_residual,
    empirical_gradient_identity,
    fd_intrinsic_directional,
    ito_formula_residual,
    malliavin_flow,
    malliavin_functional,
    malliavin_functional_arrays,
    perturb_measure,
    second_intrinsic_derivative,
    variational_flow,
)
from kvflows.errors import MissingAuxiliary, UnsupportedOrder
from kvflows.fields import (
    AlignmentKernel,
    FieldSystem,
    GaussianChordalKernel,
    KernelField,
    LinearObservable,
    QuadraticObservable,
    affine_field,
    constant_field,
    coordinate,
    rotation_field,
    skew,
)
from kvflows.geometry import Euclidean, FlatTorus, Sphere
from kvflows.measure import EmpiricalMeasure
from kvflows.models import additive_gaussian, alignment_sphere
from kvflows.solver import (
    NoisePath,
    SolverConfig,
    integrate_batch,
    malliavin_inject,
    noise_batch,
    simulate_noise,
    solve_interacting_flow,
)

S2 = Sphere(2)


def random_measure(M, n, seed):
    r = np.random.default_rng(seed)
    w = r.random(n) + 0.2
    return EmpiricalMeasure(M, M.sample_uniform(n, r), w / w.sum())


def functionals():
    quad = QuadraticObservable(((1.0, 0.2, 0.0), (0.2, -0.5, 0.3), (0.0, 0.3, 0.4)), (0.1, 0.0, -0.2))
    return {
        "linear": LinearFunctional(LinearObservable((0.3, -1.0, 0.7))),
        "linear-quadratic": LinearFunctional(quad),
        "composite-exp": CompositeFunctional(ExpCurve(1.5), coordinate(1, 3)),
        "composite-poly": CompositeFunctional(PolynomialCurve((0.0, 1.0, -2.0, 0.5)), quad),
        "pair-alignment": PairInteractionFunctional(AlignmentKernel(1.0)),
        "pair-gaussian": PairInteractionFunctional(GaussianChordalKernel(1.0, 0.6)),
    }


FUNCTIONALS = functionals()
DIRECTIONS = {
    "rotation": rotation_field(S2, (0.2, 1.0, -0.5)),
    "affine": affine_field(S2, [[0.3, -1.0, 0.5], [1.2, 0.1, -0.4], [0.2, 0.9, -0.6]], [0.5, 0.0, -0.3]),
    "interacting": KernelField(S2, GaussianChordalKernel(1.0, 0.7)),
}


def test_analytic_examples():
    mu = random_measure(S2, 5, 0)
    const = LinearFunctional(LinearObservable((0.0, 0.0, 0.0), 3.0))
    assert np.array_equal(analytic_intrinsic_derivative(const, mu)(mu.points), np.zeros((5, 3)))
    E1 = Euclidean(1)
    F = LinearFunctional(QuadraticObservable(((1.0,),)))
    mu1 = EmpiricalMeasure.uniform(E1, [[0.5], [-1.0]])
    np.testing.assert_allclose(analytic_intrinsic_derivative(F, mu1)([[0.3], [2.0]]), [[0.6], [4.0]])


def test_composite_derivative_formula():
    mu = random_measure(S2, 6, 1)
    F = FUNCTIONALS["composite-exp"]
    m = mu.integrate(coordinate(1, 3).value)
    x = mu.points[2]
    expected = 1.5 * np.exp(1.5 * m) * S2.project_to_tangent(x, np.array([0.0, 1.0, 0.0]))
    np.testing.assert_allclose(analytic_intrinsic_derivative(F, mu)(x), expected, atol=1e-14)


@pytest.mark.parametrize("fname", sorted(FUNCTIONALS))
@pytest.mark.parametrize("dname", sorted(DIRECTIONS))
def test_directional_fd_slope(fname, dname):
    F, V = FUNCTIONALS[fname], DIRECTIONS[dname]
    mu = random_measure(S2, 7, 2)
    exact = analytic_directional(F, mu, V)
    errs = [abs(fd_intrinsic_directional(F, mu, V, eps) - exact) for eps in (4e-2, 2e-2, 1e-2, 5e-3)]
    if max(errs) > 1e-12:  # rotations leave pair functionals invariant: exact zero
        slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.median(slopes) >= 1.8
    fine = fd_intrinsic_directional(F, mu, V, 1e-3)
    assert abs(fine - exact) <= 1e-4 * max(abs(exact), 1e-2)


def test_fd_trivial_cases():
    mu = random_measure(S2, 4, 3)
    const = LinearFunctional(LinearObservable((0.0, 0.0, 0.0), 2.0))
    assert fd_intrinsic_directional(const, mu, DIRECTIONS["rotation"], 1e-3) == 0.0
    zero = constant_field(S2, [0.0, 0.0, 0.0])
    assert fd_intrinsic_directional(FUNCTIONALS["composite-exp"], mu, zero, 1e-3) == 0.0


def test_perturb_measure_examples():
    mu = random_measure(S2, 6, 4)
    assert perturb_measure(mu, DIRECTIONS["rotation"], 0.0) is mu
    zero = constant_field(S2, [0.0, 0.0, 0.0])
    assert np.array_equal(perturb_measure(mu, zero, 0.3).points, mu.points)
    V = rotation_field(S2)
    out = perturb_measure(mu, V, np.pi / 2)
    R = np.eye(3) + skew([0, 0, 1.0]) + skew([0, 0, 1.0]) @ skew([0, 0, 1.0])  # rotation by pi/2 about e3
    np.testing.assert_allclose(out.points, mu.points @ R.T, atol=1e-8)
    assert np.array_equal(out.weights, mu.weights)


def test_directional_linear_in_direction():
    mu = random_measure(S2, 6, 5)
    V1, V2 = DIRECTIONS["rotation"], DIRECTIONS["affine"]
    for F in FUNCTIONALS.values():
        both = analytic_directional(F, mu, lambda Z: V1.evaluate(Z, mu.points, mu.weights) + 2.0 * V2.evaluate(Z, mu.points, mu.weights))
        assert both == pytest.approx(analytic_directional(F, mu, V1) + 2.0 * analytic_directional(F, mu, V2), abs=1e-10)


@pytest.mark.parametrize("fname", ["linear-quadratic", "composite-exp", "composite-poly"])
def test_double_directional_matches_second_difference(fname):
    F = FUNCTIONALS[fname]
    V = DIRECTIONS["affine"]
    mu = random_measure(S2, 5, 6)
    eps = 1e-3
    fd = (F(perturb_measure(mu, V, eps)) - 2 * F(mu) + F(perturb_measure(mu, V, -eps))) / eps**2
    exact = analytic_double_directional(F, mu, V)
    assert fd == pytest.approx(exact, rel=1e-4, abs=1e-6)


def test_second_derivative_composite():
    F = FUNCTIONALS["composite-exp"]
    mu = random_measure(S2, 4, 7)
    x, y = mu.points[0], mu.points[1]
    D = second_intrinsic_derivative(F, mu, x, y)
    # derivative of D_I F(.)(x) along a rotation of mu, paired through y
    V = DIRECTIONS["rotation"]
    Vx = V.evaluate(mu.points, mu.points, mu.weights)
    pred = sum(wj * D @ vj for wj, vj, yj in zip(mu.weights, Vx, mu.points) for D in [second_intrinsic_derivative(F, mu, x, yj)])
    eps = 1e-4
    fd = (analytic_intrinsic_derivative(F, perturb_measure(mu, V, eps))(x)
          - analytic_intrinsic_derivative(F, perturb_measure(mu, V, -eps))(x)) / (2 * eps)
    np.testing.assert_allclose(fd, pred, atol=1e-8)
    assert D.shape == (3, 3)
    assert np.array_equal(second_intrinsic_derivative(FUNCTIONALS["linear"], mu, x, y), np.zeros((3, 3)))
    with pytest.raises(UnsupportedOrder):
        second_intrinsic_derivative(FUNCTIONALS["pair-alignment"], mu, x, y)


def test_empirical_gradient_examples():
    E1 = Euclidean(1)
    lin = LinearFunctional(QuadraticObservable(((1.0,),), (0.5,)))
    assert empirical_gradient_identity(lin, E1, [[0.7]]) < 1e-6
    const = LinearFunctional(LinearObservable((0.0, 0.0, 0.0), 1.0))
    assert empirical_gradient_identity(const, S2, S2.sample_uniform(4, np.random.default_rng(0))) == 0.0
    pts = S2.sample_uniform(20, np.random.default_rng(8))
    assert empirical_gradient_identity(FUNCTIONALS["composite-exp"], S2, pts) < 1e-5


@pytest.mark.parametrize("fname", sorted(FUNCTIONALS))
def test_empirical_gradient_fifty_configs(fname):
    F = FUNCTIONALS[fname]
    r = np.random.default_rng(9)
    worst = max(empirical_gradient_identity(F, S2, S2.sample_uniform(int(r.integers(2, 12)), r)) for _ in range(50))
    assert worst < 1e-5


def test_chain_rule_examples():
    mu = random_measure(S2, 6, 10)
    assert chain_rule_residual(FUNCTIONALS["linear"], StationaryPath(), mu) < 1e-12
    F = LinearFunctional(coordinate(0, 3))
    res, lhs, rhs = chain_rule_residual(F, RotationPath(), mu, return_parts=True)
    assert rhs == pytest.approx(-mu.integrate(coordinate(1, 3).value), abs=1e-14)
    assert res < 1e-6
    E1 = Euclidean(1)
    nu = EmpiricalMeasure(E1, [[0.3], [-1.2], [2.0]], [0.2, 0.5, 0.3])
    G = LinearFunctional(QuadraticObservable(((1.0,),)))
    theta = 0.37
    res, lhs, rhs = chain_rule_residual(G, TranslationPath((1.0,)), nu, theta=theta, return_parts=True)
    assert rhs == pytest.approx(2 * nu.integrate(lambda x: x[:, 0]) + 2 * theta, abs=1e-14)
    assert res < 1e-8


@pytest.mark.parametrize("fname", sorted(FUNCTIONALS))
def test_chain_rule_flow_path(fname):
    F = FUNCTIONALS[fname]
    mu = random_measure(S2, 5, 11)
    path = FlowPath(DIRECTIONS["affine"])
    residuals = [chain_rule_residual(F, path, mu, theta=0.3, eps=eps) for eps in (1e-2, 5e-3)]
    assert residuals[1] < residuals[0] / 3  # second order in eps


def test_chain_rule_torus():
    T2 = FlatTorus(2)
    mu = random_measure(T2, 6, 12)
    F = CompositeFunctional(ExpCurve(0.7), LinearObservable((1.0, 0.5, -0.3, 0.2)))
    path = FlowPath(affine_field(T2, np.eye(4)[[1, 0, 3, 2]] * [[-1], [1], [-1], [1]]))
    assert chain_rule_residual(F, path, mu, theta=0.2, eps=1e-3) < 1e-6


def test_variational_trivial():
    m = alignment_sphere(particles=10, seed=2)
    W = simulate_noise(2, 0.2, 0.01, seed=1)
    zero = constant_field(S2, [0.0, 0, 0])
    path, _ = variational_flow(m.mu0, m.system, W, zero, m.mu0.points[0])
    assert np.array_equal(path, np.zeros_like(path))


def test_variational_linear_in_direction():
    m = alignment_sphere(particles=10, seed=2)
    W = simulate_noise(2, 0.2, 0.01, seed=1)
    psi = rotation_field(S2, (1.0, 0, 0))
    a, _ = variational_flow(m.mu0, m.system, W, psi, m.mu0.points[0])
    b, _ = variational_flow(m.mu0, m.system, W, psi.with_scale(2.5), m.mu0.points[0])
    np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12, atol=1e-15)


def _fd_variational(m, W, psi, u, eps):
    """Central difference of x_{mu^eps}(u, T) with u fixed, common noise."""
    ends = [solve_interacting_flow(perturb_measure(m.mu0, psi, e), m.system, W, [u]).tracked[-1, 0] for e in (eps, -eps)]
    return (ends[0] - ends[1]) / (2 * eps)


def test_variational_measure_free_is_zero_for_fixed_point():
    # with no interaction, moving the measure does not move a fixed tracked point
    mu = alignment_sphere(particles=10, seed=3).mu0
    system = FieldSystem(S2, rotation_field(S2, (0, 1.0, 0)), (rotation_field(S2, scale=0.5),))
    W = simulate_noise(1, 0.3, 0.01, seed=2)
    path, sol = variational_flow(mu, system, W, rotation_field(S2, (1.0, 0, 0)), mu.points[0])
    assert np.max(np.abs(path)) == 0.0
    # and the carrier rows are the classical first variation
    psi = rotation_field(S2, (1.0, 0, 0))
    h = 1e-6
    ends = [solve_interacting_flow(perturb_measure(mu, psi, e), system, W).carriers[-1] for e in (h, -h)]
    fd = (ends[0] - ends[1]) / (2 * h)
    carriers = sol.variational[-1, :mu.size]
    assert np.linalg.norm(carriers - fd) <= 1e-3 * np.linalg.norm(fd)


def test_variational_alignment_two_hundred_particles():
    m = alignment_sphere(particles=200, seed=4)
    W = simulate_noise(2, 0.3, 0.01, seed=3)
    psi = rotation_field(S2, (1.0, 0.3, 0))
    u = S2.project_to_manifold(np.array([0.8, 0.5, 0.2]))
    path, sol = variational_flow(m.mu0, m.system, W, psi, u)
    fd = _fd_variational(m, W, psi, u, 1e-3)
    assert np.linalg.norm(path[-1] - fd) < 5e-2 * np.linalg.norm(fd)
    # the construction through the moved starting point: total change minus the Jacobian part
    eps = 1e-3
    J = solve_interacting_flow(m.mu0, m.system, W, [u], jacobian=True).jacobian[-1, 0]
    pu = psi.evaluate(u[None], m.mu0.points, m.mu0.weights)[0]
    moved = solve_interacting_flow(perturb_measure(m.mu0, psi, eps), m.system, W,
                                   [S2.retract(u, eps * pu)]).tracked[-1, 0]
    base = sol.tracked[-1, 0]
    zeta = (moved - base) / eps - J @ pu
    assert np.linalg.norm(path[-1] - zeta) < 5e-2 * np.linalg.norm(path[-1])


def test_malliavin_trivial():
    m = alignment_sphere(particles=6, seed=5)
    W = simulate_noise(2, 0.2, 0.01, seed=4)
    path, sol = malliavin_flow(m.mu0, m.system, W, m.mu0.points[0], 0.1)
    assert np.array_equal(path[:10], np.zeros_like(path[:10]))
    zero_noise = FieldSystem(S2, m.system.drift, (constant_field(S2, [0.0, 0, 0]),) * 2)
    path, _ = malliavin_flow(m.mu0, zero_noise, W, m.mu0.points[0], 0.1)
    assert np.array_equal(path, np.zeros_like(path))


def test_malliavin_column_vanishes_for_zero_field():
    m = alignment_sphere(particles=6, seed=5)
    system = FieldSystem(S2, m.system.drift, (m.system.diffusion[0], constant_field(S2, [0.0, 0, 0])))
    W = simulate_noise(2, 0.2, 0.01, seed=4)
    path, _ = malliavin_flow(m.mu0, system, W, m.mu0.points[0], 0.05)
    assert np.array_equal(path[:, 1], np.zeros_like(path[:, 1]))
    assert np.any(path[:, 0] != 0)


def test_malliavin_functional_examples():
    m = additive_gaussian(dt=0.01, start=0.3)
    W = simulate_noise(1, 0.5, 0.01, seed=6)
    sol = solve_interacting_flow(m.mu0, m.system, W, malliavin_times=[0.2, 0.7])
    F = LinearFunctional(QuadraticObservable(((1.0,),)))
    xT = sol.carriers[-1, 0, 0]
    assert malliavin_functional(F, sol, 0.2)[0] == pytest.approx(2 * xT, abs=1e-8)
    assert malliavin_functional(F, sol, 0.7)[0] == 0.0  # s beyond the horizon
    const = LinearFunctional(LinearObservable((0.0,), 4.0))
    assert malliavin_functional(const, sol, 0.2)[0] == 0.0
    with pytest.raises(MissingAuxiliary):
        malliavin_functional(F, sol, 0.3)
    plain = solve_interacting_flow(m.mu0, m.system, W)
    with pytest.raises(MissingAuxiliary):
        malliavin_functional(F, plain, 0.2)


def test_malliavin_increment_duality():
    """E[F(mu_t) dB_k] / dt equals E[D_k F(mu_t)] for the step-k increment derivative."""
    m = alignment_sphere(particles=6, seed=7, dt=0.02)
    F = FUNCTIONALS["composite-exp"]
    T, dt, R = 0.2, 0.02, 10_000
    steps = 10
    s = 0.08
    k = 4
    lhs, rhs = [], []
    for lo in range(0, R, 2000):
        ids = np.arange(lo, lo + 2000)
        dB = noise_batch(2, steps, dt, 99, ids)
        inject = malliavin_inject([s], 2, dt, len(ids), 0, steps)
        out = integrate_batch(m.system, m.mu0.points, m.mu0.weights, np.zeros((0, 3)), dB, dt,
                              inject=inject, save="final")
        X = out["Y"][-1]
        D = np.moveaxis(out["T"][-1], 0, 1)[:, :, None]  # (B, n, 1, P, N) -> one s
        vals = F.values(X, m.mu0.weights)
        lhs.append(vals[:, None] * dB[:, k] / dt)
        rhs.append(malliavin_functional_arrays(F, S2, X, m.mu0.weights, D[:, :, 0]))
    lhs, rhs = np.concatenate(lhs), np.concatenate(rhs)
    for i in range(2):
        diff = lhs[:, i].mean() - rhs[:, i].mean()
        se = np.sqrt(lhs[:, i].var(ddof=1) / R + rhs[:, i].var(ddof=1) / R)
        assert abs(diff) <= 3 * se


def test_ito_residual_zero_fields():
    mu = random_measure(S2, 5, 13)
    zero = FieldSystem(S2, constant_field(S2, [0.0, 0, 0]), (constant_field(S2, [0.0, 0, 0]),))
    sol = solve_interacting_flow(mu, zero, simulate_noise(1, 0.2, 0.01, seed=1))
    assert np.max(np.abs(ito_formula_residual(FUNCTIONALS["composite-exp"], sol, zero))) <= 1e-12


def test_ito_residual_needs_every_step():
    m = alignment_sphere(particles=5, seed=1)
    sol = solve_interacting_flow(m.mu0, m.system, simulate_noise(2, 0.2, 0.01, seed=1), cfg=SolverConfig(dt=0.01, save_stride=2))
    with pytest.raises(MissingAuxiliary):
        ito_formula_residual(FUNCTIONALS["linear"], sol, m.system)


def _ito_rms(F, system, mu, dt, T, R, seed):
    from kvflows.harness import ito_ladder

    rms, _ = ito_ladder(F, system, mu, [dt], T, R, seed)
    return rms[0]


def test_ito_residual_deterministic_second_order():
    mu = alignment_sphere(particles=8, seed=2).mu0
    system = FieldSystem(S2, affine_field(S2, [[0.3, -1.0, 0.5], [1.2, 0.1, -0.4], [0.2, 0.9, -0.6]]), ())
    F = FUNCTIONALS["composite-poly"]
    errs = []
    for dt in (0.04, 0.02, 0.01):
        sol = solve_interacting_flow(mu, system, NoisePath(np.zeros((int(round(0.4 / dt)), 0)), dt))
        errs.append(abs(ito_formula_residual(F, sol, system)[-1]))
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes > 1.8)


def test_ito_residual_halves_with_dt():
    m = alignment_sphere(particles=8, seed=3)
    system = FieldSystem(S2, m.system.drift, m.system.diffusion[:1])
    F = FUNCTIONALS["linear"]
    a = _ito_rms(F, system, m.mu0, 0.004, 0.2, 64, 5)
    b = _ito_rms(F, system, m.mu0, 0.002, 0.2, 64, 5)
    assert 0.35 <= b / a <= 0.65


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_composite_chain_of_linear(seed):
    # gamma(m) = m makes the composite equal to the linear functional
    mu = random_measure(S2, 5, seed)
    f = LinearObservable((0.4, -0.1, 0.9))
    a = CompositeFunctional(PolynomialCurve((0.0, 1.0)), f)
    b = LinearFunctional(f)
    assert a(mu) == pytest.approx(b(mu), abs=1e-14)
    np.testing.assert_allclose(analytic_intrinsic_derivative(a, mu)(mu.points), analytic_intrinsic_derivative(b, mu)(mu.points), atol=1e-14)

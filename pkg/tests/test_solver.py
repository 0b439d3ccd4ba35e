import numpy as np
import pytest

from kvflows.errors import InvalidGrid, ManifoldMismatch, NonFinite
from kvflows.fields import FieldSystem, KernelField, AlignmentKernel, constant_field, rotation_field
from kvflows.geometry import Euclidean, FlatTorus, Sphere
from kvflows.measure import EmpiricalMeasure, wasserstein2
from kvflows.models import alignment_sphere, alignment_system
from kvflows.solver import (
    NoisePath,
    SolverConfig,
    convergence_order,
    estimate_stability,
    integrate_batch,
    noise_batch,
    picard_solve,
    simulate_noise,
    solve_interacting_flow,
    sup_w2_gap,
)

S2 = Sphere(2)


def small_alignment(particles=12, seed=3):
    return alignment_sphere(particles=particles, seed=seed)


def test_zero_fields_identity():
    m = small_alignment()
    zero = FieldSystem(S2, constant_field(S2, [0.0, 0, 0]), (constant_field(S2, [0.0, 0, 0]),) * 2)
    W = simulate_noise(2, 0.2, 0.01, seed=1)
    sol = solve_interacting_flow(m.mu0, zero, W, tracked=m.mu0.points[:2])
    for X in sol.carriers:
        assert np.array_equal(X, m.mu0.points)
    assert np.array_equal(sol.tracked[-1], m.mu0.points[:2])


def test_rotation_quarter_turn():
    steps = 1571  # dt close to 1e-3 with T = pi / 2 on the grid
    dt = (np.pi / 2) / steps
    W = NoisePath(np.zeros((steps, 0)), dt)
    mu = EmpiricalMeasure.delta(S2, [0.0, 0.0, 1.0])
    sol = solve_interacting_flow(mu, [rotation_field(S2)], W, tracked=[[1.0, 0, 0]], cfg=SolverConfig(dt=dt))
    np.testing.assert_allclose(sol.tracked[-1, 0], [0.0, 1.0, 0.0], atol=1e-6)


def test_permutation_equivariance():
    m = small_alignment()
    W = simulate_noise(2, 0.2, 0.01, seed=4)
    perm = np.random.default_rng(0).permutation(m.mu0.size)
    u = m.mu0.points[:1]
    a = solve_interacting_flow(m.mu0, m.system, W, tracked=u)
    b = solve_interacting_flow(m.mu0.permuted(perm), m.system, W, tracked=u)
    for k in range(len(a.times)):
        assert a.measure_at(k).same_measure(b.measure_at(k), tol=1e-13)
    np.testing.assert_allclose(a.tracked, b.tracked, atol=1e-13)


def test_measure_path_starts_at_mu0_and_tracked_start():
    m = small_alignment()
    W = simulate_noise(2, 0.1, 0.01, seed=5)
    sol = solve_interacting_flow(m.mu0, m.system, W, tracked=m.mu0.points[3:5], cfg=SolverConfig(dt=0.01, save_stride=3))
    assert np.array_equal(sol.carriers[0], m.mu0.points)
    assert np.array_equal(sol.tracked[0], m.mu0.points[3:5])
    assert list(sol.times) == pytest.approx([0.0, 0.03, 0.06, 0.09, 0.1])
    # tracked copies of carrier particles follow them exactly
    np.testing.assert_array_equal(sol.tracked[:, 0], sol.carriers[:, 3])


def test_common_noise_tracked_and_batch_agree():
    m = small_alignment()
    W = simulate_noise(2, 0.1, 0.01, seed=6, stream_id=2)
    sol = solve_interacting_flow(m.mu0, m.system, W)
    batch = integrate_batch(m.system, m.mu0.points, m.mu0.weights, np.zeros((0, 3)),
                            noise_batch(2, 10, 0.01, 6, [0, 2]), 0.01)
    assert np.array_equal(batch["Y"][:, 1], sol.carriers)


@pytest.mark.parametrize("renormalize", [True, False])
def test_on_manifold(renormalize):
    m = small_alignment(30)
    W = simulate_noise(2, 0.5, 0.01, seed=7)
    sol = solve_interacting_flow(m.mu0, m.system, W, cfg=SolverConfig(dt=0.01, renormalize=renormalize))
    assert S2.on_manifold_error(sol.carriers) <= 1e-10


def test_torus_flow_on_manifold():
    T2 = FlatTorus(2)
    mu = EmpiricalMeasure.uniform(T2, T2.sample_uniform(10, np.random.default_rng(1)))
    system = FieldSystem(T2, KernelField(T2, AlignmentKernel(1.0)), (constant_field(T2, [1.0, 0, 0, 1.0]),))
    sol = solve_interacting_flow(mu, system, simulate_noise(1, 0.3, 0.01, seed=2))
    assert T2.on_manifold_error(sol.carriers) <= 1e-10


def test_errors():
    m = small_alignment()
    with pytest.raises(InvalidGrid):
        solve_interacting_flow(m.mu0, m.system, simulate_noise(2, 0.1, 0.01, seed=0), cfg=SolverConfig(dt=0.02))
    with pytest.raises(ManifoldMismatch):
        solve_interacting_flow(EmpiricalMeasure.delta(Euclidean(3), [0.0, 0, 0]), m.system,
                               simulate_noise(2, 0.1, 0.01, seed=0))


def test_divergence_detected():
    E1 = Euclidean(1)
    from kvflows.fields import affine_field

    system = FieldSystem(E1, affine_field(E1, [[1e3]]), ())
    W = NoisePath(np.zeros((100, 0)), 1.0)
    with pytest.raises(NonFinite):
        solve_interacting_flow(EmpiricalMeasure.delta(E1, [1.0]), system, W, cfg=SolverConfig(dt=1.0))
    # a batch flags the bad replica and leaves the others alone
    out = integrate_batch(system, [[1.0]], [1.0], np.zeros((0, 1)), np.zeros((2, 100, 0)), 1.0)
    assert out["diverged"].all()


def test_picard_measure_free_iterates_equal():
    mu = small_alignment().mu0
    system = FieldSystem(S2, rotation_field(S2, (1.0, 0, 0)), (rotation_field(S2, scale=0.5),))
    its = picard_solve(mu, system, simulate_noise(1, 0.2, 0.01, seed=8), iterations=3)
    assert np.array_equal(its[1].carriers, its[2].carriers)


def test_picard_contracts_and_matches_direct():
    m = small_alignment(30)
    W = simulate_noise(2, 0.5, 0.01, seed=9)
    its = picard_solve(m.mu0, m.system, W, iterations=6)
    gaps = [sup_w2_gap(a, b) for a, b in zip(its, its[1:])]
    assert all(g2 < 0.8 * g1 for g1, g2 in zip(gaps, gaps[1:]))
    direct = solve_interacting_flow(m.mu0, m.system, W)
    assert sup_w2_gap(its[-1], direct) <= 3 * gaps[-1]


def test_stability_trivial_cases():
    m = small_alignment(10)
    cfg = SolverConfig(dt=0.02)
    same = estimate_stability(m.mu0, m.mu0, m.system, cfg, 0.2, replicas=8, seed=1)
    assert same.numerator[2] == 0.0 and same.numerator[4] == 0.0
    nu = small_alignment(10, seed=11).mu0
    zero = FieldSystem(S2, None, (constant_field(S2, [0.0, 0, 0]),))
    res = estimate_stability(m.mu0, nu, zero, cfg, 0.2, replicas=4, seed=1)
    assert res.ratio[2] == pytest.approx(1.0, abs=1e-12)
    assert res.ratio[4] == pytest.approx(1.0, abs=1e-12)


def test_common_noise_zero_fields_keep_w2():
    m, n = small_alignment(8).mu0, small_alignment(8, seed=12).mu0
    zero = FieldSystem(S2, None, (constant_field(S2, [0.0, 0, 0]),))
    W = simulate_noise(1, 0.3, 0.01, seed=3)
    a, b = solve_interacting_flow(m, zero, W), solve_interacting_flow(n, zero, W)
    w0 = wasserstein2(m, n)
    assert all(wasserstein2(a.measure_at(k), b.measure_at(k)) == w0 for k in range(len(a.times)))


def test_convergence_zero_fields():
    m = small_alignment(5)
    zero = FieldSystem(S2, None, (constant_field(S2, [0.0, 0, 0]),))
    res = convergence_order(m.mu0, zero, 1, [0.04, 0.02, 0.01], 0.4, replicas=2)
    assert res.gaps == [0.0, 0.0]


def test_convergence_deterministic_heun_order_two():
    from kvflows.fields import affine_field

    m = small_alignment(10)
    A = [[0.3, -1.0, 0.5], [1.2, 0.1, -0.4], [0.2, 0.9, -0.6]]
    system = FieldSystem(S2, affine_field(S2, A, [0.5, 0.0, -0.3]), ())
    res = convergence_order(m.mu0, system, 1, [0.1, 0.05, 0.025, 0.0125], 0.8, replicas=1)
    assert 1.8 <= res.order <= 2.2


def test_convergence_interacting_drift_first_order():
    # the measure is frozen during a step, which costs one order for interacting drift
    m = small_alignment(10)
    system = FieldSystem(S2, KernelField(S2, AlignmentKernel(1.0)), ())
    res = convergence_order(m.mu0, system, 1, [0.1, 0.05, 0.025, 0.0125], 0.8, replicas=1)
    assert 0.9 <= res.order <= 1.2


def test_convergence_alignment_order():
    m = small_alignment(10)
    res = convergence_order(m.mu0, m.system, 2, [0.02, 0.01, 0.005, 0.0025], 0.5, replicas=16)
    assert 0.45 <= res.order <= 1.1


def test_convergence_rejects_non_dyadic():
    m = small_alignment(5)
    with pytest.raises(InvalidGrid):
        convergence_order(m.mu0, m.system, 0, [0.03, 0.01], 0.3)


def test_scheme_consistency_ladder():
    """Heun and corrected Ito-Euler: weak gap O(dt), pathwise gap O(dt^1/2)."""
    m = alignment_sphere(particles=8, seed=1)
    T, R = 0.4, 4000
    dts = [0.04, 0.02, 0.01, 0.005]
    fine = int(round(T / dts[-1]))
    dBf = noise_batch(2, fine, dts[-1], 7, np.arange(R))
    weak, se, strong = [], [], []
    for d in dts:
        f = int(round(d / dts[-1]))
        dB = dBf.reshape(R, fine // f, f, 2).sum(2)
        args = (m.system, m.mu0.points, m.mu0.weights, np.zeros((0, 3)), dB, d)
        a = integrate_batch(*args, save="final")["Y"][-1]
        b = integrate_batch(*args, scheme="ito-euler", save="final")["Y"][-1]
        diff = (a - b)[:, :, 1].mean(axis=1)
        weak.append(diff.mean())
        se.append(diff.std(ddof=1) / np.sqrt(R))
        strong.append(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1).max(axis=1))))
    h, g, s = np.array(dts), np.array(weak), np.array(se)
    c = np.sum(g * h / s**2) / np.sum(h**2 / s**2)
    c_se = 1 / np.sqrt(np.sum(h**2 / s**2))
    chi2 = np.sum(((g - c * h) / s) ** 2)
    assert c / c_se > 2.0
    assert chi2 < 13.3  # 4 dof, p = 0.01
    slope = np.polyfit(np.log(h), np.log(strong), 1)[0]
    assert 0.4 <= slope <= 0.75


def test_noise_path_brownian():
    W = simulate_noise(2, 0.05, 0.01, seed=3)
    B = W.brownian()
    assert B.shape == (6, 2) and np.array_equal(B[0], [0.0, 0.0])
    np.testing.assert_allclose(B[-1], W.increments.sum(axis=0))
    assert W.T == pytest.approx(0.05)


def test_variational_and_jacobian_shapes():
    m = small_alignment(6)
    W = simulate_noise(2, 0.1, 0.01, seed=3)
    sol = solve_interacting_flow(m.mu0, m.system, W, tracked=m.mu0.points[:2], jacobian=True,
                                 variational=rotation_field(S2), malliavin_times=[0.05])
    assert sol.jacobian.shape == (11, 2, 3, 3)
    assert sol.variational.shape == (11, 8, 3)
    assert sol.malliavin.shape == (11, 1, 2, 8, 3)
    assert sol.tangency_error < 1e-12


def test_jacobian_matches_finite_difference():
    m = small_alignment(6)
    W = simulate_noise(2, 0.2, 0.01, seed=4)
    u = S2.project_to_manifold(np.array([0.3, 0.8, -0.2]))
    v = S2.project_to_tangent(u, np.array([0.2, -0.1, 0.7]))
    sol = solve_interacting_flow(m.mu0, m.system, W, tracked=[u], jacobian=True)
    h = 1e-6
    xp = solve_interacting_flow(m.mu0, m.system, W, tracked=[S2.retract(u, h * v)]).tracked[-1, 0]
    xm = solve_interacting_flow(m.mu0, m.system, W, tracked=[S2.retract(u, -h * v)]).tracked[-1, 0]
    np.testing.assert_allclose(sol.jacobian[-1, 0] @ v, (xp - xm) / (2 * h), atol=1e-8)


def test_malliavin_increment_mode_matches_finite_difference():
    m = small_alignment(6)
    W = simulate_noise(2, 0.2, 0.01, seed=5)
    s = 0.07
    sol = solve_interacting_flow(m.mu0, m.system, W, tracked=m.mu0.points[:1], malliavin_times=[s],
                                 malliavin_mode="increment")
    k, h = 7, 1e-6
    for i in range(2):
        inc = [W.increments.copy(), W.increments.copy()]
        inc[0][k, i] += h
        inc[1][k, i] -= h
        ends = [solve_interacting_flow(m.mu0, m.system, NoisePath(a, W.dt)).carriers[-1] for a in inc]
        fd = (ends[0] - ends[1]) / (2 * h)
        np.testing.assert_allclose(sol.malliavin[-1, 0, i, :6], fd, atol=1e-7)


def test_malliavin_field_mode_starts_at_field_value():
    m = small_alignment(6)
    W = simulate_noise(2, 0.2, 0.01, seed=5)
    sol = solve_interacting_flow(m.mu0, m.system, W, malliavin_times=[0.1])
    k = 10
    X = sol.carriers[k]
    for i in range(2):
        assert np.array_equal(sol.malliavin[k - 1, 0, i], np.zeros_like(X))
        np.testing.assert_allclose(sol.malliavin[k, 0, i], m.system.diffusion[i].evaluate(X, X, m.mu0.weights), atol=1e-15)


def test_alignment_system_truncation():
    assert alignment_system(n_noise=1).n_noise == 1

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.linalg import expm

from geoservo.lie import Pose, Twist, exp_twist
from geoservo.transport import (DepthCloud, EmptyCloudError, GramianPair, SinkhornDivergence, compare_with_exact,
                                controllability_gramian, estimate_target_pose, exact_transport, gramian_pair,
                                gramian_pinv, ground_cost, lifted_displacement, random_instance, read_cloud,
                                rigid_fit, sinkhorn_unbalanced, steering_input, transport_map, wasserstein_distance,
                                write_cloud)

from conftest import random_pose


def cloud(points, pose=None, weights=None):
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    w = np.full(len(pts), 1.0 / len(pts)) if weights is None else np.asarray(weights, dtype=float)
    px = np.stack([np.arange(len(pts)), np.zeros(len(pts), dtype=int)], axis=1)
    return DepthCloud(Pose.identity() if pose is None else pose, px, pts, w, (len(pts), 1))


def random_cloud(rng, n, pose=None):
    pts = rng.random((n, 3)) + [0, 0, 0.5]
    w = rng.random(n) + 0.1
    return cloud(pts, pose, w / w.sum())


def gen_kl(x, y):
    return float(np.sum(x * np.log(x / y) - x + y))


# ------------------------------------------------------------------ clouds


def test_depth_cloud_validation():
    with pytest.raises(EmptyCloudError):
        DepthCloud(Pose.identity(), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ValueError):
        cloud([[0, 0, 1], [0, 0, 1]], weights=[0.7, 0.7])
    with pytest.raises(ValueError):
        cloud([[0, 0, 1], [0, 0, 1]], weights=[1.0, 0.0])
    with pytest.raises(ValueError):
        cloud([[0, 0, -1.0]])
    with pytest.raises(ValueError):
        DepthCloud(Pose.identity(), [[0, 0]], [[0, 0, 3.0]], [1.0], (1, 1), max_range=2.0)


def test_cloud_file_roundtrip(tmp_path, rng):
    c = random_cloud(rng, 7, random_pose(rng))
    write_cloud(c, tmp_path / "c.txt")
    back = read_cloud(tmp_path / "c.txt")
    assert back.support_pose == c.support_pose
    assert np.array_equal(back.points, c.points) and np.array_equal(back.weights, c.weights)
    assert np.array_equal(back.pixels, c.pixels) and back.resolution == c.resolution
    head = (tmp_path / "c.txt").read_text().splitlines()[0].split()
    assert head[:2] == ["7", "1"] and len(head) == 18


# ---------------------------------------------------------------- ground cost


def test_ground_cost_examples(rng):
    a = random_cloud(rng, 5)
    assert np.allclose(np.diag(ground_cost(a, a)), 0.0)
    C = ground_cost(cloud([[0, 0, 1]]), cloud([[1, 0, 1]]))
    assert np.array_equal(C, [[1.0]])
    with pytest.raises(ValueError):
        ground_cost(a, a, p=0.5)


def test_ground_cost_double_loop(rng):
    a = random_cloud(rng, 6, random_pose(rng))
    b = random_cloud(rng, 4, random_pose(rng))
    for p in (1.0, 2.0, 3.0):
        C = ground_cost(a, b, p)
        for i in range(6):
            xi = a.support_pose.R @ a.points[i] + a.support_pose.p
            for j in range(4):
                yj = b.support_pose.R @ b.points[j] + b.support_pose.p
                d = sum((xi[k] - yj[k]) ** 2 for k in range(3)) ** 0.5
                assert abs(C[i, j] - d**p) <= 1e-12


# ---------------------------------------------------------------- sinkhorn


def test_sinkhorn_identical_clouds(rng):
    a = random_cloud(rng, 10)
    C = ground_cost(a, a)
    plan = sinkhorn_unbalanced(a, a, C, 1e-3, 1e3, max_iter=100000, tol=1e-6)
    assert np.all(plan.plan >= 0)
    assert np.allclose(plan.plan, np.diag(a.weights), atol=1e-3)
    assert plan.cost <= 1e-2


def test_sinkhorn_single_atoms():
    c = 0.7
    masses = []
    for tau in (0.1, 1.0, 10.0, 1e3):
        plan = sinkhorn_unbalanced([1.0], [1.0], np.array([[c]]), 1e-3, tau, tol=1e-12)
        m = plan.plan[0, 0]
        assert 0.0 < m <= 1.0
        masses.append(m)
    assert np.all(np.diff(masses) > 0)
    assert abs(masses[-1] - 1.0) < 1e-3
    assert abs(plan.cost - c) <= 1e-3 * c


def test_sinkhorn_single_atom_closed_form():
    # the minimizer of m c + 2 tau (m log m - m + 1) + eps (m log m - m + 1) is m = exp(-c / (2 tau + eps))
    c, tau, eps = 0.5, 1.0, 1e-2
    plan = sinkhorn_unbalanced([1.0], [1.0], np.array([[c]]), eps, tau, tol=1e-13)
    assert np.isclose(plan.plan[0, 0], np.exp(-c / (2 * tau + eps)), rtol=1e-9)


def test_sinkhorn_errors(rng):
    a, b, C = random_instance(rng)
    bad = C.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        sinkhorn_unbalanced(a, b, bad, 1e-2, 1.0)
    with pytest.raises(ValueError):
        sinkhorn_unbalanced(a, b, C, 0.0, 1.0)
    with pytest.raises(SinkhornDivergence) as exc:
        sinkhorn_unbalanced(a, b, C, 1e-3, 1e4, max_iter=2, tol=1e-14, eps_scaling=False)
    assert exc.value.iterations == 2 and exc.value.residual > 0


def test_sinkhorn_matches_lp_small(rng):
    for _ in range(10):
        a, b, C = random_instance(rng)
        opt, _ = exact_transport(a, b, C)
        plan = sinkhorn_unbalanced(a, b, C, 1e-3, 1e4, max_iter=100000, tol=1e-10)
        assert abs(plan.cost - opt) <= 0.01 * opt


def test_marginal_kl_decreases_with_tau(rng):
    for _ in range(10):
        a, b, C = random_instance(rng)
        kls = []
        for tau in (1.0, 10.0, 100.0, 1e4):
            plan = sinkhorn_unbalanced(a, b, C, 1e-3, tau, max_iter=100000, tol=1e-10)
            kls.append(gen_kl(plan.marginals[0], a))
        assert np.all(np.diff(kls) <= 0)


def test_warm_start_reaches_same_plan(rng):
    a, b, C = random_instance(rng)
    cold = sinkhorn_unbalanced(a, b, C, 1e-2, 1.0, tol=1e-11)
    warm = sinkhorn_unbalanced(a, b, C, 1e-2, 1.0, tol=1e-11, init=(None, cold.potentials[1]))
    assert np.allclose(warm.plan, cold.plan, atol=1e-9)
    assert warm.iterations < cold.iterations


def test_wasserstein_examples(rng):
    a = random_cloud(rng, 8)
    eps = 1e-3
    assert wasserstein_distance(a, a, eps=eps, tau=1e3, tol=1e-6, max_iter=100000) <= 10 * eps
    d = wasserstein_distance(cloud([[0, 0, 1]]), cloud([[1, 0, 1]]), eps=1e-3, tau=1e4)
    assert abs(d - 1.0) <= 0.01


def test_wasserstein_symmetric(rng):
    for _ in range(5):
        a, b = random_cloud(rng, 9), random_cloud(rng, 6)
        d1 = wasserstein_distance(a, b, eps=1e-2, tau=1.0, tol=1e-11)
        d2 = wasserstein_distance(b, a, eps=1e-2, tau=1.0, tol=1e-11)
        assert abs(d1 - d2) <= 1e-8


def test_wasserstein_matches_lp_root(rng):
    for _ in range(5):
        a, b = random_cloud(rng, 8), random_cloud(rng, 10)
        opt, _ = exact_transport(a.weights, b.weights, ground_cost(a, b))
        d = wasserstein_distance(a, b, eps=1e-3, tau=1e4, tol=1e-10, max_iter=100000)
        assert abs(d - opt**0.5) <= 0.01 * opt**0.5


def test_compare_with_exact_report():
    rep = compare_with_exact(n_instances=5, seed=3)
    assert rep.gaps.shape == (5, 4)
    assert rep.worst <= 0.01 and np.all(rep.monotone)


# ------------------------------------------------------------- transport map


def test_transport_map_identity(rng):
    a = random_cloud(rng, 6, random_pose(rng))
    field = transport_map(np.diag(a.weights), a, a)
    assert np.allclose(field.displacement, 0.0, atol=1e-15)
    assert field.mapped.all()


def test_transport_map_single_atoms():
    a, b = cloud([[0, 0, 1]]), cloud([[0.3, -0.2, 1.5]])
    field = transport_map(np.array([[0.8]]), a, b)
    assert np.allclose(field.displacement, [[0.3, -0.2, 0.5]])


def test_transport_map_flags_unmapped():
    a, b = cloud([[0, 0, 1], [1, 0, 1]]), cloud([[0, 1, 1]])
    field = transport_map(np.array([[0.5], [0.0]]), a, b)
    assert list(field.mapped) == [True, False]
    assert np.array_equal(field.displacement[1], np.zeros(3))


def test_transport_map_matches_lp_plan(rng):
    a, b = random_cloud(rng, 6), random_cloud(rng, 9)
    C = ground_cost(a, b)
    _, P_lp = exact_transport(a.weights, b.weights, C)
    plan = sinkhorn_unbalanced(a, b, C, 1e-4, 1e5, max_iter=200000, tol=1e-11)
    f_lp, f_ot = transport_map(P_lp, a, b), transport_map(plan, a, b)
    assert np.max(np.abs(f_lp.target - f_ot.target)) <= 1e-2


def test_rigid_fit_recovers_motion(rng):
    X = rng.standard_normal((20, 3))
    g = random_pose(rng)
    Q, t = rigid_fit(X, g.act(X), rng.random(20) + 0.1)
    assert np.allclose(Q, g.R, atol=1e-12) and np.allclose(t, g.p, atol=1e-12)


def test_estimate_target_pose(rng):
    # the same scene points seen from two camera poses; an exact matching recovers the target camera
    world = rng.random((30, 3)) + [0, 0, 2.0]
    g_src = Pose.identity()
    g_tgt = exp_twist(Twist([0.05, -0.02, 0.01], [0.1, 0.2, -0.1]), 1.0)
    src = cloud(g_src.inverse().act(world), g_src)
    tgt = cloud(g_tgt.inverse().act(world), g_tgt)
    field = transport_map(np.diag(src.weights), src, tgt)
    g_est = estimate_target_pose(field)
    assert np.allclose(g_est.matrix, g_tgt.matrix, atol=1e-12)
    dx = lifted_displacement(g_src, field)
    assert np.allclose(dx[:3], g_tgt.p - g_src.p) and np.all(dx[12:] == 0)


# ----------------------------------------------------------------- gramians


def test_gramian_zero_drift(rng):
    A = np.zeros((18, 18))
    B = np.linalg.qr(rng.standard_normal((18, 18)))[0]
    assert np.allclose(controllability_gramian(A, B, 0.0, 1.0), np.eye(18), atol=1e-12)
    B = rng.standard_normal((18, 6))
    assert np.allclose(controllability_gramian(A, B, 0.5, 2.5), 2.0 * B @ B.T, atol=1e-12)


def _trapezoid(A, B, t0, t1, steps):
    grid = np.linspace(t0, t1, steps + 1)
    vals = [expm(A * s) @ B @ B.T @ expm(A * s).T for s in grid]
    return trapezoid(vals, x=grid, axis=0)


def stable_matrix(rng, n=6):
    A = rng.standard_normal((n, n))
    return A - (np.max(np.linalg.eigvals(A).real) + 0.5) * np.eye(n)


def test_gramian_simpson_vs_refined_trapezoid(rng):
    A = stable_matrix(rng)
    B = rng.standard_normal((6, 2))
    W = controllability_gramian(A, B, 0.0, 1.0, quadrature_steps=64)
    ref = _trapezoid(A, B, 0.0, 1.0, 640 * 10)
    assert np.linalg.norm(W - ref) <= 1e-6 * np.linalg.norm(ref)


def test_gramian_convergence_order(rng):
    A = stable_matrix(rng)
    B = rng.standard_normal((6, 2))
    ref = controllability_gramian(A, B, 0.0, 1.0, quadrature_steps=1024)
    errs = [np.linalg.norm(controllability_gramian(A, B, 0.0, 1.0, n) - ref) for n in (4, 8, 16)]
    assert errs[0] / errs[1] >= 4.0 and errs[1] / errs[2] >= 4.0


def test_gramian_properties_and_errors(rng):
    A = rng.standard_normal((18, 18))
    A = A - A.T
    B = np.zeros((18, 6))
    B[12:] = rng.standard_normal((6, 6))
    grams = gramian_pair(A, B, 0.3, quadrature_steps=256)
    for W in (grams.Wc_full, grams.Wc_togo, grams.Wc_prior):
        assert np.array_equal(W, W.T)
        assert np.min(np.linalg.eigvalsh(W)) >= -1e-10 * np.max(np.abs(W))
    assert np.allclose(grams.Wc_togo + grams.Wc_prior, grams.Wc_full, atol=1e-6 * np.abs(grams.Wc_full).max())
    with pytest.raises(ValueError):
        controllability_gramian(A, B, 1.0, 1.0)
    with pytest.raises(ValueError):
        controllability_gramian(A, B, 0.0, 1.0, quadrature_steps=1)


def test_gramian_pinv_rank():
    W = np.diag([2.0, 1.0, 0.0, 0.0])
    Wp, rank = gramian_pinv(W)
    assert rank == 2 and np.allclose(Wp, np.diag([0.5, 1.0, 0.0, 0.0]))


def test_steering_linear_law(rng):
    A, B = np.zeros((18, 18)), np.eye(18)
    grams = gramian_pair(A, B, 0.0)
    delta = rng.standard_normal(18)
    res = steering_input(A, B, np.zeros(18), 0.0, delta, grams)
    assert np.allclose(res.torque, delta) and res.rank == 18 and not res.clamped
    res = steering_input(A, B, np.zeros(18), 0.0, delta, grams, torque_limit=0.1)
    assert res.clamped and np.max(np.abs(res.torque)) <= 0.1


def test_steering_zero_displacement(rng):
    A = rng.standard_normal((18, 18))
    A = A - A.T
    B = np.zeros((18, 6))
    B[12:] = rng.standard_normal((6, 6))
    grams = gramian_pair(A, B, 0.4)
    res = steering_input(A, B, rng.standard_normal(18), 0.4, np.zeros(18), grams)
    assert np.all(res.torque == 0.0)
    assert isinstance(grams, GramianPair)

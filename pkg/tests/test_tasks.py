import numpy as np
import pytest

from conftest import make_quadratic
from ml2o.numeric import RngStream
from ml2o.tasks import (
    LASSO,
    MIXTURE,
    NORMAL,
    QUADRATIC,
    ROSENBROCK,
    ROSENBROCK_INIT,
    OptimizeeTask,
    TaskDistribution,
    lasso_eval,
    quadratic_eval,
    rosenbrock_eval,
    sample_task,
    sample_theta0,
    task_hvp,
)


def fd_gradient(task, theta, eps=1e-6):
    g = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += eps
        dn = theta.copy()
        dn[i] -= eps
        g[i] = (task.loss(up) - task.loss(dn)) / (2 * eps)
    return g


def test_lasso_at_origin(rng):
    t = OptimizeeTask(
        kind=LASSO, dim=3, a=rng.gen.normal(size=(3, 3)), b=rng.gen.normal(size=3), lam=0.1
    )
    loss, grad = lasso_eval(t, np.zeros(3))
    assert loss == pytest.approx(0.5 * float(t.b @ t.b))
    assert np.allclose(grad, -t.a.T @ t.b)


def test_lasso_identity_closed_form():
    t = OptimizeeTask(kind=LASSO, dim=2, a=np.eye(2), b=np.zeros(2), lam=0.005)
    loss, grad = lasso_eval(t, np.array([1.0, 1.0]))
    assert loss == pytest.approx(1.01)
    assert np.allclose(grad, [1.005, 1.005])


def test_quadratic_minimum_and_unit_case():
    t0 = OptimizeeTask(kind=QUADRATIC, dim=2, a=np.eye(2), b=np.zeros(2))
    loss, grad = quadratic_eval(t0, np.zeros(2))
    assert loss == 0.0 and np.array_equal(grad, np.zeros(2))

    t1 = OptimizeeTask(kind=QUADRATIC, dim=2, a=np.eye(2), b=np.ones(2))
    loss, grad = quadratic_eval(t1, np.zeros(2))
    assert loss == pytest.approx(1.0)
    assert np.allclose(grad, [-1.0, -1.0])


def test_quadratic_gradient_matches_finite_differences(rng):
    for _ in range(50):
        t = make_quadratic(rng, int(rng.gen.integers(2, 7)))
        theta = rng.gen.normal(size=t.dim)
        _, grad = quadratic_eval(t, theta)
        fd = fd_gradient(t, theta)
        assert np.linalg.norm(grad - fd) <= 1e-7 * max(np.linalg.norm(fd), 1.0)


def test_lasso_gradient_matches_fd_away_from_kinks(rng):
    for _ in range(50):
        d = int(rng.gen.integers(2, 6))
        t = OptimizeeTask(
            kind=LASSO, dim=d, a=rng.gen.normal(size=(d, d)), b=rng.gen.normal(size=d), lam=0.005
        )
        theta = rng.gen.normal(size=d)
        theta[np.abs(theta) < 1e-3] = 0.5  # keep clear of the l1 kink
        _, grad = lasso_eval(t, theta)
        fd = fd_gradient(t, theta)
        assert np.linalg.norm(grad - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)


def test_rosenbrock_minimum_and_origin():
    t = OptimizeeTask(kind=ROSENBROCK, dim=2)
    loss, grad = rosenbrock_eval(t, np.array([1.0, 1.0]))
    assert loss == 0.0 and np.array_equal(grad, np.zeros(2))
    loss, grad = rosenbrock_eval(t, np.zeros(2))
    assert loss == 1.0
    assert np.array_equal(grad, np.array([-2.0, 0.0]))


def test_rosenbrock_gradient_matches_fd(rng):
    t = OptimizeeTask(kind=ROSENBROCK, dim=2)
    for _ in range(50):
        theta = rng.gen.uniform(-2, 2, size=2)
        _, grad = rosenbrock_eval(t, theta)
        fd = fd_gradient(t, theta)
        assert np.linalg.norm(grad - fd) <= 1e-7 * max(np.linalg.norm(fd), 1.0)


def test_rosenbrock_strictly_positive_off_minimum():
    t = OptimizeeTask(kind=ROSENBROCK, dim=2)
    for x in np.linspace(-2, 2, 9):
        for y in np.linspace(-1, 3, 9):
            if (x, y) != (1.0, 1.0):
                assert t.loss(np.array([x, y])) > 0.0


def test_rosenbrock_rejects_wrong_dim():
    with pytest.raises(ValueError):
        OptimizeeTask(kind=ROSENBROCK, dim=3)
    t = OptimizeeTask(kind=ROSENBROCK, dim=2)
    with pytest.raises(ValueError):
        t.loss(np.zeros(3))


def test_hvp_identity_hessian():
    t = OptimizeeTask(kind=QUADRATIC, dim=3, a=np.eye(3), b=np.zeros(3))
    v = np.array([1.0, -2.0, 0.5])
    assert np.allclose(task_hvp(t, np.ones(3), v), v)


def test_hvp_rosenbrock_at_minimum():
    t = OptimizeeTask(kind=ROSENBROCK, dim=2)
    got = task_hvp(t, np.array([1.0, 1.0]), np.array([1.0, 0.0]))
    assert np.allclose(got, [802.0, -400.0])


def test_hvp_matches_directional_finite_difference(rng):
    eps = 1e-6
    tasks = [make_quadratic(rng, 4), OptimizeeTask(kind=ROSENBROCK, dim=2)]
    for t in tasks:
        for _ in range(20):
            theta = rng.gen.normal(size=t.dim)
            v = rng.gen.normal(size=t.dim)
            fd = (t.grad(theta + eps * v) - t.grad(theta - eps * v)) / (2 * eps)
            hv = task_hvp(t, theta, v)
            assert np.linalg.norm(hv - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)


def test_hvp_is_symmetric_operator(rng):
    for _ in range(30):
        t = make_quadratic(rng, 5)
        theta = rng.gen.normal(size=5)
        u = rng.gen.normal(size=5)
        v = rng.gen.normal(size=5)
        left = float(v @ task_hvp(t, theta, u))
        right = float(u @ task_hvp(t, theta, v))
        assert abs(left - right) <= 1e-10 * max(abs(left), 1.0)


def test_losses_nonnegative(rng):
    tasks = [
        make_quadratic(rng, 4),
        OptimizeeTask(kind=LASSO, dim=4, a=rng.gen.normal(size=(4, 4)), b=rng.gen.normal(size=4), lam=0.005),
        OptimizeeTask(kind=ROSENBROCK, dim=2),
    ]
    for t in tasks:
        for _ in range(25):
            assert t.loss(rng.gen.normal(size=t.dim) * 3) >= 0.0


def test_sample_task_mixture_entries_in_unit_interval(rng):
    dist = TaskDistribution(kind=MIXTURE, family=LASSO, dim=10, lam=0.005)
    t = sample_task(dist, rng)
    assert t.kind == LASSO and t.lam == 0.005
    assert np.all(t.a >= 0.0) and np.all(t.a < 1.0)
    assert t.b.shape == (10,)


def test_normal_distribution_requires_positive_sigma():
    with pytest.raises(ValueError, match="sigma"):
        TaskDistribution(kind=NORMAL, family=LASSO, dim=5, sigma=0.0)


def test_sample_task_normal_std():
    dist = TaskDistribution(kind=NORMAL, family=QUADRATIC, dim=100, sigma=100.0)
    t = sample_task(dist, RngStream(12).child("t"))
    assert abs(t.a.std() - 100.0) / 100.0 < 0.02
    assert t.lam == 0.0 and t.kind == QUADRATIC


def test_sample_theta0_contract(rng):
    dist = TaskDistribution(kind=ROSENBROCK_INIT)
    assert sample_theta0(dist, rng).shape == (2,)
    a = sample_theta0(dist, RngStream(8).child("th"))
    b = sample_theta0(dist, RngStream(8).child("th"))
    assert np.array_equal(a, b)
    big = np.concatenate(
        [sample_theta0(TaskDistribution(kind=MIXTURE, dim=100), RngStream(9).child(i)) for i in range(1000)]
    )
    assert abs(big.mean()) < 0.02


def test_task_json_round_trip_bit_exact(rng):
    dist = TaskDistribution(kind=NORMAL, family=LASSO, dim=6, lam=0.005, sigma=2.0)
    t = sample_task(dist, rng)
    back = OptimizeeTask.from_json(t.to_json())
    assert np.array_equal(back.a, t.a) and np.array_equal(back.b, t.b)
    assert back.digest() == t.digest()


def test_task_arrays_immutable(rng):
    t = make_quadratic(rng, 3)
    with pytest.raises(ValueError):
        t.a[0, 0] = 5.0

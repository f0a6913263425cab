import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cagm import models
from cagm.embed import ManifoldMap, make_manifold_map
from cagm.errors import NumericError, ValidationError
from cagm.linalg import fd_gradient
from cagm.objectives import Linear, Quadratic, Quartic
from cagm.optimizer import (
    OptimizerConfig,
    apply_step,
    cagm_step,
    combined_objective,
    curvature_reg,
    curvature_reg_grad,
    geodesic_diagnostics,
    geodesic_path,
    metric_tensor,
    path_energy_length,
    sgd_step,
    step_terms,
)
from cagm.verify import random_batch, random_spec

UNIT = ManifoldMap((np.array([[1.0, 0.0]]),))


def test_config_validation():
    with pytest.raises(ValidationError):
        OptimizerConfig(eta=0.0)
    with pytest.raises(ValidationError):
        OptimizerConfig(gamma=0.0)
    with pytest.raises(ValidationError):
        OptimizerConfig(lam=-1.0)
    with pytest.raises(ValidationError):
        OptimizerConfig(sign_mode="ascent")
    with pytest.raises(ValidationError):
        OptimizerConfig(level_weights=(0.5, 0.2))
    assert not OptimizerConfig(lam=0.1, use_alignment=False).alignment_on
    assert not OptimizerConfig(mu=0.0).curvature_on


def test_reduces_to_sgd_bitwise():
    rng = np.random.default_rng(0)
    spec = models.ModelSpec("mlp_classifier", (3, 4, 2), seed=1)
    w = models.init_params(spec)
    obj = models.bind(spec, random_batch(rng, spec))
    cfg = OptimizerConfig(eta=0.1, lam=0.0, mu=0.0, use_hierarchy=True)
    mmap = make_manifold_map(w.size, (2,), seed=0)
    assert cagm_step(w, obj, np.zeros(2), cfg, mmap).tobytes() == sgd_step(w, obj, 0.1).tobytes()
    assert cagm_step(w, obj, None, cfg, None).tobytes() == (w - 0.1 * obj.grad(w)).tobytes()


def test_hand_sgd_and_cagm_steps():
    obj = Quadratic([1.0, 1.0])
    w = np.array([1.0, 0.0])
    np.testing.assert_allclose(cagm_step(w, obj, None, OptimizerConfig(eta=0.1)), [0.9, 0.0], atol=1e-15)
    got = cagm_step(w, obj, np.array([0.5]), OptimizerConfig(eta=0.1, lam=0.1), UNIT)
    np.testing.assert_allclose(got, [0.89, 0.0], atol=1e-12)
    lit = cagm_step(w, obj, np.array([0.5]), OptimizerConfig(eta=0.1, lam=0.1, sign_mode="literal"), UNIT)
    np.testing.assert_allclose(lit, [1.0, 0.0], atol=1e-12)


def test_literal_mode_still_subtracts_curvature():
    obj = Quartic(1)
    w = np.array([0.5])
    cfg = OptimizerConfig(eta=0.01, lam=0.0, mu=1.0, sign_mode="literal")
    terms = step_terms(w, obj, None, cfg)
    np.testing.assert_allclose(apply_step(w, terms, cfg), w - 0.01 * (terms.loss_grad + terms.curv_grad))


def test_combined_objective_all_off_is_loss():
    obj = Quadratic([2.0, 3.0], [1.0, -1.0])
    w = np.array([0.3, 0.7])
    cfg = OptimizerConfig(lam=0.5, mu=0.5, use_alignment=False, use_curvature=False)
    assert combined_objective(w, obj, None, cfg) == obj.loss(w)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_step_direction_is_gradient_of_combined_objective(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, "mlp_classifier")
    obj = models.bind(spec, random_batch(rng, spec))
    d = models.n_params(spec)
    w = rng.standard_normal(d)
    mmap = make_manifold_map(d, (2, 1), seed=seed)
    e_c = [rng.standard_normal((4, 2)), rng.standard_normal((4, 1))]
    cfg = OptimizerConfig(eta=0.05, lam=float(rng.uniform(0.01, 1.0)), use_hierarchy=True)
    direction = (w - cagm_step(w, obj, e_c, cfg, mmap)) / cfg.eta
    fd = fd_gradient(lambda v: combined_objective(v, obj, e_c, cfg, mmap), w)
    assert np.linalg.norm(direction - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-12)


def test_descent_on_convex_quadratic_is_monotone():
    obj = Quadratic([1.0, 3.0, 0.5])
    mmap = make_manifold_map(3, (1,), seed=2)
    cfg = OptimizerConfig(eta=0.2, lam=0.3)  # eta below 2 / (max curvature + 2 lambda)
    w = np.array([2.0, -1.0, 1.5])
    e_c = np.array([0.4])
    values = [combined_objective(w, obj, e_c, cfg, mmap)]
    for _ in range(50):
        w = cagm_step(w, obj, e_c, cfg, mmap)
        values.append(combined_objective(w, obj, e_c, cfg, mmap))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_hierarchy_weights():
    obj = Linear([0.0, 0.0, 0.0])
    mmap = make_manifold_map(3, (2, 1), seed=3)
    w = np.array([1.0, 2.0, 3.0])
    e_c = [np.zeros(2), np.zeros(1)]
    even = step_terms(w, obj, e_c, OptimizerConfig(lam=1.0, use_hierarchy=True), mmap).align_grad
    first = step_terms(w, obj, e_c, OptimizerConfig(lam=1.0, use_hierarchy=True, level_weights=(1.0, 0.0)), mmap).align_grad
    flat = step_terms(w, obj, e_c[:1], OptimizerConfig(lam=1.0), mmap).align_grad
    p0, p1 = mmap.levels
    np.testing.assert_allclose(even, 0.5 * 2 * p0.T @ p0 @ w + 0.5 * 2 * p1.T @ p1 @ w, atol=1e-12)
    np.testing.assert_allclose(first, flat, atol=1e-12)


def test_alignment_without_map_is_an_error():
    with pytest.raises(ValidationError):
        cagm_step(np.zeros(2), Quadratic([1.0, 1.0]), np.zeros(1), OptimizerConfig(lam=0.1))


def test_nan_gradient_names_term():
    class Bad:
        def loss(self, w):
            return 0.0

        def grad(self, w):
            return np.full_like(w, np.nan)

    with pytest.raises(NumericError, match="loss"):
        cagm_step(np.zeros(2), Bad(), None, OptimizerConfig())

    class BadCurvature(Quadratic):
        def loss(self, w):
            return float("nan") if abs(w[0]) > 0 else 0.0

    with pytest.raises(NumericError):
        cagm_step(np.zeros(2), BadCurvature([1.0, 1.0]), None, OptimizerConfig(mu=1.0))


def test_metric_tensor_cases():
    rng = np.random.default_rng(4)
    np.testing.assert_allclose(metric_tensor(Linear(rng.standard_normal(4)), rng.standard_normal(4), 0.3), 0.3, atol=1e-4)
    np.testing.assert_allclose(metric_tensor(Quadratic([2.0, 4.0]), [0.1, 0.2], 0.01), [2.01, 4.01], atol=1e-3)
    # negative curvature is floored to stay positive
    m = metric_tensor(Quadratic([-5.0, 1.0]), [0.0, 0.0], 0.01)
    assert np.all(m > 0)
    for _ in range(50):
        spec = random_spec(rng, "mlp_classifier")
        obj = models.bind(spec, random_batch(rng, spec))
        assert np.all(metric_tensor(obj, rng.standard_normal(models.n_params(spec)), 0.01) > 0)


def test_curvature_reg_cases():
    assert curvature_reg(Linear([1.0, 2.0]), np.array([0.1, 0.4]), 1.0) == pytest.approx(0.0, abs=1e-6)
    assert curvature_reg(Quadratic([2.0, 4.0]), np.array([0.0, 0.0]), 0.5) == pytest.approx(10.0, abs=1e-2)
    assert curvature_reg(Quadratic([2.0, 4.0]), np.array([1.0, 1.0]), 0.0) == 0.0
    with pytest.raises(ValidationError):
        curvature_reg(Quadratic([1.0]), np.zeros(1), -1.0)


def test_curvature_reg_grad_cases():
    np.testing.assert_allclose(curvature_reg_grad(Quadratic([2.0, 4.0]), np.array([0.5, -0.5]), 1.0), 0.0, atol=1e-3)
    assert curvature_reg_grad(Quadratic([2.0, 4.0]), np.array([0.5, -0.5]), 0.0).tobytes() == np.zeros(2).tobytes()
    # R = 144 mu w^4, dR/dw = 576 mu w^3 = 72 at w = 0.5, mu = 1
    assert curvature_reg_grad(Quartic(1), np.array([0.5]), 1.0)[0] == pytest.approx(72.0, rel=0.02)
    fd_of_r = fd_gradient(lambda v: 144.0 * v[0] ** 4, np.array([0.5]))
    assert fd_of_r[0] == pytest.approx(72.0, rel=1e-6)
    with pytest.raises(ValidationError, match="use_curvature"):
        curvature_reg_grad(Quadratic(np.ones(300)), np.zeros(300), 1.0, max_dim=256)


def test_geodesic_identical_endpoints():
    obj = Quadratic([1.0, 2.0])
    path = geodesic_path([1.0, 1.0], [1.0, 1.0], obj, gamma=0.1, segments=4)
    assert path.length == 0.0
    np.testing.assert_array_equal(path.points, np.ones((5, 2)))
    diag = geodesic_diagnostics(path, obj, 0.1)
    assert diag["ratio"] == 1.0 and diag["geodesic_length"] == 0.0


def test_geodesic_linear_model_is_scaled_chord():
    gamma = 0.04
    obj = Linear([1.0, -2.0, 0.5])
    w_a, w_b = np.array([0.0, 1.0, 2.0]), np.array([1.0, -1.0, 0.0])
    path = geodesic_path(w_a, w_b, obj, gamma=gamma, segments=8)
    t = np.linspace(0, 1, 9)[:, None]
    np.testing.assert_allclose(path.points, (1 - t) * w_a + t * w_b, atol=1e-6)
    assert path.length == pytest.approx(math.sqrt(gamma) * np.linalg.norm(w_b - w_a), abs=1e-6)
    assert geodesic_diagnostics(path, obj, gamma)["ratio"] == pytest.approx(1.0, abs=1e-6)


def test_geodesic_constant_metric_length():
    path = geodesic_path([0.0, 0.0], [1.0, 0.0], Quadratic([4.0, 1.0]), gamma=1e-6, segments=16)
    assert path.length == pytest.approx(2.0, abs=1e-3)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 100_000))
def test_geodesic_never_longer_than_chord(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, "mlp_classifier")
    obj = models.bind(spec, random_batch(rng, spec))
    d = models.n_params(spec)
    w_a, w_b = rng.standard_normal(d), rng.standard_normal(d)
    path = geodesic_path(w_a, w_b, obj, gamma=0.01, segments=6, iters=8)
    t = np.linspace(0, 1, 7)[:, None]
    _, chord, _ = path_energy_length(obj, (1 - t) * w_a + t * w_b, 0.01)
    assert path.length <= chord + 1e-9
    assert all(b <= a for a, b in zip(path.energies, path.energies[1:]))
    np.testing.assert_array_equal(path.points[0], w_a)
    np.testing.assert_array_equal(path.points[-1], w_b)


def test_geodesic_validation():
    obj = Quadratic([1.0, 1.0])
    with pytest.raises(ValidationError):
        geodesic_path([0.0, 0.0], [1.0], obj, gamma=0.1)
    with pytest.raises(ValidationError):
        geodesic_path([0.0, 0.0], [1.0, 1.0], obj, gamma=0.1, segments=0)

    class Exploding(Quadratic):
        def loss(self, w):
            return float("inf") if w[0] > 0.4 else super().loss(w)

    with pytest.raises(NumericError):
        geodesic_path([0.0, 0.0], [1.0, 0.0], Exploding([1.0, 1.0]), gamma=0.1, segments=4)

import mpmath
import numpy as np
import pytest

from mfpmp.models import (DimensionError, UnboundedMaximizationError,
                          argmax_hamiltonian_quadratic, build_model, constant_drive,
                          grad_hamiltonian, hamiltonian, linear_scalar, probe_f_bound,
                          tanh_bilinear)

from conftest import zero_model


def test_constant_drive_hamiltonian_value():
    h = hamiltonian(constant_drive(0.5), [0.7], [3.0], [2.0])
    assert h == pytest.approx(4.0, abs=1e-15)


def test_zero_costate_zero_cost_gives_zero():
    assert hamiltonian(zero_model(), [1.3], [0.0], [0.4]) == 0.0


def test_tanh_hamiltonian_against_high_precision():
    mpmath.mp.dps = 40
    ref = 2 * mpmath.mpf("1.5") * mpmath.tanh(1) - mpmath.mpf("0.5") * mpmath.mpf("1.5") ** 2
    h = hamiltonian(tanh_bilinear(0.5), [1.0], [2.0], [1.5])
    assert h == pytest.approx(float(ref), abs=1e-14)
    assert float(ref) == pytest.approx(1.159782, abs=1e-6)


def _fd_grads(model, x, p, theta, eps=1e-6):
    x, p, theta = (np.asarray(a, dtype=float) for a in (x, p, theta))
    gx = np.array([(hamiltonian(model, x + eps * e, p, theta)
                    - hamiltonian(model, x - eps * e, p, theta)) / (2 * eps)
                   for e in np.eye(x.size)])
    gt = np.array([(hamiltonian(model, x, p, theta + eps * e)
                    - hamiltonian(model, x, p, theta - eps * e)) / (2 * eps)
                   for e in np.eye(theta.size)])
    return gx, gt


def test_constant_drive_gradients():
    gx, gt = grad_hamiltonian(constant_drive(0.5), [0.2], [1.0], [0.0])
    fx, ft = _fd_grads(constant_drive(0.5), [0.2], [1.0], [0.0])
    np.testing.assert_allclose(gx, [0.0], atol=1e-12)
    np.testing.assert_allclose(gt, [1.0], atol=1e-12)
    np.testing.assert_allclose(gx, fx, atol=1e-8)
    np.testing.assert_allclose(gt, ft, atol=1e-8)


def test_zero_model_gradients_vanish():
    gx, gt = grad_hamiltonian(zero_model(), [0.5], [0.0], [1.0])
    assert np.all(gx == 0) and np.all(gt == 0)


def test_tanh_theta_gradient():
    model = tanh_bilinear(0.5)
    _, gt = grad_hamiltonian(model, [1.0], [2.0], [1.5])
    _, ft = _fd_grads(model, [1.0], [2.0], [1.5])
    assert gt[0] == pytest.approx(ft[0], abs=1e-8)
    assert gt[0] == pytest.approx(0.023188, abs=1e-6)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_tanh_gradients_match_finite_differences(d):
    rng = np.random.default_rng(d)
    model = tanh_bilinear(0.3, d)
    x, p, theta = rng.normal(size=d), rng.normal(size=d), rng.normal(size=d * d)
    gx, gt = grad_hamiltonian(model, x, p, theta)
    fx, ft = _fd_grads(model, x, p, theta)
    np.testing.assert_allclose(gx, fx, atol=1e-8)
    np.testing.assert_allclose(gt, ft, atol=1e-8)


def test_vjp_fast_paths_agree_with_jacobians():
    rng = np.random.default_rng(0)
    for model in (tanh_bilinear(0.2, 3), linear_scalar(), constant_drive(0.5, 2)):
        x = rng.normal(size=(5, model.d))
        th = rng.normal(size=(5, model.m))
        a = rng.normal(size=(5, model.d))
        np.testing.assert_allclose(model.vjp_x(x, th, a),
                                   np.einsum("...ij,...i->...j", model.f_x(x, th), a), atol=1e-14)
        np.testing.assert_allclose(model.vjp_theta(x, th, a),
                                   np.einsum("...ia,...i->...a", model.f_theta(x, th), a),
                                   atol=1e-14)


def _grid_argmax(g, lam, lo, hi, step=1e-4):
    grid = np.arange(lo, hi + step / 2, step)
    return grid[np.argmax(g * grid - lam * grid ** 2)]


def test_argmax_unbounded():
    theta = argmax_hamiltonian_quadratic(1.523188, 0.5)
    assert theta == pytest.approx(1.523188, abs=1e-12)
    assert abs(theta - _grid_argmax(1.523188, 0.5, -5.0, 5.0)) <= 1e-4


def test_argmax_zero_gradient():
    assert argmax_hamiltonian_quadratic(0.0, 0.5) == 0.0


def test_argmax_box():
    theta = argmax_hamiltonian_quadratic(1.523188, 0.5, -1.0, 1.0)
    assert theta == 1.0
    assert _grid_argmax(1.523188, 0.5, -1.0, 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_argmax_rejects_nonpositive_weight(lam):
    with pytest.raises(UnboundedMaximizationError):
        argmax_hamiltonian_quadratic(1.0, lam)


def test_sign_symmetry_for_cost_free_dynamics():
    model = linear_scalar()
    x, p, theta = np.array([0.7]), np.array([1.3]), np.array([-0.4])
    assert hamiltonian(model, x, -p, theta) == -(p @ model.f(x, theta))


def test_dimension_mismatch_raises():
    with pytest.raises(DimensionError):
        hamiltonian(tanh_bilinear(0.5, 2), [1.0], [1.0, 2.0], [0.0] * 4)


def test_tanh_zero_lambda_has_no_closed_form_weight():
    assert tanh_bilinear(0.0).quadratic_weight is None


def test_build_model_from_config():
    model = build_model({"name": "tanh_bilinear", "lambda": 0.25, "dim": 2,
                         "theta_box": [-1, 1]})
    assert (model.d, model.m, model.boxed) == (2, 4, True)
    with pytest.raises(ValueError):
        build_model({"name": "nope"})


def test_declared_f_bound_holds():
    for model in (tanh_bilinear(0.5, 2, (-1.0, 1.0)), constant_drive(0.5, 2, (-2.0, 1.0))):
        assert probe_f_bound(model, 5.0) <= model.f_bound

"""Tests for derivatives of H, C and the MSE matrix, and the EBLUP correction."""
import numpy as np
import pytest

from scripts.lmm_derivatives import (
    c_derivs,
    chvc_blocks,
    cross_derivative_identity_check,
    d_op,
    delta,
    h_derivs,
    mse_bundle,
)
from scripts.lmm_errors import ContrastShapeError, InconsistentInverseError
from scripts.lmm_mme import assemble_h, solve_mme
from scripts.lmm_model import ContrastSet, VarComponents
from tests.oracles import (
    central_difference,
    chvc_dense,
    mse_at,
    random_contrast,
    random_psd,
    random_spec,
)

E = np.diag([1.0, 0.0])


def _scalar_system(theta):
    B = np.diag([theta, 1.0])
    return np.linalg.inv(B), B


def test_d_op_linear_scalar():
    theta = 2.0
    A, B = _scalar_system(theta)
    derivs = {(0,): E}
    np.testing.assert_allclose(d_op(1, A, B, derivs, (0,)), -E / theta**2)
    np.testing.assert_allclose(d_op(2, A, B, derivs, (0, 0)), 2 * E / theta**3)
    np.testing.assert_allclose(d_op(3, A, B, derivs, (0, 0, 0)), -6 * E / theta**4)


def test_d_op_quadratic_scalar():
    theta = 1.5
    B = np.diag([theta**2, 1.0])
    A = np.linalg.inv(B)
    derivs = {(0,): 2 * theta * E, (0, 0): 2 * E}
    np.testing.assert_allclose(d_op(1, A, B, derivs, (0,)), -2 * E / theta**3)
    np.testing.assert_allclose(d_op(2, A, B, derivs, (0, 0)), 6 * E / theta**4)
    np.testing.assert_allclose(d_op(3, A, B, derivs, (0, 0, 0)), -24 * E / theta**5)


def test_d_op_rejects_wrong_inverse():
    with pytest.raises(InconsistentInverseError):
        d_op(1, np.eye(2), 2.0 * np.eye(2), {(0,): E}, (0,))


def test_d_op_rejects_index_count():
    A, B = _scalar_system(1.0)
    with pytest.raises(ValueError):
        d_op(2, A, B, {(0,): E}, (0,))


def test_toy_h_derivatives(toy_spec, toy_vc):
    hd = h_derivs(toy_spec, toy_vc)
    np.testing.assert_array_equal(hd[(0,)], -np.diag([0.0, 1.0, 1.0]))
    np.testing.assert_array_equal(hd[(1,)], -toy_spec.gram)
    np.testing.assert_array_equal(delta(toy_spec, 1), toy_spec.gram)


def test_toy_c_derivative(toy_spec, toy_vc):
    sol = solve_mme(toy_spec, toy_vc)
    assert c_derivs(sol, (1,))[(0,)][0, 0] == pytest.approx(0.5)


def _perturbed(vc, k, t):
    return vc.perturbed(k, t)


@pytest.mark.parametrize("seed", range(5))
def test_h_derivatives_against_differences(seed):
    spec, vc = random_spec(seed)
    hd = h_derivs(spec, vc)
    for k in range(spec.s + 1):
        h = 1e-5 * vc.sigma2[k]
        fd = central_difference(lambda t: assemble_h(spec, _perturbed(vc, k, t)), 0.0, h)
        np.testing.assert_allclose(hd[(k,)], fd, atol=1e-6 * (1.0 + np.abs(fd).max()))


@pytest.mark.parametrize("seed", range(5))
def test_c_derivatives_against_differences(seed):
    spec, vc = random_spec(seed)
    sol = solve_mme(spec, vc)
    table = c_derivs(sol, (1, 2, 3))
    for k in range(spec.s + 1):
        h = 1e-5 * vc.sigma2[k]
        fd1 = central_difference(lambda t: solve_mme(spec, _perturbed(vc, k, t)).C, 0.0, h)
        np.testing.assert_allclose(table[(k,)], fd1, atol=1e-6 * (1.0 + np.abs(fd1).max()))
        for j in range(spec.s + 1):
            key = tuple(sorted((j, k)))
            fd2 = central_difference(
                lambda t: c_derivs(solve_mme(spec, _perturbed(vc, k, t)), (1,))[(j,)], 0.0, h
            )
            np.testing.assert_allclose(table[key], fd2, atol=1e-6 * (1.0 + np.abs(fd2).max()))
            for i in range(j, spec.s + 1):
                key3 = tuple(sorted((i, j, k)))
                fd3 = central_difference(
                    lambda t: c_derivs(solve_mme(spec, _perturbed(vc, k, t)), (2,))[(i, j)], 0.0, h
                )
                np.testing.assert_allclose(table[key3], fd3, atol=1e-5 * (1.0 + np.abs(fd3).max()))


def test_closed_forms_agree_with_d_op():
    spec, vc = random_spec(6)
    sol = solve_mme(spec, vc)
    hd = h_derivs(spec, vc)
    table = c_derivs(sol)
    for i in range(spec.s + 1):
        np.testing.assert_allclose(table[(i,)], d_op(1, sol.C, sol.H, hd, (i,)), atol=1e-10)
        for j in range(i, spec.s + 1):
            np.testing.assert_allclose(table[(i, j)], d_op(2, sol.C, sol.H, hd, (i, j)), atol=1e-10)
            np.testing.assert_allclose(table[(i, j)], table[(i, j)].T, atol=1e-12)


def test_toy_bundle(toy_spec, toy_vc):
    sol = solve_mme(toy_spec, toy_vc)
    bundle = mse_bundle(sol, ContrastSet.from_lambda(np.array([1.0, 0.0, 0.0]), 1))
    np.testing.assert_allclose(bundle.lambda_tilde[:, 0], [1.0, -0.5, -0.5], atol=1e-12)
    np.testing.assert_allclose([g[0, 0] for g in bundle.grad], [0.5, 0.5], atol=1e-12)
    assert bundle.M[0, 0] == pytest.approx(1.0)
    np.testing.assert_array_equal(bundle.m_delta, np.zeros((1, 1)))


@pytest.mark.parametrize("seed", range(20))
def test_mse_gradient_and_hessian_against_differences(seed):
    spec, vc = random_spec(seed)
    contrast = random_contrast(seed, spec, q=2)
    lam = contrast.lam
    bundle = mse_bundle(solve_mme(spec, vc), contrast)
    for k in range(spec.s + 1):
        h = 1e-5 * vc.sigma2[k]
        fd = central_difference(lambda t: mse_at(spec, _perturbed(vc, k, t), lam), 0.0, h)
        grad = bundle.grad[k]
        np.testing.assert_allclose(grad, fd, atol=1e-6 * (1.0 + np.abs(grad).max()))
        for j in range(spec.s + 1):
            fd2 = central_difference(
                lambda t: mse_bundle(solve_mme(spec, _perturbed(vc, k, t)), contrast).grad[j], 0.0, h
            )
            hess = bundle.hess[(j, k)]
            np.testing.assert_allclose(hess, fd2, atol=1e-5 * (1.0 + np.abs(hess).max()))


@pytest.mark.parametrize("seed", range(10))
def test_mse_gradients_are_psd(seed):
    spec, vc = random_spec(seed)
    bundle = mse_bundle(solve_mme(spec, vc), random_contrast(seed, spec, q=3))
    for g in bundle.grad:
        assert np.linalg.eigvalsh(g).min() >= -1e-10 * (1.0 + np.abs(g).max())


@pytest.mark.parametrize("seed", range(10))
def test_correction_routes_agree(seed):
    spec, vc = random_spec(seed)
    contrast = random_contrast(seed, spec, q=2)
    sigma_cov = random_psd(seed, spec.s + 1, scale=0.1)
    bundle = mse_bundle(solve_mme(spec, vc), contrast, sigma_cov)
    expected = np.zeros((2, 2))
    for i in range(spec.s + 1):
        for j in range(spec.s + 1):
            expected -= 0.5 * sigma_cov[i, j] * bundle.hess[(i, j)]
    np.testing.assert_allclose(bundle.m_delta, expected, atol=1e-9 * (1.0 + np.abs(expected).max()))
    np.testing.assert_allclose(bundle.correction(sigma_cov), bundle.m_delta, atol=1e-12)
    assert np.linalg.eigvalsh(bundle.m_delta).min() >= -1e-10 * (1.0 + np.abs(bundle.m_delta).max())


def test_zero_sigma_gives_zero_correction():
    spec, vc = random_spec(1)
    contrast = random_contrast(1, spec, q=2)
    bundle = mse_bundle(solve_mme(spec, vc), contrast, np.zeros((spec.s + 1, spec.s + 1)))
    np.testing.assert_array_equal(bundle.m_delta, np.zeros((2, 2)))


def test_sigma_shape_is_checked():
    spec, vc = random_spec(1)
    with pytest.raises(ContrastShapeError):
        mse_bundle(solve_mme(spec, vc), random_contrast(1, spec, q=1), np.eye(2))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("scale", [1.0, 1e-3, 1e3])
def test_cross_derivative_identity(seed, scale):
    spec, vc = random_spec(seed)
    sol = solve_mme(spec, vc.scaled(scale))
    assert cross_derivative_identity_check(sol, random_contrast(seed, spec, q=2))


def test_cross_derivative_identity_on_toy(toy_spec, toy_vc):
    sol = solve_mme(toy_spec, toy_vc)
    assert cross_derivative_identity_check(sol, ContrastSet.from_lambda(np.eye(3)[:, :2], 1))


@pytest.mark.parametrize("seed", range(10))
def test_chvc_blocks_match_dense_product(seed):
    spec, vc = random_spec(seed)
    dense = chvc_dense(spec, vc)
    np.testing.assert_allclose(
        chvc_blocks(solve_mme(spec, vc)), dense, atol=1e-9 * (1.0 + np.abs(dense).max())
    )

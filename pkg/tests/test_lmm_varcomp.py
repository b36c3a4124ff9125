"""Tests for ML/REML iterations, Fisher information, log-likelihoods and MINQE."""
import numpy as np
import pytest
from scipy import linalg, stats

from scripts.lmm_errors import ConvergenceWarning, VarianceComponentError
from scripts.lmm_model import LmmSpec, VarComponents
from scripts.lmm_varcomp import (
    VARIANCE_FLOOR_FRACTION,
    EstimationMethod,
    VcOptions,
    default_start,
    estimate,
    estimate_ml,
    estimate_reml,
    fisher_ml,
    fisher_reml,
    loglik_ml,
    loglik_reml,
    minqe,
    minqe_matrix,
    quadratic_forms,
    sigma_cov_from_fisher,
    update_step,
)
from tests.oracles import (
    anova_one_way,
    dense_loglik_ml,
    dense_loglik_reml,
    fisher_trace,
    one_way_spec,
    random_spec,
    searle_oracle,
)

TIGHT = VcOptions(eps=1e-12, max_iter=5000)


def test_toy_fisher_matrices(toy_spec, toy_vc):
    np.testing.assert_allclose(fisher_ml(toy_spec, toy_vc), np.full((2, 2), 0.25), atol=1e-12)
    np.testing.assert_allclose(fisher_reml(toy_spec, toy_vc), np.full((2, 2), 0.125), atol=1e-12)
    assert sigma_cov_from_fisher(fisher_ml(toy_spec, toy_vc)) is None


def test_toy_ml_loglik(toy_spec, toy_vc):
    expected = -0.5 * (2 * np.log(2 * np.pi) + 2 * np.log(2.0) + 1.0)
    assert loglik_ml(toy_spec, toy_vc) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_fisher_matches_trace_form(seed):
    spec, vc = random_spec(seed)
    for restricted, fisher in ((False, fisher_ml), (True, fisher_reml)):
        F = fisher(spec, vc)
        reference = fisher_trace(spec, vc, restricted)
        np.testing.assert_allclose(F, reference, atol=1e-9 * (1.0 + np.abs(reference).max()))
        np.testing.assert_array_equal(F, F.T)


@pytest.mark.parametrize("seed", range(10))
def test_loglik_matches_dense_forms(seed):
    spec, vc = random_spec(seed)
    assert loglik_ml(spec, vc) == pytest.approx(dense_loglik_ml(spec, vc), abs=1e-8)
    assert loglik_reml(spec, vc) == pytest.approx(dense_loglik_reml(spec, vc), abs=1e-8)


def test_reml_loglik_independent_of_contrast_basis():
    spec, vc = random_spec(4)
    B = linalg.null_space(spec.X.T)
    Q = stats.ortho_group.rvs(B.shape[1], random_state=0)
    assert dense_loglik_reml(spec, vc, B @ Q) == pytest.approx(loglik_reml(spec, vc), abs=1e-8)


def test_loglik_accepts_replacement_response():
    spec, vc = random_spec(2)
    y = spec.y[::-1].copy()
    assert loglik_ml(spec, vc, y) == pytest.approx(loglik_ml(spec.with_response(y), vc))


def test_reml_balanced_one_way_matches_anova(one_way):
    est = estimate_reml(one_way, opts=TIGHT)
    msa, mse = anova_one_way(one_way, 4, 5)
    assert msa > mse
    assert est.converged
    assert est.sigma2_hat.error == pytest.approx(mse, abs=1e-8)
    assert est.sigma2_hat.sigma2[0] == pytest.approx((msa - mse) / 5, abs=1e-8)
    assert est.boundary == (False, False)
    assert est.identifiable


def test_ml_balanced_one_way_closed_form(one_way):
    est = estimate_ml(one_way, opts=TIGHT)
    msa, mse = anova_one_way(one_way, 4, 5)
    assert est.sigma2_hat.error == pytest.approx(mse, abs=1e-8)
    assert est.sigma2_hat.sigma2[0] == pytest.approx(((1 - 1 / 4) * msa - mse) / 5, abs=1e-8)


@pytest.mark.parametrize("restricted", [False, True])
def test_iteration_matches_straight_loop(restricted):
    spec = one_way_spec(a=3, m=4, seed=5)
    start = default_start(spec)
    fit = estimate_reml if restricted else estimate_ml
    est = fit(spec, opts=TIGHT)
    reference = searle_oracle(spec, start.sigma2, restricted)
    np.testing.assert_allclose(est.sigma2_hat.sigma2, reference, atol=1e-7)


def test_restart_at_fixed_point_stops_after_one_step(one_way):
    est = estimate_reml(one_way, opts=TIGHT)
    again = estimate_reml(one_way, opts=VcOptions(start=est.sigma2_hat, eps=1e-8))
    assert again.iterations == 1
    step = update_step(one_way, est.sigma2_hat, EstimationMethod.REML)
    assert np.max(np.abs(step - est.sigma2_hat.sigma2)) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_reml_error_variance_not_below_ml(seed):
    spec = one_way_spec(a=4, m=5, seed=seed)
    ml = estimate_ml(spec, opts=TIGHT)
    reml = estimate_reml(spec, opts=TIGHT)
    assert reml.sigma2_hat.error >= ml.sigma2_hat.error - 1e-6


@pytest.mark.parametrize("restricted", [False, True])
def test_iterates_increase_the_likelihood(one_way, restricted):
    fit, loglik = (estimate_reml, loglik_reml) if restricted else (estimate_ml, loglik_ml)
    est = fit(one_way, opts=TIGHT)
    values = [loglik(one_way, VarComponents(h)) for h in est.history]
    assert all(b >= a - 1e-10 for a, b in zip(values, values[1:]))
    assert est.loglik == pytest.approx(values[-1])


def test_boundary_when_groups_do_not_differ():
    a, m = 4, 5
    rng = np.random.default_rng(3)
    e = rng.normal(size=(a, m))
    y = (10.0 + e - e.mean(axis=1, keepdims=True)).reshape(-1)
    spec = LmmSpec(y=y, X=np.ones((a * m, 1)), Z_blocks=(np.kron(np.eye(a), np.ones((m, 1))),))
    est = estimate_reml(spec, opts=TIGHT)
    floor = VARIANCE_FLOOR_FRACTION * np.var(y, ddof=1)
    assert est.boundary[0]
    assert est.sigma2_hat.sigma2[0] == pytest.approx(floor)
    assert est.sigma2_hat.error == pytest.approx(np.sum(y**2 - y.mean() ** 2) / (a * m - 1), rel=1e-6)


def test_non_convergence_is_reported(one_way):
    with pytest.warns(ConvergenceWarning):
        est = estimate_reml(one_way, opts=VcOptions(eps=1e-300, max_iter=2))
    assert not est.converged
    assert est.iterations == 2


def test_start_with_wrong_length(one_way):
    with pytest.raises(VarianceComponentError):
        estimate_reml(one_way, opts=VcOptions(start=VarComponents(np.ones(3))))


def test_constant_response_has_no_default_start(one_way):
    with pytest.raises(VarianceComponentError):
        default_start(one_way.with_response(np.ones(one_way.n)))


def test_toy_quadratic_forms(toy_spec, toy_vc):
    np.testing.assert_allclose(quadratic_forms(toy_spec, toy_vc), [0.5, 0.5], atol=1e-12)


def test_minqe_matrices_are_twice_the_fisher(one_way):
    prior = VarComponents(np.array([2.0, 1.0]))
    np.testing.assert_array_equal(
        minqe_matrix(one_way, prior, EstimationMethod.MINQE_I), 2.0 * fisher_ml(one_way, prior)
    )
    np.testing.assert_array_equal(
        minqe_matrix(one_way, prior, EstimationMethod.MINQE_UI), 2.0 * fisher_reml(one_way, prior)
    )


def test_minqe_ui_at_reml_fixed_point(one_way):
    est = estimate_reml(one_way, opts=TIGHT)
    shot = minqe(one_way, prior=est.sigma2_hat, kind=EstimationMethod.MINQE_UI)
    np.testing.assert_allclose(shot.sigma2_hat.sigma2, est.sigma2_hat.sigma2, atol=1e-8)
    assert shot.iterations == 1
    assert shot.unique
    np.testing.assert_allclose(shot.fisher, 2.0 * fisher_reml(one_way, est.sigma2_hat))
    np.testing.assert_allclose(shot.information, fisher_reml(one_way, est.sigma2_hat))
    np.testing.assert_allclose(shot.information @ shot.sigma_cov_hat, np.eye(2), atol=1e-8)


def test_minqe_i_at_ml_fixed_point(one_way):
    est = estimate_ml(one_way, opts=TIGHT)
    shot = minqe(one_way, prior=est.sigma2_hat, kind=EstimationMethod.MINQE_I)
    np.testing.assert_allclose(shot.sigma2_hat.sigma2, est.sigma2_hat.sigma2, atol=1e-8)


def test_minqe_through_dispatcher(one_way):
    prior = VarComponents(np.array([1.0, 1.0]))
    direct = minqe(one_way, prior=prior, kind=EstimationMethod.MINQE_UI)
    via = estimate(one_way, EstimationMethod.MINQE_UI, prior=prior)
    np.testing.assert_array_equal(direct.sigma2_hat.sigma2, via.sigma2_hat.sigma2)
    assert via.loglik is None


def test_minqe_rejects_iterative_kind(one_way):
    with pytest.raises(ValueError):
        minqe(one_way, kind=EstimationMethod.REML)


def test_minqe_singular_matrix_gives_minimum_norm_solution(toy_spec, toy_vc):
    shot = minqe(toy_spec, prior=toy_vc, kind=EstimationMethod.MINQE_I)
    assert not shot.unique
    np.testing.assert_allclose(shot.raw_sigma2, linalg.pinvh(shot.fisher) @ [0.5, 0.5])


def test_minqe_ui_unbiased_for_any_prior():
    a, m, draws = 4, 5, 10_000
    spec = one_way_spec(a, m, seed=2)
    truth = np.array([2.0, 1.0])
    prior = VarComponents(np.array([0.5, 3.0]))

    rng = np.random.default_rng(99)
    U = rng.normal(0.0, np.sqrt(truth[0]), size=(a, draws))
    Y = 1.0 + spec.Z @ U + rng.normal(0.0, np.sqrt(truth[1]), size=(spec.n, draws))
    H = minqe_matrix(spec, prior, EstimationMethod.MINQE_UI)
    estimates = linalg.pinvh(H) @ quadratic_forms(spec, prior, Y)

    mean = estimates.mean(axis=1)
    se = estimates.std(axis=1) / np.sqrt(draws)
    assert np.all(np.abs(mean - truth) <= 5.0 * se)

import math

import numpy as np
import pytest

from hsbnn.data import load_builtin, preprocess
from hsbnn.gradients import softplus_inv
from hsbnn.models import (ModelSpec, Task, WeightRealization, init_model, sample_weights)
from hsbnn.training import (AdamState, FrozenNegElbo, TrainConfig, TrainingError, adam_step,
                            elbo_estimate, fit, kl_gaussian_layer, kl_horseshoe_beta,
                            kl_horseshoe_layer, kl_model, log_likelihood, neg_elbo_and_grad,
                            train, update_auxiliaries, update_model_auxiliaries)
from hsbnn.models import draw_noise

# Frozen oracle values (computed once with scipy quadrature / plain-numpy Monte
# Carlo, without importing this package).
#
# 1x1 horseshoe layer: beta (0.3, rho -1.0), log tau (-0.5, rho -1.5),
# log v (0.2, rho -2.0), bias (0.1, rho -2.5), q(lambda) = IG(1, 1.7),
# q(theta) = IG(0.5, 0.8), b0 = bg = sigma_prior = 1.  10^6 draws.
KL_MC, KL_MC_SE = 6.8299854519631085, 0.002222655201365193
# One-feature linear Gaussian regression, w ~ N(0.7, sp(-1.2)), b ~ N(-0.2, sp(-1.8)),
# log sigma_obs = -0.3, prior N(0, 1); data x = [0.5, -1, 2], y = [0.3, -0.9, 1.1].
ELBO_QUAD, KL_QUAD = -4.805289329248759, 2.5233514110485835


def _oracle_horseshoe_layer():
    m = init_model(ModelSpec.create("LinearHorseshoe", "regression", 1), 0)
    L = m.layers[0]
    for name, val in dict(beta_mu=0.3, beta_rho=-1.0, tau_mu=-0.5, tau_rho=-1.5, v_mu=0.2,
                          v_rho=-2.0, bias_mu=0.1, bias_rho=-2.5, lambda_shape=1.0,
                          lambda_rate=1.7, theta_shape=0.5, theta_rate=0.8).items():
        getattr(L, name)[...] = val
    return L


def _quadrature_model():
    m = init_model(ModelSpec.create("LinearGaussian", "regression", 1), 0)
    L = m.layers[0]
    L.weight_mu[:], L.weight_rho[:] = 0.7, -1.2
    L.bias_mu[:], L.bias_rho[:] = -0.2, -1.8
    m.obs_log_sigma[:] = -0.3
    return m, np.array([[0.5], [-1.0], [2.0]]), np.array([0.3, -0.9, 1.1])


def test_horseshoe_kl_matches_frozen_monte_carlo():
    kl = kl_horseshoe_layer(_oracle_horseshoe_layer(), 1.0, 1.0, 1.0)
    assert abs(kl - KL_MC) < 3 * KL_MC_SE


def test_elbo_converges_to_quadrature():
    m, X, y = _quadrature_model()
    assert kl_model(m) == pytest.approx(KL_QUAD, abs=1e-9)
    ll = log_likelihood(m, sample_weights(m, np.random.default_rng(0), 400_000), X, y)
    se = ll.std(ddof=1) / math.sqrt(ll.size)
    assert abs(ll.mean() - kl_model(m) - ELBO_QUAD) < 4 * se
    est = elbo_estimate(m, X, y, 3, 200_000, np.random.default_rng(1))
    assert est == pytest.approx(ELBO_QUAD, abs=5e-3)


def test_elbo_full_batch_has_unit_scale(rng):
    m, X, y = _quadrature_model()
    noise = draw_noise(m, rng, 4)
    full = neg_elbo_and_grad(m, X, y, 3, noise, need_grad=False)[2]
    double = neg_elbo_and_grad(m, X, y, 6, noise, need_grad=False)[2]
    assert double.expected_loglik == pytest.approx(2 * full.expected_loglik)
    assert double.kl == full.kl


def test_elbo_estimate_rejects_bad_args(rng):
    m, X, y = _quadrature_model()
    with pytest.raises(ValueError):
        elbo_estimate(m, X, y, 2, 10, rng)
    with pytest.raises(ValueError):
        elbo_estimate(m, X, y, 3, 0, rng)


def test_log_likelihood_examples():
    cls = init_model(ModelSpec.create("LinearGaussian", "classification", 1), 0)
    big = WeightRealization.single([np.array([[0.0]])], [np.array([40.0])])
    assert log_likelihood(cls, big, [[0.0]], [1.0])[0] == pytest.approx(0.0, abs=1e-6)
    half = WeightRealization.single([np.array([[0.0]])], [np.array([0.0])])
    assert log_likelihood(cls, half, [[1.0]], [1.0])[0] == pytest.approx(-0.69315, abs=1e-5)
    reg = init_model(ModelSpec.create("LinearGaussian", "regression", 1), 0)
    assert log_likelihood(reg, half, [[0.0]], [0.0])[0] == pytest.approx(-0.91894, abs=1e-5)


def test_log_likelihood_clamps_confident_errors():
    cls = init_model(ModelSpec.create("LinearGaussian", "classification", 1), 0)
    big = WeightRealization.single([np.array([[0.0]])], [np.array([500.0])])
    assert log_likelihood(cls, big, [[0.0]], [0.0])[0] == pytest.approx(math.log(1e-7), rel=1e-6)


def _gaussian_layer_at(mu, sigma, shape, bias_mu=0.0, bias_sigma=1.0):
    m = init_model(ModelSpec.create("GaussianBNN", "regression", shape[1], shape[0]), 0)
    L = m.layers[0]
    L.weight_mu[:], L.weight_rho[:] = mu, softplus_inv(sigma)
    L.bias_mu[:], L.bias_rho[:] = bias_mu, softplus_inv(bias_sigma)
    return L


def test_kl_gaussian_layer_examples():
    assert kl_gaussian_layer(_gaussian_layer_at(0.0, 1.0, (3, 2)), 1.0) == pytest.approx(0, abs=1e-12)
    assert kl_gaussian_layer(_gaussian_layer_at(1.0, 1.0, (1, 1)), 1.0) == pytest.approx(0.5)
    assert kl_gaussian_layer(_gaussian_layer_at(1.0, 1.0, (2, 2)), 1.0) == pytest.approx(2.0)


def test_kl_horseshoe_beta_zero_at_prior():
    L = _oracle_horseshoe_layer()
    L.beta_mu[:], L.beta_rho[:] = 0.0, softplus_inv(1.0)
    assert kl_horseshoe_beta(L) == pytest.approx(0.0, abs=1e-12)


def test_update_auxiliaries_example():
    L = _oracle_horseshoe_layer()
    L.tau_mu[:], L.tau_rho[:] = 0.0, softplus_inv(1e-9)
    update_auxiliaries(L, 1.0, 1.0)
    assert L.lambda_shape[0] == 1.0
    assert L.lambda_rate[0] == pytest.approx(2.0)


def test_update_auxiliaries_is_the_coordinate_optimum():
    # the KL as a function of the lambda rate alone is minimised at the update
    L = _oracle_horseshoe_layer()
    update_auxiliaries(L, 1.3, 0.7)
    best = kl_horseshoe_layer(L, 1.3, 0.7)
    for name in ("lambda_rate", "theta_rate", "lambda_shape", "theta_shape"):
        for f in (0.9, 1.1):
            arr = getattr(L, name)
            old = arr.copy()
            arr *= f
            assert kl_horseshoe_layer(L, 1.3, 0.7) > best
            arr[...] = old


def test_update_auxiliaries_idempotent():
    m = init_model(ModelSpec.create("HorseshoeBNN", "regression", 4, 3), 0)
    update_model_auxiliaries(m)
    first = m.layers[0].lambda_rate.copy()
    update_model_auxiliaries(m)
    np.testing.assert_array_equal(m.layers[0].lambda_rate, first)


def test_adam_zero_gradient():
    st = AdamState.zeros(3)
    p = np.array([1.0, -2.0, 0.5])
    out = adam_step(p, np.zeros(3), st, TrainConfig())
    np.testing.assert_array_equal(out, p)
    assert st.t == 1


def test_adam_first_step_magnitude():
    st = AdamState.zeros(3)
    g = np.array([3.0, -0.01, 250.0])
    out = adam_step(np.zeros(3), g, st, TrainConfig(lr=1e-3))
    np.testing.assert_allclose(out, -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_converges_on_quadratic():
    cfg, st, x = TrainConfig(lr=0.01), AdamState.zeros(1), np.array([0.0])
    for _ in range(1000):
        x = adam_step(x, 2.0 * (x - 0.3), st, cfg)
    assert abs(x[0] - 0.3) < 1e-6


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), TrainConfig())


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.lr, c.train_mc_samples, c.test_mc_samples) == (
        5000, 64, 1e-3, 10, 100)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)


def _toy(rng, n=40, d=3):
    X = rng.standard_normal((n, d))
    return X, X @ np.array([1.0, 0.0, -0.5])[:d] + 0.1 * rng.standard_normal(n)


def test_zero_epochs_returns_initial_model(rng):
    m = init_model(ModelSpec.create("HorseshoeBNN", "regression", 3, 4), 0)
    X, y = _toy(rng)
    res = fit(m, X, y, TrainConfig(epochs=0))
    np.testing.assert_array_equal(res.model.vector(), m.vector())
    assert res.history.elbo == []


def test_fit_is_deterministic_and_leaves_input_untouched(rng):
    m = init_model(ModelSpec.create("HorseshoeBNN", "regression", 3, 4), 0)
    before = m.vector()
    X, y = _toy(rng)
    a = fit(m, X, y, TrainConfig(epochs=5, seed=3))
    b = fit(m, X, y, TrainConfig(epochs=5, seed=3))
    np.testing.assert_array_equal(a.model.vector(), b.model.vector())
    assert a.history.elbo == b.history.elbo
    np.testing.assert_array_equal(m.vector(), before)
    assert len(a.history.aux) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_reports_non_finite_term(rng):
    m = init_model(ModelSpec.create("LinearGaussian", "regression", 3), 0)
    X, y = _toy(rng)
    X[0, 0] = np.inf
    with pytest.raises(TrainingError, match="log-likelihood"):
        fit(m, X, y, TrainConfig(epochs=1))


def test_training_improves_elbo_on_boston():
    ds = load_builtin("boston")
    pre = preprocess(ds, np.arange(ds.n))
    res = train(init_model(ModelSpec.create("HorseshoeBNN", "regression", ds.d, 50), 0), pre,
                TrainConfig(epochs=500, seed=0))
    e = np.asarray(res.history.elbo)
    smooth = np.convolve(e, np.ones(50) / 50, mode="valid")
    assert np.all(np.diff(smooth) >= 0)


def test_frozen_loss_is_deterministic(rng):
    m = init_model(ModelSpec.create("GaussianBNN", "classification", 2, 3), 0)
    X = rng.standard_normal((5, 2))
    y = (rng.random(5) < 0.5) * 1.0
    f = FrozenNegElbo(m, X, y, n_samples=2, seed=0)
    v = m.vector()
    assert f(v) == f(v) == f.value_and_grad(v)[0]

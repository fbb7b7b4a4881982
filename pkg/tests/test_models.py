import math

import numpy as np
import pytest

from hsbnn.distributions import GaussianParams, lognormal_stats
from hsbnn.gradients import softplus_inv
from hsbnn.models import (CheckpointError, GaussianLayerQ, HorseshoeLayerQ, ModelKind, ModelSpec,
                          SpecError, Task, WeightRealization, forward, init_model, load_checkpoint,
                          model_from_dict, model_to_dict, predict, realize, sample_weights,
                          save_checkpoint, zero_noise)

TINY = float(softplus_inv(1e-12))


def test_init_horseshoe_bnn_shapes():
    m = init_model(ModelSpec.create("HorseshoeBNN", "classification", 17, 50), 0)
    first = m.layers[0]
    assert isinstance(first, HorseshoeLayerQ)
    assert first.beta_mu.shape == (50, 17)
    assert first.tau_mu.shape == first.tau_rho.shape == (17,)
    assert m.layers[1].weight_mu.shape == (1, 50)


def test_init_linear_gaussian():
    m = init_model(ModelSpec.create("LinearGaussian", "regression", 6), 0)
    assert len(m.layers) == 1 and isinstance(m.layers[0], GaussianLayerQ)
    assert m.layers[0].weight_mu.shape == (1, 6)


def test_init_same_seed_identical():
    spec = ModelSpec.create("HorseshoeBNN", "regression", 4, 7)
    np.testing.assert_array_equal(init_model(spec, 3).vector(), init_model(spec, 3).vector())
    assert not np.array_equal(init_model(spec, 3).vector(), init_model(spec, 4).vector())


@pytest.mark.parametrize("kwargs", [
    dict(kind="LinearGaussian", task="regression", n_features=0),
    dict(kind="GaussianBNN", task="regression", n_features=2, n_hidden=0),
    dict(kind="LinearHorseshoe", task="regression", n_features=2, n_hidden=3),
    dict(kind="LinearHorseshoe", task="regression", n_features=2, b0=0.0),
])
def test_invalid_specs(kwargs):
    with pytest.raises(SpecError):
        ModelSpec(**kwargs)


def test_zero_noise_weights():
    m = init_model(ModelSpec.create("HorseshoeBNN", "regression", 3, 4), 1)
    L = m.layers[0]
    L.tau_mu[:] = [0.2, -0.4, 0.1]
    L.v_mu[:] = 0.3
    w = realize(m, zero_noise(m))
    expected = np.exp(L.v_mu[0]) * np.exp(L.tau_mu)[None, :] * L.beta_mu
    np.testing.assert_allclose(w.weights[0][0], expected, rtol=1e-14)


def test_tau_to_minus_infinity_switches_feature_off(rng):
    m = init_model(ModelSpec.create("HorseshoeBNN", "regression", 3, 4), 1)
    m.layers[0].tau_mu[1] = -800.0
    w = sample_weights(m, rng, 5)
    assert np.all(w.weights[0][:, :, 1] == 0.0)
    assert np.any(w.weights[0][:, :, 0] != 0.0)


def test_weight_mean_matches_lognormal_moments():
    m = init_model(ModelSpec.create("LinearHorseshoe", "regression", 1), 2)
    L = m.layers[0]
    L.beta_mu[:] = 0.8
    L.tau_mu[:], L.tau_rho[:] = -0.3, softplus_inv(0.4)
    L.v_mu[:], L.v_rho[:] = 0.2, softplus_inv(0.5)
    draws = sample_weights(m, np.random.default_rng(9), 10_000).weights[0][:, 0, 0]
    target = (lognormal_stats(GaussianParams(-0.3, 0.4)).moment(1)
              * lognormal_stats(GaussianParams(0.2, 0.5)).moment(1) * 0.8)
    assert target == pytest.approx(L.mean_weights()[0, 0])
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - target) < 3 * se


def test_forward_zero_weights_classification():
    spec = ModelSpec.create("LinearGaussian", "classification", 2)
    w = WeightRealization.single([np.zeros((1, 2))], [np.zeros(1)])
    assert forward(spec, w, [0.4, -3.0])[0] == 0.5


def test_forward_linear_regression():
    spec = ModelSpec.create("LinearGaussian", "regression", 2)
    w = WeightRealization.single([np.array([[1.0, 2.0]])], [np.zeros(1)])
    assert forward(spec, w, [3.0, 4.0])[0] == 11.0


def test_forward_hand_built_bnn():
    spec = ModelSpec.create("GaussianBNN", "regression", 1, 1)
    w = WeightRealization.single([np.array([[1.0]]), np.array([[1.0]])],
                                 [np.array([-1.0]), np.array([0.0])])
    assert forward(spec, w, [2.0])[0] == 1.0
    assert forward(spec, w, [0.5])[0] == 0.0  # ReLU clips the negative pre-activation


def test_forward_dimension_mismatch():
    spec = ModelSpec.create("LinearGaussian", "regression", 2)
    w = WeightRealization.single([np.zeros((1, 2))], [np.zeros(1)])
    with pytest.raises(ValueError):
        forward(spec, w, [1.0, 2.0, 3.0])


def test_forward_batched_matches_per_sample(rng):
    m = init_model(ModelSpec.create("HorseshoeBNN", "regression", 3, 6), 0)
    w = sample_weights(m, rng, 4)
    X = rng.standard_normal((5, 3))
    batched = forward(m, w, X)
    for s in range(4):
        h = np.maximum(X @ w.weights[0][s].T + w.biases[0][s], 0.0)
        np.testing.assert_allclose(batched[s], (h @ w.weights[1][s].T + w.biases[1][s])[:, 0],
                                   rtol=1e-12)


def _degenerate(model):
    for layer in model.layers:
        for name in layer.PARAMS:
            if name.endswith("_rho"):
                getattr(layer, name)[...] = TINY
    return model


def test_predict_degenerate_regression():
    m = _degenerate(init_model(ModelSpec.create("GaussianBNN", "regression", 2, 3), 0))
    m.obs_log_sigma[:] = math.log(0.3)
    x = np.array([[0.5, -1.0], [2.0, 0.1]])
    pred = predict(m, x, 50, np.random.default_rng(0))
    det = forward(m, realize(m, zero_noise(m)), x)[0]
    np.testing.assert_allclose(pred.mean, det, atol=1e-9)
    np.testing.assert_allclose(pred.std, 0.3, atol=1e-9)


def test_predict_symmetric_classifier():
    m = _degenerate(init_model(ModelSpec.create("GaussianBNN", "classification", 2, 3), 0))
    m.layers[1].weight_mu[:] = 0.0
    m.layers[1].bias_mu[:] = 0.0
    pred = predict(m, np.ones((4, 2)), 100, np.random.default_rng(0))
    np.testing.assert_allclose(pred.mean, 0.5, atol=1e-9)
    np.testing.assert_allclose(pred.std, 0.0, atol=1e-9)


def test_bind_flat_views_and_copy():
    m = init_model(ModelSpec.create("HorseshoeBNN", "regression", 2, 3), 0)
    flat = m.bind_flat()
    flat[:] = 0.25
    assert np.all(m.layers[0].beta_mu == 0.25) and m.obs_log_sigma[0] == 0.25
    c = m.copy()
    c.set_vector(np.zeros_like(flat))
    assert np.all(m.layers[0].beta_mu == 0.25)
    assert np.all(c.layers[0].beta_mu == 0.0)


@pytest.mark.parametrize("kind", list(ModelKind))
def test_checkpoint_roundtrip(kind, tmp_path, rng):
    m = init_model(ModelSpec.create(kind, "regression", 3, 4), 0)
    m.set_vector(rng.standard_normal(m.vector().size))
    for layer in m.horseshoe_layers():
        layer.lambda_rate[:] = rng.uniform(0.5, 2.0, size=layer.lambda_rate.shape)
    save_checkpoint(m, tmp_path / "m.json", feature_names=["a", "b", "c"])
    back, raw = load_checkpoint(tmp_path / "m.json")
    np.testing.assert_array_equal(back.vector(), m.vector())
    assert back.spec == m.spec and raw["feature_names"] == ["a", "b", "c"]
    for a, b in zip(back.horseshoe_layers(), m.horseshoe_layers()):
        np.testing.assert_array_equal(a.lambda_rate, b.lambda_rate)


def test_checkpoint_rejects_bad_layout():
    d = model_to_dict(init_model(ModelSpec.create("LinearGaussian", "regression", 3), 0))
    d["values"] = d["values"][:-1]
    with pytest.raises(CheckpointError):
        model_from_dict(d)
    with pytest.raises(CheckpointError):
        model_from_dict({**d, "format": "something-else"})

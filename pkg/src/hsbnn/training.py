"""ELBO, its gradient, closed-form auxiliary updates, Adam and the training loop.

Scale priors follow the squared half-Cauchy decomposition

    tau_j^2 | lambda_j ~ IG(1/2, 1/lambda_j),   lambda_j ~ IG(1/2, 1/b0^2)
    v^2     | theta    ~ IG(1/2, 1/theta),      theta    ~ IG(1/2, 1/bg^2)

while q is log-normal on tau_j and v, so every cross-entropy term carries
the Jacobian of tau -> tau^2.  All KL terms are analytic.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, expit, gammaln

from .distributions import LOG_2PI
from .gradients import softplus, softplus_grad_from_value
from .models import (GaussianLayerQ, HorseshoeLayerQ, Task, VariationalModel,
                     WeightRealization, draw_noise, forward_pass, realize)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
LOGIT_CLAMP = math.log((1.0 - PROB_CLAMP) / PROB_CLAMP)
HALF_LOG_PI = 0.5 * math.log(math.pi)
LOG2 = math.log(2.0)


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    train_mc_samples: int = 10
    test_mc_samples: int = 100
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "train_mc_samples", "test_mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- likelihood -------------------------------------------------------------

def _clamped_logits(z):
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    return zc, np.abs(z) < LOGIT_CLAMP


def _pointwise_loglik(model: VariationalModel, out: np.ndarray, y: np.ndarray) -> np.ndarray:
    if model.spec.task is Task.CLASSIFICATION:
        zc, _ = _clamped_logits(out)
        return y * zc - softplus(zc)
    s = model.obs_log_sigma[0]
    return -0.5 * LOG_2PI - s - 0.5 * np.square(y - out) * math.exp(-2.0 * s)


def log_likelihood(model: VariationalModel, w: WeightRealization, X, y) -> np.ndarray:
    """Sum over the batch of log p(y_n | x_n, w), one value per weight draw."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    out, _ = forward_pass(w, X)
    return _pointwise_loglik(model, out, y).sum(axis=1)


# -- KL terms ---------------------------------------------------------------

def _kl_normal_and_grad(mu, rho, prior_sigma):
    """Sum of KL(N(mu, softplus(rho)^2) || N(0, prior_sigma^2)) and its gradient."""
    sigma = softplus(rho)
    var_p = prior_sigma * prior_sigma
    kl = (mu.size * (math.log(prior_sigma) - 0.5) - np.log(sigma).sum()
          + ((sigma * sigma).sum() + (mu * mu).sum()) / (2.0 * var_p))
    d_mu = mu / var_p
    d_rho = (sigma / var_p - 1.0 / sigma) * softplus_grad_from_value(sigma)
    return float(kl), d_mu, d_rho


@functools.lru_cache(maxsize=16)
def _aux_terms_cached(shape_bytes: bytes, rate_bytes: bytes, b: float):
    shape = np.frombuffer(shape_bytes)
    rate = np.frombuffer(rate_bytes)
    e_inv_c = shape / rate
    log_rate = np.log(rate)
    psi = digamma(shape)
    e_log_c = log_rate - psi
    # -E log p(c) - H[q(c)]; the entropy of IG(a, r) is a + log r + lgamma(a) - (1 + a) psi(a)
    aux_part = float((1.5 * e_log_c + e_inv_c / (b * b)
                      - (shape + log_rate + gammaln(shape) - (1.0 + shape) * psi)).sum()
                     + shape.size * (math.log(b) + HALF_LOG_PI))
    return e_inv_c, e_log_c, aux_part


def _aux_terms(aux_shape, aux_rate, b):
    """E[1/c], E[log c] and the auxiliary-only KL part for c ~ IG(shape, rate).

    These change only when the auxiliaries are updated, so they are memoised
    on the parameter bytes.
    """
    return _aux_terms_cached(np.ascontiguousarray(aux_shape, dtype=float).tobytes(),
                             np.ascontiguousarray(aux_rate, dtype=float).tobytes(), float(b))


def _scale_kl_and_grad(mu, rho, aux_shape, aux_rate, b):
    """KL contribution of one group of log-normal scales and their IG auxiliaries.

    Per scale s with log s ~ N(mu, sigma^2) and auxiliary c ~ IG(shape, rate):
      E_q[log q(s)] - E_q[log p(s | c)]  +  E_q[log q(c)] - E_q[log p(c)]
    with p(s^2 | c) = IG(1/2, 1/c) and p(c) = IG(1/2, 1/b^2).
    """
    sigma = softplus(rho)
    e_inv_c, e_log_c, aux_part = _aux_terms(aux_shape, aux_rate, b)
    e_inv_s2 = np.exp(2.0 * (sigma * sigma - mu))
    c_e = e_inv_c * e_inv_s2
    # -E log p(s|c) - H[q(s)]
    scale_part = (0.5 * e_log_c + mu + c_e - np.log(sigma)).sum() + mu.size * (
        HALF_LOG_PI - LOG2 - 0.5 * (LOG_2PI + 1.0))
    d_mu = 1.0 - 2.0 * c_e
    d_rho = (4.0 * sigma * c_e - 1.0 / sigma) * softplus_grad_from_value(sigma)
    return float(scale_part + aux_part), d_mu, d_rho


def _kl_horseshoe_and_grad(layer: HorseshoeLayerQ, b0, bg, sigma_prior):
    kl_beta, g_bmu, g_brho = _kl_normal_and_grad(layer.beta_mu, layer.beta_rho, 1.0)
    kl_tau, g_tmu, g_trho = _scale_kl_and_grad(layer.tau_mu, layer.tau_rho,
                                               layer.lambda_shape, layer.lambda_rate, b0)
    kl_v, g_vmu, g_vrho = _scale_kl_and_grad(layer.v_mu, layer.v_rho,
                                             layer.theta_shape, layer.theta_rate, bg)
    kl_bias, g_cmu, g_crho = _kl_normal_and_grad(layer.bias_mu, layer.bias_rho, sigma_prior)
    grads = {"beta_mu": g_bmu, "beta_rho": g_brho, "tau_mu": g_tmu, "tau_rho": g_trho,
             "v_mu": g_vmu, "v_rho": g_vrho, "bias_mu": g_cmu, "bias_rho": g_crho}
    return kl_beta + kl_tau + kl_v + kl_bias, grads


def _kl_gaussian_and_grad(layer: GaussianLayerQ, sigma_prior):
    kw, gwm, gwr = _kl_normal_and_grad(layer.weight_mu, layer.weight_rho, sigma_prior)
    kb, gbm, gbr = _kl_normal_and_grad(layer.bias_mu, layer.bias_rho, sigma_prior)
    return kw + kb, {"weight_mu": gwm, "weight_rho": gwr, "bias_mu": gbm, "bias_rho": gbr}


def kl_gaussian_layer(layer: GaussianLayerQ, sigma_prior: float) -> float:
    return _kl_gaussian_and_grad(layer, sigma_prior)[0]


def kl_horseshoe_layer(layer: HorseshoeLayerQ, b0: float, bg: float,
                       sigma_prior: float = 1.0) -> float:
    """E_q[log q - log p] over beta, tau, v, lambda, theta and the bias."""
    return _kl_horseshoe_and_grad(layer, b0, bg, sigma_prior)[0]


def kl_horseshoe_beta(layer: HorseshoeLayerQ) -> float:
    return _kl_normal_and_grad(layer.beta_mu, layer.beta_rho, 1.0)[0]


def _layer_kl_and_grad(model: VariationalModel, layer):
    spec = model.spec
    if isinstance(layer, HorseshoeLayerQ):
        return _kl_horseshoe_and_grad(layer, spec.b0, spec.bg, spec.sigma_prior)
    return _kl_gaussian_and_grad(layer, spec.sigma_prior)


def kl_model(model: VariationalModel) -> float:
    return sum(_layer_kl_and_grad(model, layer)[0] for layer in model.layers)


def update_auxiliaries(layer: HorseshoeLayerQ, b0: float, bg: float) -> HorseshoeLayerQ:
    """Set q(lambda) and q(theta) to their coordinate-wise optima, in place.

    q(lambda_j) = IG(1, 1/b0^2 + E[1/tau_j^2]) and likewise for theta.
    """
    tau_sigma, v_sigma = layer.tau_sigma, layer.v_sigma
    layer.lambda_shape[...] = 1.0
    layer.lambda_rate[...] = 1.0 / b0**2 + np.exp(-2.0 * layer.tau_mu + 2.0 * tau_sigma**2)
    layer.theta_shape[...] = 1.0
    layer.theta_rate[...] = 1.0 / bg**2 + np.exp(-2.0 * layer.v_mu + 2.0 * v_sigma**2)
    return layer


def update_model_auxiliaries(model: VariationalModel) -> None:
    for layer in model.horseshoe_layers():
        update_auxiliaries(layer, model.spec.b0, model.spec.bg)


# -- ELBO and gradient ------------------------------------------------------

@dataclass
class ElboTerms:
    elbo: float
    expected_loglik: float  # already scaled by N / M
    kl: float
    kl_by_layer: list


class GradWorkspace:
    """Preallocated gradient vector with per-block views, reused across steps."""

    def __init__(self, model: VariationalModel):
        self.layout = model.layout()
        self.buffer = np.zeros(self.layout.size)
        self.views = self.layout.unpack(self.buffer)


def neg_elbo_and_grad(model: VariationalModel, X: np.ndarray, y: np.ndarray,
                      n_total: int, noise: list[dict], need_grad: bool = True,
                      workspace: GradWorkspace | None = None):
    """Frozen-noise negative ELBO and its gradient as a flat vector.

    The likelihood term is averaged over the S draws in ``noise`` and scaled
    by ``n_total / len(y)``.  With a ``workspace`` the returned gradient is
    the workspace buffer itself and is overwritten by the next call.
    """
    M = X.shape[0]
    S = noise[0]["bias"].shape[0]
    w = realize(model, noise)
    out, hidden = forward_pass(w, X)
    ll_points = _pointwise_loglik(model, out, y)
    scale = n_total / M
    exp_ll = scale * ll_points.sum() / S

    kls, kl_grads = [], []
    for layer in model.layers:
        kl, g = _layer_kl_and_grad(model, layer)
        kls.append(kl)
        kl_grads.append(g)
    kl_total = float(sum(kls))
    terms = ElboTerms(float(exp_ll - kl_total), float(exp_ll), kl_total, kls)
    if not need_grad:
        return -terms.elbo, None, terms

    if workspace is None:
        workspace = GradWorkspace(model)
        fresh = True
    else:
        fresh = False
    gv = workspace.views

    # d(-elbo)/d out
    if model.spec.task is Task.CLASSIFICATION:
        zc, inside = _clamped_logits(out)
        d_out = (y - expit(zc)) * inside
    else:
        s = model.obs_log_sigma[0]
        inv_var = math.exp(-2.0 * s)
        resid = y - out
        d_out = resid * inv_var
    g_a = (-scale / S) * d_out[..., None]

    for l in range(len(model.layers) - 1, -1, -1):
        h_in = X if l == 0 else hidden[l - 1]
        if h_in.ndim == 2:
            # shared input: a single (S*out, M) x (M, in) product
            S_, M_, n_out = g_a.shape
            d_w = (np.swapaxes(g_a, 1, 2).reshape(S_ * n_out, M_) @ h_in).reshape(S_, n_out, -1)
        else:
            d_w = np.matmul(np.swapaxes(g_a, -1, -2), h_in)  # (S, out, in)
        d_b = g_a.sum(axis=1)  # (S, out)
        if l > 0:
            # back through W and the ReLU
            g_a_next = np.matmul(g_a, w.weights[l])
            np.multiply(g_a_next, h_in > 0, out=g_a_next)
        layer, eps, kg = model.layers[l], noise[l], kl_grads[l]
        p = f"L{l}."
        if isinstance(layer, HorseshoeLayerQ):
            tau, v = w.scales[l]
            dw_w = d_w * w.weights[l]
            d_log_tau = dw_w.sum(axis=1)  # (S, in)
            d_log_v = d_log_tau.sum(axis=1)  # (S,)
            d_beta = d_w * (v[:, None, None] * tau[:, None, :])
            np.add(d_beta.sum(axis=0), kg["beta_mu"], out=gv[p + "beta_mu"])
            np.add((d_beta * eps["beta"]).sum(axis=0) * expit(layer.beta_rho), kg["beta_rho"],
                   out=gv[p + "beta_rho"])
            np.add(d_log_tau.sum(axis=0), kg["tau_mu"], out=gv[p + "tau_mu"])
            np.add((d_log_tau * eps["tau"]).sum(axis=0) * expit(layer.tau_rho), kg["tau_rho"],
                   out=gv[p + "tau_rho"])
            gv[p + "v_mu"][0] = d_log_v.sum() + kg["v_mu"][0]
            gv[p + "v_rho"][0] = ((d_log_v * eps["v"]).sum() * expit(layer.v_rho[0])
                                  + kg["v_rho"][0])
        else:
            np.add(d_w.sum(axis=0), kg["weight_mu"], out=gv[p + "weight_mu"])
            np.add((d_w * eps["weight"]).sum(axis=0) * expit(layer.weight_rho), kg["weight_rho"],
                   out=gv[p + "weight_rho"])
        np.add(d_b.sum(axis=0), kg["bias_mu"], out=gv[p + "bias_mu"])
        np.add((d_b * eps["bias"]).sum(axis=0) * expit(layer.bias_rho), kg["bias_rho"],
               out=gv[p + "bias_rho"])
        if l > 0:
            g_a = g_a_next
    if model.is_regression:
        d_s = (np.square(resid).sum() * inv_var) - resid.size
        gv["obs_log_sigma"][0] = -scale / S * d_s
    return -terms.elbo, workspace.buffer if not fresh else workspace.buffer.copy(), terms


class FrozenNegElbo:
    """Negative ELBO of ``model`` as a deterministic function of its flat parameters.

    Auxiliary posteriors and the noise draws are held fixed.
    """

    def __init__(self, model: VariationalModel, X, y, n_total: int | None = None,
                 noise: list[dict] | None = None, n_samples: int = 1, seed=0):
        self.model = model.copy()
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.n_total = len(self.y) if n_total is None else n_total
        if noise is None:
            noise = draw_noise(self.model, np.random.default_rng(seed), n_samples)
        self.noise = noise
        self.layout = self.model.layout()

    def _at(self, vector):
        self.model.set_vector(np.asarray(vector, dtype=float))
        return self.model

    def value(self, vector) -> float:
        return neg_elbo_and_grad(self._at(vector), self.X, self.y, self.n_total, self.noise,
                                 need_grad=False)[0]

    def value_and_grad(self, vector):
        value, g, _ = neg_elbo_and_grad(self._at(vector), self.X, self.y, self.n_total, self.noise)
        return value, g

    __call__ = value


def elbo_estimate(model: VariationalModel, X, y, n_total: int, n_samples: int,
                  rng: np.random.Generator) -> float:
    """Doubly stochastic ELBO estimate for one minibatch."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if n_total < len(y):
        raise ValueError("n_total must be >= batch size")
    noise = draw_noise(model, rng, n_samples)
    return neg_elbo_and_grad(model, X, y, n_total, noise, need_grad=False)[2].elbo


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              cfg: TrainConfig) -> np.ndarray:
    """One bias-corrected Adam step that decreases the loss whose gradient is ``grads``.

    ``state`` is updated in place; the new parameters are returned.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params, grads and optimizer state must have the same shape")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# -- training loop ----------------------------------------------------------

@dataclass
class TrainHistory:
    elbo: list = field(default_factory=list)
    aux: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"elbo": self.elbo, "aux": self.aux}


@dataclass
class TrainResult:
    model: VariationalModel
    history: TrainHistory


def _describe_non_finite(terms: ElboTerms) -> str:
    if not math.isfinite(terms.expected_loglik):
        return "expected log-likelihood"
    for i, kl in enumerate(terms.kl_by_layer):
        if not math.isfinite(kl):
            return f"KL of layer {i}"
    return "ELBO"


def fit(model: VariationalModel, X, y, cfg: TrainConfig,
        callback=None) -> TrainResult:
    """Minibatch Adam ascent on the ELBO; auxiliaries are refreshed after each epoch.

    The input model is not modified.
    """
    model = model.copy()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = len(y)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = model.bind_flat()  # layer arrays are now views into ``params``
    workspace = GradWorkspace(model)
    state = AdamState.zeros(params.size)
    history = TrainHistory()
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        n_batches = 0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            noise = draw_noise(model, rng, cfg.train_mc_samples)
            _, g, terms = neg_elbo_and_grad(model, X[idx], y[idx], n, noise,
                                            workspace=workspace)
            if not (math.isfinite(terms.elbo) and np.all(np.isfinite(g))):
                raise TrainingError(
                    f"non-finite {_describe_non_finite(terms)} at epoch {epoch}")
            params[:] = adam_step(params, g, state, cfg)
            total += terms.elbo
            n_batches += 1
        update_model_auxiliaries(model)
        history.elbo.append(total / n_batches)
        hs = model.horseshoe_layers()
        if hs:
            history.aux.append({"lambda_rate_mean": float(np.mean(hs[0].lambda_rate)),
                                "theta_rate": float(hs[0].theta_rate[0])})
        if callback is not None:
            callback(epoch, model, history)
    return TrainResult(model, history)


def train(model: VariationalModel, dataset, cfg: TrainConfig, callback=None) -> TrainResult:
    """Train on a preprocessed dataset (anything with ``X`` and ``y``)."""
    return fit(model, dataset.X, dataset.y, cfg, callback=callback)

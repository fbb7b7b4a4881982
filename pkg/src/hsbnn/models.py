"""The four model families: variational parameters, weight sampling, forward pass.

LinearGaussian and GaussianBNN put factorised Gaussian posteriors on every
weight.  LinearHorseshoe and HorseshoeBNN replace the first layer with a
tied horseshoe layer: every weight leaving input feature j is written as
``W_ij = v * tau_j * beta_ij`` with log-normal posteriors on ``v`` and
``tau_j`` and a Gaussian posterior on ``beta_ij``.
"""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .gradients import Layout, softplus, softplus_inv

INIT_SIGMA = 0.05
INIT_SCALE_MU = -2.0
INIT_SCALE_SIGMA = 0.1


class ModelKind(str, enum.Enum):
    LINEAR_GAUSSIAN = "LinearGaussian"
    GAUSSIAN_BNN = "GaussianBNN"
    LINEAR_HORSESHOE = "LinearHorseshoe"
    HORSESHOE_BNN = "HorseshoeBNN"

    @property
    def is_bnn(self) -> bool:
        return self in (ModelKind.GAUSSIAN_BNN, ModelKind.HORSESHOE_BNN)

    @property
    def is_horseshoe(self) -> bool:
        return self in (ModelKind.LINEAR_HORSESHOE, ModelKind.HORSESHOE_BNN)


class Task(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    task: Task
    n_features: int
    n_hidden: int = 0
    b0: float = 1.0
    bg: float = 1.0
    sigma_prior: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        object.__setattr__(self, "task", Task(self.task))
        if self.n_features < 1:
            raise SpecError("n_features must be >= 1")
        if self.kind.is_bnn and self.n_hidden < 1:
            raise SpecError(f"{self.kind.value} needs n_hidden > 0")
        if not self.kind.is_bnn and self.n_hidden != 0:
            raise SpecError(f"{self.kind.value} is linear; n_hidden must be 0")
        for name in ("b0", "bg", "sigma_prior"):
            if not getattr(self, name) > 0:
                raise SpecError(f"{name} must be > 0")

    @classmethod
    def create(cls, kind, task, n_features, n_hidden=50, **kwargs) -> "ModelSpec":
        """Like the constructor, but ignores ``n_hidden`` for linear kinds."""
        kind = ModelKind(kind)
        return cls(kind, task, n_features, n_hidden if kind.is_bnn else 0, **kwargs)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "task": self.task.value,
            "n_features": self.n_features, "n_hidden": self.n_hidden,
            "b0": self.b0, "bg": self.bg, "sigma_prior": self.sigma_prior,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class GaussianLayerQ:
    weight_mu: np.ndarray
    weight_rho: np.ndarray
    bias_mu: np.ndarray
    bias_rho: np.ndarray

    PARAMS = ("weight_mu", "weight_rho", "bias_mu", "bias_rho")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight_mu.shape

    @property
    def weight_sigma(self) -> np.ndarray:
        return softplus(self.weight_rho)

    @property
    def bias_sigma(self) -> np.ndarray:
        return softplus(self.bias_rho)

    def mean_weights(self) -> np.ndarray:
        return self.weight_mu


@dataclass
class HorseshoeLayerQ:
    """Non-centred horseshoe layer with tied per-input scales.

    ``lambda_*`` and ``theta_*`` are the inverse-Gamma posteriors of the
    auxiliary variables; they are set in closed form, never by gradient.
    """

    beta_mu: np.ndarray
    beta_rho: np.ndarray
    tau_mu: np.ndarray
    tau_rho: np.ndarray
    v_mu: np.ndarray
    v_rho: np.ndarray
    bias_mu: np.ndarray
    bias_rho: np.ndarray
    lambda_shape: np.ndarray
    lambda_rate: np.ndarray
    theta_shape: np.ndarray
    theta_rate: np.ndarray

    PARAMS = ("beta_mu", "beta_rho", "tau_mu", "tau_rho", "v_mu", "v_rho",
              "bias_mu", "bias_rho")
    AUX = ("lambda_shape", "lambda_rate", "theta_shape", "theta_rate")

    @property
    def shape(self) -> tuple[int, int]:
        return self.beta_mu.shape

    @property
    def beta_sigma(self) -> np.ndarray:
        return softplus(self.beta_rho)

    @property
    def tau_sigma(self) -> np.ndarray:
        return softplus(self.tau_rho)

    @property
    def v_sigma(self) -> np.ndarray:
        return softplus(self.v_rho)

    @property
    def bias_sigma(self) -> np.ndarray:
        return softplus(self.bias_rho)

    def mean_weights(self) -> np.ndarray:
        """E_q[W] = E[v] E[tau_j] mu_beta_ij (the factors are independent under q)."""
        e_v = np.exp(self.v_mu + 0.5 * self.v_sigma**2)
        e_tau = np.exp(self.tau_mu + 0.5 * self.tau_sigma**2)
        return e_v * e_tau[None, :] * self.beta_mu


Layer = GaussianLayerQ | HorseshoeLayerQ


@dataclass
class VariationalModel:
    spec: ModelSpec
    layers: list
    obs_log_sigma: np.ndarray = field(default_factory=lambda: np.zeros(1))
    _layout: Layout | None = field(default=None, init=False, repr=False, compare=False)
    _flat: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def is_regression(self) -> bool:
        return self.spec.task is Task.REGRESSION

    def horseshoe_layers(self) -> list[HorseshoeLayerQ]:
        return [l for l in self.layers if isinstance(l, HorseshoeLayerQ)]

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"L{i}.{name}", getattr(layer, name)) for name in layer.PARAMS)
        if self.is_regression:
            out.append(("obs_log_sigma", self.obs_log_sigma))
        return out

    def layout(self) -> Layout:
        if self._layout is None:
            self._layout = Layout((name, arr.shape) for name, arr in self.blocks())
        return self._layout

    def vector(self) -> np.ndarray:
        if self._flat is not None:
            return self._flat.copy()
        return np.concatenate([arr.ravel() for _, arr in self.blocks()])

    def bind_flat(self) -> np.ndarray:
        """Make every trainable array a view into one flat buffer and return it.

        Writing into the buffer then updates the model with no copying.
        """
        flat = self.vector()
        views = self.layout().unpack(flat)
        for i, layer in enumerate(self.layers):
            for name in layer.PARAMS:
                setattr(layer, name, views[f"L{i}.{name}"])
        if self.is_regression:
            self.obs_log_sigma = views["obs_log_sigma"]
        self._flat = flat
        return flat

    def set_vector(self, vector: np.ndarray) -> None:
        """Write a flat parameter vector back into the layer arrays in place."""
        vector = np.asarray(vector, dtype=float)
        if self._flat is not None:
            if vector.shape != self._flat.shape:
                raise ValueError(f"expected vector of length {self._flat.size}")
            self._flat[:] = vector
            return
        views = self.layout().unpack(vector)
        for name, arr in self.blocks():
            arr[...] = views[name]

    def with_vector(self, vector: np.ndarray) -> "VariationalModel":
        out = self.copy()
        out.set_vector(vector)
        return out

    def copy(self) -> "VariationalModel":
        out = copy.deepcopy(self)
        if self._flat is not None:
            # deepcopy detaches the views from the copied buffer
            out._flat = None
            out.bind_flat()
        return out


def _gaussian_layer(rng, n_out, n_in) -> GaussianLayerQ:
    rho = float(softplus_inv(INIT_SIGMA))
    return GaussianLayerQ(
        weight_mu=rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in)),
        weight_rho=np.full((n_out, n_in), rho),
        bias_mu=np.zeros(n_out),
        bias_rho=np.full(n_out, rho),
    )


def _horseshoe_layer(rng, n_out, n_in, b0, bg) -> HorseshoeLayerQ:
    rho = float(softplus_inv(INIT_SIGMA))
    scale_rho = float(softplus_inv(INIT_SCALE_SIGMA))
    return HorseshoeLayerQ(
        beta_mu=rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in)),
        beta_rho=np.full((n_out, n_in), rho),
        tau_mu=np.full(n_in, INIT_SCALE_MU),
        tau_rho=np.full(n_in, scale_rho),
        v_mu=np.full(1, INIT_SCALE_MU),
        v_rho=np.full(1, scale_rho),
        bias_mu=np.zeros(n_out),
        bias_rho=np.full(n_out, rho),
        lambda_shape=np.full(n_in, 0.5),
        lambda_rate=np.full(n_in, 1.0 / b0**2),
        theta_shape=np.full(1, 0.5),
        theta_rate=np.full(1, 1.0 / bg**2),
    )


def init_model(spec: ModelSpec, seed=0) -> VariationalModel:
    rng = np.random.default_rng(seed)
    d, h = spec.n_features, spec.n_hidden
    first_out = h if spec.kind.is_bnn else 1
    if spec.kind.is_horseshoe:
        layers = [_horseshoe_layer(rng, first_out, d, spec.b0, spec.bg)]
    else:
        layers = [_gaussian_layer(rng, first_out, d)]
    if spec.kind.is_bnn:
        layers.append(_gaussian_layer(rng, 1, h))
    return VariationalModel(spec, layers, np.zeros(1))


# -- sampling ---------------------------------------------------------------

def draw_noise(model: VariationalModel, rng: np.random.Generator, n_samples: int) -> list[dict]:
    """Standard-normal draws for every reparameterised variable, S leading."""
    noise = []
    for layer in model.layers:
        n_out, n_in = layer.shape
        eps = {}
        if isinstance(layer, HorseshoeLayerQ):
            eps["beta"] = rng.standard_normal((n_samples, n_out, n_in))
            eps["tau"] = rng.standard_normal((n_samples, n_in))
            eps["v"] = rng.standard_normal(n_samples)
        else:
            eps["weight"] = rng.standard_normal((n_samples, n_out, n_in))
        eps["bias"] = rng.standard_normal((n_samples, n_out))
        noise.append(eps)
    return noise


def zero_noise(model: VariationalModel, n_samples: int = 1) -> list[dict]:
    noise = draw_noise(model, np.random.default_rng(0), n_samples)
    return [{k: np.zeros_like(v) for k, v in eps.items()} for eps in noise]


@dataclass
class WeightRealization:
    """Concrete weights for S posterior draws: ``weights[l]`` is (S, out, in)."""

    weights: list
    biases: list
    scales: list = field(default_factory=list)  # per layer: None or (tau (S,in), v (S,))

    @property
    def n_samples(self) -> int:
        return self.weights[0].shape[0]

    @classmethod
    def single(cls, weights, biases) -> "WeightRealization":
        return cls([np.asarray(w, float)[None] for w in weights],
                   [np.asarray(b, float).reshape(1, -1) for b in biases],
                   [None] * len(weights))


def realize(model: VariationalModel, noise: list[dict]) -> WeightRealization:
    weights, biases, scales = [], [], []
    for layer, eps in zip(model.layers, noise):
        if isinstance(layer, HorseshoeLayerQ):
            beta = layer.beta_mu + layer.beta_sigma * eps["beta"]
            tau = np.exp(layer.tau_mu + layer.tau_sigma * eps["tau"])
            v = np.exp(layer.v_mu + layer.v_sigma * eps["v"])
            weights.append(v[:, None, None] * tau[:, None, :] * beta)
            scales.append((tau, v))
        else:
            weights.append(layer.weight_mu + layer.weight_sigma * eps["weight"])
            scales.append(None)
        biases.append(layer.bias_mu + layer.bias_sigma * eps["bias"])
    return WeightRealization(weights, biases, scales)


def sample_weights(model: VariationalModel, rng: np.random.Generator,
                   n_samples: int = 1) -> WeightRealization:
    return realize(model, draw_noise(model, rng, n_samples))


# -- forward ----------------------------------------------------------------

def _as_matrix(model_or_spec, x) -> tuple[np.ndarray, bool]:
    spec = model_or_spec.spec if isinstance(model_or_spec, VariationalModel) else model_or_spec
    x = np.asarray(x, dtype=float)
    vector = x.ndim == 1
    X = x[None, :] if vector else x
    if X.ndim != 2 or X.shape[1] != spec.n_features:
        raise ValueError(f"expected {spec.n_features} features, got input of shape {x.shape}")
    return X, vector


def forward_pass(w: WeightRealization, X: np.ndarray):
    """Network output (S, M) before any link function, plus hidden ReLU activations."""
    hidden = []
    h = X
    n_layers = len(w.weights)
    for l, (W, b) in enumerate(zip(w.weights, w.biases)):
        if h.ndim == 2:
            # shared input: one (M, in) x (in, S*out) product instead of S small ones
            S, n_out, n_in = W.shape
            flat = (h @ W.reshape(S * n_out, n_in).T).reshape(h.shape[0], S, n_out)
            a = np.empty((S, h.shape[0], n_out))
            np.add(flat.transpose(1, 0, 2), b[:, None, :], out=a)
        else:
            a = np.matmul(h, np.swapaxes(W, -1, -2)) + b[:, None, :]
        if l < n_layers - 1:
            h = np.maximum(a, 0.0, out=a)
            hidden.append(h)
        else:
            out = a[..., 0]
    return out, hidden


def forward(model_or_spec, w: WeightRealization, x) -> np.ndarray:
    """Regression mean or class-1 probability for every draw in ``w``.

    ``x`` is one feature vector (result shape (S,)) or a matrix (S, M).
    """
    X, vector = _as_matrix(model_or_spec, x)
    spec = model_or_spec.spec if isinstance(model_or_spec, VariationalModel) else model_or_spec
    out, _ = forward_pass(w, X)
    if spec.task is Task.CLASSIFICATION:
        out = expit(out)
    return out[:, 0] if vector else out


class Prediction(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


def predictive_samples(model: VariationalModel, x, n_samples: int,
                       rng: np.random.Generator) -> np.ndarray:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    return forward(model, sample_weights(model, rng, n_samples), x)


def predict(model: VariationalModel, x, n_samples: int = 100,
            rng: np.random.Generator | None = None) -> Prediction:
    """Monte-Carlo posterior predictive summary.

    Regression std combines the spread of the sampled means with the
    observation noise.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    draws = predictive_samples(model, x, n_samples, rng)
    mean = draws.mean(axis=0)
    var = draws.var(axis=0)
    if model.is_regression:
        var = var + np.exp(2.0 * model.obs_log_sigma[0])
    return Prediction(mean, np.sqrt(var))


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_FORMAT = "hsbnn-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def model_to_dict(model: VariationalModel, **extra) -> dict:
    """JSON-ready snapshot: spec, flat parameter vector with its layout, auxiliaries."""
    aux = [{name: getattr(layer, name).tolist() for name in layer.AUX}
           if isinstance(layer, HorseshoeLayerQ) else None for layer in model.layers]
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "layout": model.layout().to_json(),
        "values": model.vector().tolist(),
        "aux": aux,
        **extra,
    }


def model_from_dict(d: dict) -> VariationalModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a model checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
    spec = ModelSpec.from_dict(d["spec"])
    model = init_model(spec, 0)
    if Layout.from_json(d["layout"]) != model.layout():
        raise CheckpointError("checkpoint layout does not match its model spec")
    values = np.asarray(d["values"], dtype=float)
    if values.shape != (model.layout().size,):
        raise CheckpointError(f"expected {model.layout().size} values, got {values.size}")
    model.set_vector(values)
    for layer, aux in zip(model.layers, d["aux"]):
        if isinstance(layer, HorseshoeLayerQ):
            for name in layer.AUX:
                getattr(layer, name)[...] = np.asarray(aux[name], dtype=float)
    return model


def save_checkpoint(model: VariationalModel, path, **extra) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, **extra), fh)


def load_checkpoint(path) -> tuple[VariationalModel, dict]:
    """The model and the raw checkpoint dict (for any extra fields)."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return model_from_dict(d), d

"""Test metrics and cross-validation summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from .distributions import LOG_2PI
from .models import Task, VariationalModel, predictive_samples
from .training import PROB_CLAMP

THRESHOLD = 0.5


class UndefinedMetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def error_rate(probs, labels) -> float:
    probs, labels = _pair(probs, labels)
    return float(np.mean((probs >= THRESHOLD) != (labels == 1)))


def auroc(probs, labels) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg) + P(tie) / 2, via midranks."""
    probs, labels = _pair(probs, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes in the labels")
    ranks = rankdata(probs)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(probs, labels) -> ConfusionMatrix:
    probs, labels = _pair(probs, labels)
    hat = probs >= THRESHOLD
    true = labels == 1
    return ConfusionMatrix(tp=int(np.sum(hat & true)), fp=int(np.sum(hat & ~true)),
                           tn=int(np.sum(~hat & ~true)), fn=int(np.sum(~hat & true)))


def nll_from_samples(samples, y, task: Task, obs_sigma: float = 1.0,
                     y_scale: float = 1.0) -> float:
    """Mean negative log predictive density from S sampled outputs per point.

    ``samples`` is (S, n): probabilities for classification, means for
    regression.  For regression, ``samples``, ``y`` and ``obs_sigma`` share
    one (possibly standardized) unit and ``y_scale`` maps that unit back to
    the original one, adding log(y_scale) per point.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if samples.shape[1] != y.size:
        raise ValueError("samples and y disagree on the number of points")
    if Task(task) is Task.CLASSIFICATION:
        p = np.clip(samples.mean(axis=0), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return float(-np.mean(np.where(y == 1, np.log(p), np.log1p(-p))))
    z = (y - samples) / obs_sigma
    logp = -0.5 * z * z - math.log(obs_sigma) - 0.5 * LOG_2PI
    lme = logsumexp(logp, axis=0) - math.log(samples.shape[0])
    return float(-np.mean(lme) + math.log(y_scale))


def nll(model: VariationalModel, X, y, n_samples: int = 100,
        rng: np.random.Generator | None = None, y_scale: float = 1.0) -> float:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    samples = predictive_samples(model, X, n_samples, rng)
    return nll_from_samples(samples, y, model.spec.task,
                            float(np.exp(model.obs_log_sigma[0])), y_scale)


@dataclass(frozen=True)
class MetricSummary:
    values: tuple[float, ...]
    mean: float
    standard_error: float

    def to_dict(self) -> dict:
        return {"values": list(self.values), "mean": self.mean,
                "standard_error": self.standard_error}


def aggregate(values) -> MetricSummary:
    """Mean and standard error (sample std with ddof=1, over sqrt(k))."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size < 2:
        raise ValueError("need at least two folds")
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    return MetricSummary(tuple(float(x) for x in v), float(v.mean()), se)

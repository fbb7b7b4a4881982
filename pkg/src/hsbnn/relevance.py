"""Per-feature relevance from a trained model's first layer.

A feature's score is the mean, over the units it feeds, of the absolute
posterior-mean weight.  Thresholds come from the largest gap between
log-scores, from the mode of the posterior of v * tau_j, or are given.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import HorseshoeLayerQ, VariationalModel

GAP_TIE_TOL = 1e-9
METHODS = ("gap", "scale_mode", "fixed")


class DegenerateReportError(ValueError):
    pass


class UnsupportedModelError(TypeError):
    pass


def feature_scores(model: VariationalModel) -> np.ndarray:
    """Mean |E_q[W_ij]| over the first layer's output units, per input feature j."""
    return np.abs(model.layers[0].mean_weights()).mean(axis=0)


def scale_modes(model: VariationalModel) -> np.ndarray:
    """Mode of the log-normal posterior of v * tau_j."""
    layer = model.layers[0]
    if not isinstance(layer, HorseshoeLayerQ):
        raise UnsupportedModelError(f"{model.spec.kind.value} has no scale posterior")
    return np.exp(layer.v_mu[0] + layer.tau_mu - layer.v_sigma[0] ** 2 - layer.tau_sigma ** 2)


@dataclass(frozen=True)
class HistBin:
    lo: float
    hi: float
    count: int


@dataclass(frozen=True)
class Histogram:
    bins: tuple[HistBin, ...]
    n_zero: int  # scores equal to zero sit in an underflow bin of their own

    @property
    def counts(self) -> np.ndarray:
        return np.array([b.count for b in self.bins])

    def longest_empty_run(self) -> int:
        """Longest run of consecutive empty bins between two occupied ones."""
        occupied = np.flatnonzero(self.counts > 0)
        if occupied.size < 2:
            return 0
        return int(np.max(np.diff(occupied)) - 1)

    def to_rows(self) -> list[dict]:
        rows = [{"bin_lo": 0.0, "bin_hi": 0.0, "count": self.n_zero}] if self.n_zero else []
        return rows + [{"bin_lo": b.lo, "bin_hi": b.hi, "count": b.count} for b in self.bins]


def log_histogram(scores, n_bins: int = 20) -> Histogram:
    """Histogram with geometrically spaced edges from the smallest positive to the largest score."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and non-negative")
    pos = scores[scores > 0]
    n_zero = int(scores.size - pos.size)
    if pos.size == 0:
        raise DegenerateReportError("all scores are zero")
    lo, hi = float(pos.min()), float(pos.max())
    if lo == hi:
        return Histogram((HistBin(lo, hi, int(pos.size)),), n_zero)
    # bin in log space so that edges are exact powers of the ratio
    log_edges = np.linspace(math.log(lo), math.log(hi), n_bins + 1)
    counts, _ = np.histogram(np.log(pos), bins=log_edges)
    edges = np.exp(log_edges)
    edges[0], edges[-1] = lo, hi
    bins = tuple(HistBin(float(edges[i]), float(edges[i + 1]), int(counts[i]))
                 for i in range(n_bins))
    return Histogram(bins, n_zero)


def gap_threshold(scores) -> float:
    """Geometric midpoint of the widest gap between consecutive distinct log-scores.

    Gaps within GAP_TIE_TOL of the widest count as ties; the first one wins.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    u = np.unique(scores[scores > 0])
    if u.size < 2:
        raise DegenerateReportError("need at least two distinct positive scores")
    gaps = np.diff(np.log(u))
    i = int(np.flatnonzero(gaps >= gaps.max() - GAP_TIE_TOL)[0])
    return float(math.sqrt(u[i] * u[i + 1]))


@dataclass(frozen=True)
class FeatureRelevance:
    name: str
    score: float
    scale_mode: float | None
    relevant: bool


@dataclass
class RelevanceReport:
    features: list[FeatureRelevance]
    threshold: float
    method: str
    histogram: Histogram
    threshold_on: str = "score"

    @property
    def relevant_mask(self) -> np.ndarray:
        return np.array([f.relevant for f in self.features])

    @property
    def scores(self) -> np.ndarray:
        return np.array([f.score for f in self.features])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "threshold": self.threshold,
            "threshold_on": self.threshold_on,
            "features": [{"name": f.name, "score": f.score, "scale_mode": f.scale_mode,
                          "relevant": f.relevant} for f in self.features],
            "histogram": self.histogram.to_rows(),
            "n_zero_scores": self.histogram.n_zero,
        }

    def write(self, out_dir) -> dict[str, Path]:
        """relevance.json, relevance.csv and histogram.csv under ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / "relevance.json", "csv": out / "relevance.csv",
                 "histogram": out / "histogram.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with open(paths["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "score", "scale_mode", "relevant"])
            for f in self.features:
                w.writerow([f.name, repr(f.score),
                            "" if f.scale_mode is None else repr(f.scale_mode),
                            int(f.relevant)])
        with open(paths["histogram"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for row in self.histogram.to_rows():
                w.writerow([repr(row["bin_lo"]), repr(row["bin_hi"]), row["count"]])
        return paths


def relevance_report(model: VariationalModel, names: Sequence[str] | None = None,
                     method: str = "gap", threshold: float | None = None,
                     n_bins: int = 20) -> RelevanceReport:
    """Scores, histogram and relevant flags under one threshold rule.

    gap: widest log-gap of the scores.  scale_mode: the threshold applies to
    the scale modes, taken from their widest log-gap unless ``threshold`` is
    given.  fixed: ``threshold`` on the scores.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    scores = feature_scores(model)
    names = list(names) if names is not None else [f"x{j}" for j in range(scores.size)]
    if len(names) != scores.size:
        raise ValueError(f"{len(names)} names for {scores.size} features")
    is_hs = isinstance(model.layers[0], HorseshoeLayerQ)
    modes = scale_modes(model) if is_hs else None
    on = "score"
    if method == "gap":
        t = gap_threshold(scores)
        flags = scores > t
    elif method == "scale_mode":
        if modes is None:
            raise UnsupportedModelError("scale_mode thresholds need a horseshoe model")
        t = gap_threshold(modes) if threshold is None else float(threshold)
        flags = modes > t
        on = "scale_mode"
    else:
        if threshold is None:
            raise ValueError("method 'fixed' needs a threshold")
        t = float(threshold)
        flags = scores > t
    feats = [FeatureRelevance(n, float(s), None if modes is None else float(modes[j]), bool(r))
             for j, (n, s, r) in enumerate(zip(names, scores, flags))]
    return RelevanceReport(feats, float(t), method, log_histogram(scores, n_bins), on)

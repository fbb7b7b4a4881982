"""Tabular data: schemas, CSV loading, preprocessing, folds and synthetic sets.

Missing values are NaN throughout.  ``preprocess`` fits all statistics on
the training rows only and applies them to every row.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import urllib.request
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .models import Task


class SchemaError(ValueError):
    """Schema is malformed or does not match a data file."""


class DataError(ValueError):
    pass


class FeatureKind(str, Enum):
    CONTINUOUS = "continuous"
    ORDINAL = "ordinal"
    BINARY = "binary"


class Imputation(str, Enum):
    MEAN = "mean"
    ZERO = "zero"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: FeatureKind = FeatureKind.CONTINUOUS
    valid_range: tuple[float, float] | None = None
    open_bounds: tuple[bool, bool] = (False, False)
    impute: Imputation = Imputation.MEAN

    def out_of_range(self, col: np.ndarray) -> np.ndarray:
        if self.valid_range is None:
            return np.zeros(col.shape, dtype=bool)
        lo, hi = self.valid_range
        lo_open, hi_open = self.open_bounds
        with np.errstate(invalid="ignore"):
            below = col <= lo if lo_open else col < lo
            above = col >= hi if hi_open else col > hi
        return below | above

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind.value, "impute": self.impute.value}
        if self.valid_range is not None:
            d["range"] = list(self.valid_range)
            if any(self.open_bounds):
                d["open"] = list(self.open_bounds)
        return d


@dataclass(frozen=True)
class TargetSpec:
    name: str
    task: Task


@dataclass(frozen=True)
class Schema:
    features: tuple[FeatureSpec, ...]
    target: TargetSpec

    def __post_init__(self):
        names = [f.name for f in self.features] + [self.target.name]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate column names: {dupes}")
        for f in self.features:
            if f.valid_range is not None and not f.valid_range[0] <= f.valid_range[1]:
                raise SchemaError(f"feature {f.name!r}: range min exceeds max")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def task(self) -> Task:
        return self.target.task

    def subset(self, keep: Sequence[int]) -> "Schema":
        return Schema(tuple(self.features[i] for i in keep), self.target)

    @classmethod
    def from_dict(cls, raw: dict) -> "Schema":
        try:
            feats = []
            for i, f in enumerate(raw["features"]):
                where = f"features[{i}]"
                try:
                    rng = f.get("range")
                    feats.append(FeatureSpec(
                        name=str(f["name"]),
                        kind=FeatureKind(f.get("kind", "continuous")),
                        valid_range=None if rng is None else (float(rng[0]), float(rng[1])),
                        open_bounds=tuple(bool(b) for b in f.get("open", (False, False))),
                        impute=Imputation(f.get("impute", "mean")),
                    ))
                except (KeyError, ValueError, TypeError, IndexError) as exc:
                    raise SchemaError(f"{where}: {exc}") from None
            t = raw["target"]
            target = TargetSpec(str(t["name"]), Task(t["task"]))
        except SchemaError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"bad schema: {exc!r}") from None
        return cls(tuple(feats), target)

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"features": [f.to_dict() for f in self.features],
                "target": {"name": self.target.name, "task": self.target.task.value}}

    @classmethod
    def continuous(cls, names: Sequence[str], target: str, task: Task) -> "Schema":
        return cls(tuple(FeatureSpec(n) for n in names), TargetSpec(target, Task(task)))


@dataclass(frozen=True)
class Standardization:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    def y_to_original(self, y):
        return np.asarray(y) * self.y_std + self.y_mean


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    schema: Schema
    stats: Standardization | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.ndim != 2 or self.X.shape != (len(self.y), len(self.schema.features)):
            raise DataError(f"X shape {self.X.shape} does not match {len(self.y)} rows x "
                            f"{len(self.schema.features)} features")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def task(self) -> Task:
        return self.schema.task

    def n_missing(self) -> int:
        return int(np.isnan(self.X).sum())

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def select_features(self, keep: Sequence[int]) -> "Dataset":
        keep = list(keep)
        stats = self.stats
        if stats is not None:
            stats = replace(stats, x_mean=stats.x_mean[keep], x_std=stats.x_std[keep])
        return Dataset(self.X[:, keep], self.y, self.schema.subset(keep), stats)

    def y_original(self) -> np.ndarray:
        return self.y if self.stats is None else self.stats.y_to_original(self.y)


# -- CSV --------------------------------------------------------------------

def _cell(text: str) -> float:
    text = text.strip()
    if not text:
        return math.nan
    try:
        return float(text)
    except ValueError:
        return math.nan


def load_csv(path, schema: Schema) -> Dataset:
    """Read a comma-separated file with a header row; unparseable cells become NaN."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise OSError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    col = {}
    for name in schema.names + [schema.target.name]:
        if name not in header:
            raise SchemaError(f"column {name!r} not found in header of {path}")
        col[name] = header.index(name)
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    X = np.full((len(body), len(schema.features)), math.nan)
    y = np.empty(len(body))
    width = len(header)
    for i, r in enumerate(body):
        if len(r) != width:
            raise OSError(f"{path}: row {i + 2} has {len(r)} cells, header has {width}")
        for j, name in enumerate(schema.names):
            X[i, j] = _cell(r[col[name]])
        y[i] = _cell(r[col[schema.target.name]])
    if np.isnan(y).any():
        bad = int(np.flatnonzero(np.isnan(y))[0]) + 2
        raise DataError(f"{path}: missing target value in row {bad}")
    return Dataset(X, y, schema)


# -- preprocessing ----------------------------------------------------------

def preprocess(ds: Dataset, train_idx) -> Dataset:
    """Range filter, impute and standardize every row using train-row statistics.

    Only continuous features are standardized; ordinal and binary columns
    keep their scale.  Regression targets are standardized and the stats
    are kept on the result for mapping predictions back.
    """
    train_idx = np.asarray(train_idx)
    if train_idx.size == 0:
        raise DataError("train_idx is empty")
    X = ds.X.copy()
    d = X.shape[1]
    x_mean = np.zeros(d)
    x_std = np.ones(d)
    for j, f in enumerate(ds.schema.features):
        col = X[:, j]
        col[f.out_of_range(col)] = math.nan
        train_col = col[train_idx]
        present = train_col[~np.isnan(train_col)]
        if f.impute is Imputation.ZERO:
            fill = 0.0
        elif present.size:
            fill = float(present.mean())
        else:
            warnings.warn(f"feature {f.name!r} has no observed training values; imputing 0")
            fill = 0.0
        col[np.isnan(col)] = fill
        if f.kind is FeatureKind.CONTINUOUS:
            train_col = col[train_idx]
            mu, sd = float(train_col.mean()), float(train_col.std())
            if not sd > 0:
                warnings.warn(f"feature {f.name!r} has zero training variance; using std 1")
                sd = 1.0
            col -= mu
            col /= sd
            x_mean[j], x_std[j] = mu, sd
    y = ds.y.copy()
    y_mean, y_std = 0.0, 1.0
    if ds.task is Task.REGRESSION:
        y_mean = float(y[train_idx].mean())
        y_std = float(y[train_idx].std())
        if not y_std > 0:
            warnings.warn("target has zero training variance; using std 1")
            y_std = 1.0
        y = (y - y_mean) / y_std
    return Dataset(X, y, ds.schema, Standardization(x_mean, x_std, y_mean, y_std))


# -- folds ------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    test_sets: tuple[np.ndarray, ...]
    n: int

    def train_idx(self, i: int) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n), self.test_sets[i])

    def folds(self):
        for i, test in enumerate(self.test_sets):
            yield self.train_idx(i), test


def kfold(n: int, k: int, seed) -> FoldPlan:
    """Shuffle 0..n-1 and cut into k test sets whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need n >= k, got n={n}, k={k}")
    perm = np.random.default_rng(seed).permutation(n)
    return FoldPlan(k, seed, tuple(np.sort(t) for t in np.array_split(perm, k)), n)


# -- synthetic sets ---------------------------------------------------------

@dataclass
class SparseLinearData:
    dataset: Dataset
    w_true: np.ndarray


def synth_sparse_linear(n: int = 75, d: int = 512, k_nonzero: int = 20,
                        noise_std: float = 0.005, seed=0) -> SparseLinearData:
    """Unit-norm inputs and a k-sparse weight vector; y = Xw + noise."""
    if not 0 <= k_nonzero <= d:
        raise ValueError("k_nonzero must lie in [0, d]")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    w = np.zeros(d)
    support = rng.choice(d, size=k_nonzero, replace=False)
    w[support] = rng.standard_normal(k_nonzero)
    y = X @ w + noise_std * rng.standard_normal(n)
    schema = Schema.continuous([f"x{j}" for j in range(d)], "y", Task.REGRESSION)
    return SparseLinearData(Dataset(X, y, schema), w)


@dataclass
class RelevanceData:
    dataset: Dataset
    relevant_mask: np.ndarray
    label_score: Callable[[np.ndarray], np.ndarray] | None = None  # X -> latent score
    threshold: float = 0.0  # label = score > threshold


def _influence(Xr, A, c) -> np.ndarray:
    """Mean |d score / d x_j| of score = tanh(Xr A) c, per relevant input."""
    slope = 1.0 - np.tanh(Xr @ A) ** 2
    return np.abs((slope * c) @ A.T).mean(axis=0)


def synth_relevance_classification(n: int, d_relevant: int, d_noise: int, seed=0,
                                   n_hidden: int = 8, balance_iters: int = 50) -> RelevanceData:
    """Binary labels from a random tanh network of the first ``d_relevant`` columns.

    The rows of the input weights are rescaled until every relevant column
    has the same mean absolute influence on the score, so no "relevant"
    feature is relevant in name only.  Labels are thresholded at the median
    score, so classes are balanced.  All columns are i.i.d. standard normal.
    """
    if n < 100:
        raise ValueError("n must be >= 100")
    if d_relevant < 1 or d_noise < 0:
        raise ValueError("need d_relevant >= 1 and d_noise >= 0")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d_relevant + d_noise))
    Xr = X[:, :d_relevant]
    A = rng.standard_normal((d_relevant, n_hidden))
    A /= np.linalg.norm(A, axis=0, keepdims=True)  # each hidden unit sees a unit-norm direction
    c = rng.standard_normal(n_hidden)
    for _ in range(balance_iters):
        infl = _influence(Xr, A, c)
        A *= (infl.mean() / infl)[:, None]
    def label_score(Z):
        return np.tanh(np.asarray(Z, dtype=float)[:, :d_relevant] @ A) @ c

    score = label_score(X)
    threshold = float(np.median(score))
    y = (score > threshold).astype(float)
    mask = np.arange(d_relevant + d_noise) < d_relevant
    names = [f"r{j}" for j in range(d_relevant)] + [f"n{j}" for j in range(d_noise)]
    schema = Schema.continuous(names, "label", Task.CLASSIFICATION)
    return RelevanceData(Dataset(X, y, schema), mask, label_score, threshold)


# -- builtin UCI sets ---------------------------------------------------------

DATA_DIR_ENV = "HSBNN_DATA_DIR"


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, Path.home() / ".cache" / "hsbnn"))


def _split_ws(text: str) -> list[list[str]]:
    return [line.split() for line in text.splitlines() if line.strip()]


def _split_semicolon(text: str) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text), delimiter=";"))
    return [r for r in rows[1:] if r]  # first row is a header


@dataclass(frozen=True)
class Builtin:
    name: str
    url: str
    columns: tuple[str, ...]
    target: str
    parse_raw: object
    sha256: str
    kinds: dict = field(default_factory=dict)

    @property
    def filename(self) -> str:
        return f"{self.name}.csv"

    def schema(self) -> Schema:
        feats = tuple(FeatureSpec(c, FeatureKind(self.kinds.get(c, "continuous")))
                      for c in self.columns if c != self.target)
        return Schema(feats, TargetSpec(self.target, Task.REGRESSION))


BUILTINS = {
    "boston": Builtin(
        "boston",
        "https://archive.ics.uci.edu/ml/machine-learning-databases/housing/housing.data",
        ("CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX", "PTRATIO",
         "B", "LSTAT", "MEDV"),
        "MEDV", _split_ws,
        "def728f3dfad742a04650803561a9cab051fcb03e1b646fe0145d1017e5aeb7f",
        {"CHAS": "binary"},
    ),
    "yacht": Builtin(
        "yacht",
        "https://archive.ics.uci.edu/ml/machine-learning-databases/00243/yacht_hydrodynamics.data",
        ("longitudinal_position", "prismatic_coefficient", "length_displacement_ratio",
         "beam_draught_ratio", "length_beam_ratio", "froude_number", "residuary_resistance"),
        "residuary_resistance", _split_ws,
        "",  # no digest pinned yet: the file could not be obtained when the others were
    ),
    "wine": Builtin(
        "wine",
        "https://archive.ics.uci.edu/ml/machine-learning-databases/wine-quality/"
        "winequality-red.csv",
        ("fixed_acidity", "volatile_acidity", "citric_acid", "residual_sugar", "chlorides",
         "free_sulfur_dioxide", "total_sulfur_dioxide", "density", "pH", "sulphates",
         "alcohol", "quality"),
        "quality", _split_semicolon,
        "0b1d1fa8980c722efa971b88513ab4e41c8a03a8ea996817b69e7a74999a715e",
    ),
}


def canonical_csv(builtin: Builtin, raw_text: str) -> str:
    """Comma-separated text with a header; numbers written as Python float reprs."""
    rows = builtin.parse_raw(raw_text)
    out = io.StringIO()
    out.write(",".join(builtin.columns) + "\n")
    for i, r in enumerate(rows):
        if len(r) != len(builtin.columns):
            raise DataError(f"{builtin.name}: raw row {i + 1} has {len(r)} fields, "
                            f"expected {len(builtin.columns)}")
        out.write(",".join(repr(float(v.strip().strip('"'))) for v in r) + "\n")
    return out.getvalue()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def fetch(name: str, dest: Path | None = None, source=None, verify: bool = True) -> Path:
    """Write the canonical CSV for a builtin set and check it against the pinned digest.

    ``source`` is a local copy of the raw UCI file; without it the file is
    downloaded from the UCI archive.
    """
    if name not in BUILTINS:
        raise DataError(f"unknown dataset {name!r}; choose from {sorted(BUILTINS)}")
    b = BUILTINS[name]
    if source is not None:
        raw = Path(source).read_text(encoding="utf-8")
    else:
        with urllib.request.urlopen(b.url, timeout=60) as resp:
            raw = resp.read().decode("utf-8")
    text = canonical_csv(b, raw)
    digest = sha256_text(text)
    if verify and b.sha256 and digest != b.sha256:
        raise DataError(f"{name}: checksum mismatch (got {digest}, pinned {b.sha256})")
    if verify and not b.sha256:
        warnings.warn(f"{name}: no pinned checksum; wrote unverified file (sha256 {digest})")
    dest = Path(dest) if dest is not None else data_dir()
    dest.mkdir(parents=True, exist_ok=True)
    path = dest / b.filename
    path.write_text(text, encoding="utf-8")
    return path


def load_builtin(name: str, directory: Path | None = None) -> Dataset:
    if name not in BUILTINS:
        raise DataError(f"unknown dataset {name!r}; choose from {sorted(BUILTINS)}")
    b = BUILTINS[name]
    path = (Path(directory) if directory is not None else data_dir()) / b.filename
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the fetch command for {name!r} first")
    return load_csv(path, b.schema())

"""Command-line entry point: bench, recover, relevance, check and fetch.

Every command takes ``--config <json>`` (optional for ``check`` and
``fetch``), ``--seed`` and ``--out``.  Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__
from . import checks as checks_mod
from .data import (BUILTINS, Dataset, DataError, Schema, SchemaError, data_dir, fetch, kfold,
                   load_builtin, load_csv, preprocess, synth_relevance_classification,
                   synth_sparse_linear)
from .metrics import (aggregate, auroc, confusion, error_rate, nll_from_samples, rmse,
                      UndefinedMetricError)
from .models import (CheckpointError, ModelKind, ModelSpec, SpecError, Task, init_model,
                     load_checkpoint, predictive_samples, save_checkpoint)
from .relevance import METHODS, DegenerateReportError, relevance_report
from .training import TrainConfig, TrainingError, fit

log = logging.getLogger("hsbnn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the offending field path."""


# -- configuration ------------------------------------------------------------

def _get(raw: dict, key: str, path: str, kind, default=None, required=False):
    if key not in raw:
        if required:
            raise ConfigError(f"{path}.{key}: required field missing")
        return default
    val = raw[key]
    ok = isinstance(val, kind) and not (kind in (int, (int, float)) and isinstance(val, bool))
    if not ok:
        raise ConfigError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}, "
                          f"got {type(val).__name__}")
    return val


def _reject_unknown(raw: dict, allowed, path: str) -> None:
    extra = sorted(set(raw) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}: unknown field")


@dataclass
class RunConfig:
    dataset: dict
    models: list[str]
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    cv_folds: int = 10
    seed: int = 0
    output_dir: str | None = None
    relevance: dict = field(default_factory=lambda: {"method": "gap", "threshold": None,
                                                     "n_bins": 20})
    recovery: dict = field(default_factory=dict)
    save_checkpoints: bool = True
    base_dir: Path = Path(".")

    TOP_LEVEL = ("dataset", "models", "model", "train", "cv_folds", "seed", "output_dir",
                 "relevance", "recovery", "save_checkpoints")

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path


def parse_config(raw: Any, base_dir: Path = Path("."), need_dataset: bool = True) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("$: config must be a JSON object")
    _reject_unknown(raw, RunConfig.TOP_LEVEL, "$")

    ds = _get(raw, "dataset", "$", dict, default=None, required=need_dataset) or {}
    _reject_unknown(ds, ("builtin", "csv", "schema", "generator", "params"), "$.dataset")
    if need_dataset:
        sources = [k for k in ("builtin", "csv", "generator") if k in ds]
        if len(sources) != 1:
            raise ConfigError("$.dataset: give exactly one of builtin, csv or generator")
        if "builtin" in ds and _get(ds, "builtin", "$.dataset", str) not in BUILTINS:
            raise ConfigError(f"$.dataset.builtin: unknown dataset {ds['builtin']!r}")
        if "csv" in ds:
            _get(ds, "csv", "$.dataset", str)
            _get(ds, "schema", "$.dataset", str, required=True)
        if "generator" in ds and _get(ds, "generator", "$.dataset", str) != "relevance":
            raise ConfigError(f"$.dataset.generator: unknown generator {ds['generator']!r}")
        _get(ds, "params", "$.dataset", dict, default={})

    models = _get(raw, "models", "$", list, default=["HorseshoeBNN"])
    for i, m in enumerate(models):
        try:
            ModelKind(m)
        except ValueError:
            raise ConfigError(f"$.models[{i}]: unknown model kind {m!r}; choose from "
                              f"{[k.value for k in ModelKind]}") from None
    model = _get(raw, "model", "$", dict, default={})
    _reject_unknown(model, ("n_hidden", "b0", "bg", "sigma_prior"), "$.model")
    for key in ("b0", "bg", "sigma_prior"):
        v = _get(model, key, "$.model", (int, float))
        if v is not None and not v > 0:
            raise ConfigError(f"$.model.{key}: must be > 0")
    nh = _get(model, "n_hidden", "$.model", int)
    if nh is not None and nh < 1:
        raise ConfigError("$.model.n_hidden: must be >= 1")

    train_raw = _get(raw, "train", "$", dict, default={})
    names = {f.name for f in fields(TrainConfig)}
    _reject_unknown(train_raw, names, "$.train")
    for key, val in train_raw.items():
        want = (int, float) if key in ("lr", "adam_beta1", "adam_beta2", "adam_eps") else int
        _get(train_raw, key, "$.train", want)
    try:
        train = TrainConfig(**train_raw)
    except ValueError as exc:
        raise ConfigError(f"$.train: {exc}") from None

    folds = _get(raw, "cv_folds", "$", int, default=10)
    if folds < 2:
        raise ConfigError("$.cv_folds: must be >= 2")
    seed = _get(raw, "seed", "$", int, default=0)
    out = _get(raw, "output_dir", "$", str)

    rel = dict(RunConfig.__dataclass_fields__["relevance"].default_factory())
    rel_raw = _get(raw, "relevance", "$", dict, default={})
    _reject_unknown(rel_raw, ("method", "threshold", "n_bins", "checkpoint"), "$.relevance")
    rel.update(rel_raw)
    if rel["method"] not in METHODS:
        raise ConfigError(f"$.relevance.method: must be one of {list(METHODS)}")
    if rel["method"] == "fixed" and rel.get("threshold") is None:
        raise ConfigError("$.relevance.threshold: required for method 'fixed'")
    if rel.get("threshold") is not None:
        _get(rel, "threshold", "$.relevance", (int, float))
    _get(rel, "n_bins", "$.relevance", int)

    rec = _get(raw, "recovery", "$", dict, default={})
    _reject_unknown(rec, ("n_repeats", "n", "d", "k_nonzero", "noise_std"), "$.recovery")
    for key in ("n_repeats", "n", "d", "k_nonzero"):
        v = _get(rec, key, "$.recovery", int)
        if v is not None and v < 1:
            raise ConfigError(f"$.recovery.{key}: must be >= 1")
    ns = _get(rec, "noise_std", "$.recovery", (int, float))
    if ns is not None and ns < 0:
        raise ConfigError("$.recovery.noise_std: must be >= 0")

    save = _get(raw, "save_checkpoints", "$", bool, default=True)
    return RunConfig(ds, list(models), model, train, folds, seed, out, rel, rec, save, base_dir)


def load_config(path: str | None, need_dataset: bool = True) -> tuple[RunConfig, bytes | None]:
    if path is None:
        return parse_config({}, need_dataset=False), None
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"$: cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"$: config is not valid JSON: {exc}") from None
    return parse_config(raw, p.parent, need_dataset), data


def load_dataset(cfg: RunConfig) -> tuple[Dataset, np.ndarray | None]:
    """The configured dataset and, for the synthetic relevance set, its true mask."""
    ds = cfg.dataset
    if "builtin" in ds:
        return load_builtin(ds["builtin"]), None
    if "csv" in ds:
        schema = Schema.load(cfg.resolve(ds["schema"]))
        return load_csv(cfg.resolve(ds["csv"]), schema), None
    params = {"n": 2000, "d_relevant": 10, "d_noise": 20, "seed": cfg.seed}
    params.update(ds.get("params", {}))
    gen = synth_relevance_classification(**params)
    return gen.dataset, gen.relevant_mask


def make_spec(cfg: RunConfig, kind: str, task: Task, n_features: int) -> ModelSpec:
    m = cfg.model
    return ModelSpec.create(kind, task, n_features, m.get("n_hidden", 50),
                            b0=float(m.get("b0", 1.0)), bg=float(m.get("bg", 1.0)),
                            sigma_prior=float(m.get("sigma_prior", 1.0)))


# -- output helpers -------------------------------------------------------------

def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def version_info() -> dict:
    return {"hsbnn": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _prepare_out(out: Path, config_bytes: bytes | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if config_bytes is not None:
        (out / "config.json").write_bytes(config_bytes)
    _dump_json(out / "version.json", version_info())


# -- bench ------------------------------------------------------------------------

@dataclass
class FoldOutcome:
    metrics: dict
    predictions: list
    confusion: dict | None
    history: list


def evaluate(model, ds: Dataset, test_idx, n_samples: int, rng) -> tuple[dict, np.ndarray,
                                                                          np.ndarray, dict | None]:
    """Metrics on the test rows, in original target units for regression."""
    X, y = ds.X[test_idx], ds.y[test_idx]
    samples = predictive_samples(model, X, n_samples, rng)
    if ds.task is Task.REGRESSION:
        st = ds.stats
        mean = st.y_to_original(samples.mean(axis=0))
        sd_std = np.sqrt(samples.var(axis=0) + math.exp(2.0 * model.obs_log_sigma[0]))
        truth = st.y_to_original(y)
        metrics = {"rmse": rmse(mean, truth),
                   "nll": nll_from_samples(samples, y, Task.REGRESSION,
                                           math.exp(model.obs_log_sigma[0]), st.y_std)}
        return metrics, mean, sd_std * st.y_std, None
    probs = samples.mean(axis=0)
    metrics = {"error_rate": error_rate(probs, y),
               "nll": nll_from_samples(samples, y, Task.CLASSIFICATION)}
    try:
        metrics["auroc"] = auroc(probs, y)
    except UndefinedMetricError:
        metrics["auroc"] = math.nan
    return metrics, probs, samples.std(axis=0), confusion(probs, y).to_dict()


def run_fold(cfg: RunConfig, kind: str, ds: Dataset, train_idx, test_idx, fold: int,
             seed: int, ckpt_dir: Path | None):
    pre = preprocess(ds, train_idx)
    spec = make_spec(cfg, kind, ds.task, ds.d)
    train_cfg = TrainConfig(**{**cfg.train.to_dict(), "seed": seed})
    result = fit(init_model(spec, seed), pre.X[train_idx], pre.y[train_idx], train_cfg)
    metrics, mean, sd, conf = evaluate(result.model, pre, test_idx, cfg.train.test_mc_samples,
                                       np.random.default_rng(seed + 1))
    truth = ds.y[test_idx]
    preds = [(int(i), float(t), float(m), float(s)) for i, t, m, s in zip(test_idx, truth, mean, sd)]
    if ckpt_dir is not None:
        save_checkpoint(result.model, ckpt_dir / f"{kind}_fold{fold}.json",
                        feature_names=ds.schema.names, fold=fold)
    return FoldOutcome(metrics, preds, conf, result.history.elbo)


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    ds, _ = load_dataset(cfg)
    plan = kfold(ds.n, cfg.cv_folds, cfg.seed)
    ckpt_dir = out / "checkpoints" if cfg.save_checkpoints else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    summary, confusions, histories, failures, pred_rows = {}, {}, {}, [], []
    for kind in cfg.models:
        per_metric: dict[str, list] = {}
        confusions[kind] = []
        histories[kind] = []
        for fold, (train_idx, test_idx) in enumerate(plan.folds()):
            seed = cfg.seed * 1000 + fold
            try:
                res = run_fold(cfg, kind, ds, train_idx, test_idx, fold, seed, ckpt_dir)
            except TrainingError as exc:
                log.error("%s fold %d: %s", kind, fold, exc)
                failures.append({"model": kind, "fold": fold, "error": str(exc)})
                continue
            log.info("%s fold %d: %s", kind, fold, res.metrics)
            for name, v in res.metrics.items():
                per_metric.setdefault(name, []).append(v)
            pred_rows += [(kind, fold, *p) for p in res.predictions]
            if res.confusion is not None:
                confusions[kind].append({"fold": fold, **res.confusion})
            histories[kind].append({"fold": fold, "elbo": res.history})
        summary[kind] = {name: aggregate(vals).to_dict() if len(vals) >= 2 else
                         {"values": vals, "mean": float(np.mean(vals)) if vals else math.nan,
                          "standard_error": math.nan}
                         for name, vals in sorted(per_metric.items())}

    _dump_json(out / "metrics.json", {"folds": cfg.cv_folds, "seed": cfg.seed,
                                      "n": ds.n, "d": ds.d, "task": ds.task.value,
                                      "models": summary, "failures": failures,
                                      "partial": bool(failures)})
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "mean", "standard_error", "n_folds"])
        for kind, metrics in summary.items():
            for name, s in metrics.items():
                w.writerow([kind, name, repr(s["mean"]), repr(s["standard_error"]),
                            len(s["values"])])
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "fold", "index", "y_true", "pred_mean", "pred_std"])
        for row in pred_rows:
            w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4]), repr(row[5])])
    if ds.task is Task.CLASSIFICATION:
        total = {k: {c: sum(f[c] for f in v) for c in ("tp", "fp", "tn", "fn")}
                 for k, v in confusions.items()}
        _dump_json(out / "confusion.json", {"per_fold": confusions, "total": total})
    _dump_json(out / "histories.json", histories)
    return EXIT_FAIL if failures else EXIT_OK


# -- recover ------------------------------------------------------------------------

RECOVERY_DEFAULTS = {"n_repeats": 20, "n": 75, "d": 512, "k_nonzero": 20, "noise_std": 0.005}


def reconstruction_error(w_hat, w_true) -> float:
    w_hat, w_true = np.asarray(w_hat, float), np.asarray(w_true, float)
    return float(np.linalg.norm(w_hat - w_true) / np.linalg.norm(w_true))


def recover_once(params: dict, train_cfg: TrainConfig, seed: int, b0=1.0, bg=1.0):
    """Fit a LinearHorseshoe model to one sparse problem; returns (w_hat, w_true, error).

    Inputs and targets are used as generated, without standardization.
    """
    data = synth_sparse_linear(params["n"], params["d"], params["k_nonzero"],
                               params["noise_std"], seed)
    spec = ModelSpec(ModelKind.LINEAR_HORSESHOE, Task.REGRESSION, params["d"], b0=b0, bg=bg)
    res = fit(init_model(spec, seed), data.dataset.X, data.dataset.y,
              TrainConfig(**{**train_cfg.to_dict(), "seed": seed}))
    w_hat = res.model.layers[0].mean_weights()[0]
    return w_hat, data.w_true, reconstruction_error(w_hat, data.w_true)


def cmd_recover(cfg: RunConfig, out: Path) -> int:
    params = {**RECOVERY_DEFAULTS, **cfg.recovery}
    if params["k_nonzero"] > params["d"]:
        raise ConfigError("$.recovery.k_nonzero: must not exceed d")
    b0, bg = float(cfg.model.get("b0", 1.0)), float(cfg.model.get("bg", 1.0))
    errors, first = [], None
    for r in range(params["n_repeats"]):
        w_hat, w_true, err = recover_once(params, cfg.train, cfg.seed + r, b0, bg)
        log.info("repeat %d: relative error %.4f", r, err)
        errors.append(err)
        if first is None:
            first = (w_true, w_hat)
    arr = np.asarray(errors)
    _dump_json(out / "recovery.json", {
        "params": params, "epochs": cfg.train.epochs, "errors": errors,
        "mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
    })
    with open(out / "signal.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "w_true", "w_hat"])
        for j, (t, h) in enumerate(zip(*first)):
            w.writerow([j, repr(float(t)), repr(float(h))])
    return EXIT_OK


# -- relevance -------------------------------------------------------------------------

def cmd_relevance(cfg: RunConfig, out: Path, checkpoint: str | None) -> int:
    path = checkpoint or cfg.relevance.get("checkpoint")
    if path is None:
        raise ConfigError("$.relevance.checkpoint: no checkpoint given (use --checkpoint)")
    path = Path(path) if checkpoint else cfg.resolve(path)
    if not path.exists():
        raise ConfigError(f"$.relevance.checkpoint: {path} does not exist")
    try:
        model, raw = load_checkpoint(path)
    except (CheckpointError, KeyError, json.JSONDecodeError, SpecError) as exc:
        raise ConfigError(f"$.relevance.checkpoint: unreadable checkpoint ({exc})") from None
    if cfg.models and model.spec.kind.value not in cfg.models:
        raise ConfigError(f"$.models: checkpoint holds {model.spec.kind.value}, config asks "
                          f"for {cfg.models}")
    report = relevance_report(model, raw.get("feature_names"), cfg.relevance["method"],
                              cfg.relevance.get("threshold"), cfg.relevance.get("n_bins", 20))
    report.write(out)
    return EXIT_OK


# -- check ------------------------------------------------------------------------------

def cmd_check(cfg: RunConfig, out: Path, only=None) -> int:
    results = checks_mod.run_checks(only, seed=cfg.seed)
    _dump_json(out / "diagnostics.json", {"passed": all(r.passed for r in results),
                                          "checks": [r.to_dict() for r in results]})
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# -- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsbnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hsbnn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("bench", help="k-fold benchmark of one or more model kinds"))
    common(sub.add_parser("recover", help="sparse-signal recovery with LinearHorseshoe"))
    rel = sub.add_parser("relevance", help="feature relevance report from a checkpoint")
    common(rel)
    rel.add_argument("--checkpoint", help="model checkpoint JSON")
    chk = sub.add_parser("check", help="gradient, KL, sampler and metric self-checks")
    common(chk, config_required=False)
    chk.add_argument("--only", nargs="+", choices=sorted(checks_mod.CHECKS))
    fet = sub.add_parser("fetch", help="write canonical CSVs for builtin UCI datasets")
    fet.add_argument("names", nargs="+", choices=sorted(BUILTINS))
    fet.add_argument("--from-file", dest="from_file",
                     help="local copy of the raw UCI file (one dataset only)")
    fet.add_argument("--out", help=f"target directory (default: $HSBNN_DATA_DIR or {data_dir()})")
    fet.add_argument("--config", help=argparse.SUPPRESS)
    fet.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    fet.add_argument("-v", "--verbose", action="store_true")
    return p


def _run(args) -> int:
    if args.command == "fetch":
        if args.from_file and len(args.names) != 1:
            raise ConfigError("--from-file: give exactly one dataset name")
        for name in args.names:
            path = fetch(name, Path(args.out) if args.out else None, args.from_file)
            print(path)
        return EXIT_OK

    need_ds = args.command == "bench"
    cfg, raw_bytes = load_config(args.config, need_dataset=need_ds)
    if args.seed is not None:
        cfg.seed = args.seed
    out_s = args.out or cfg.output_dir
    if out_s is None:
        raise ConfigError("$.output_dir: no output directory (set it or pass --out)")
    out = Path(args.out) if args.out else cfg.resolve(out_s)
    _prepare_out(out, raw_bytes)
    if args.command == "bench":
        return cmd_bench(cfg, out)
    if args.command == "recover":
        return cmd_recover(cfg, out)
    if args.command == "relevance":
        return cmd_relevance(cfg, out, args.checkpoint)
    return cmd_check(cfg, out, args.only)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, DataError, DegenerateReportError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

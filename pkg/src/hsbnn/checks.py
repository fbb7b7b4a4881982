"""Self-checks against independent oracles, as run by the ``check`` command.

Each check returns a ``CheckResult`` with the numbers it compared, so the
diagnostics file shows how close things were and not only whether they passed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import training
from .distributions import halfcauchy_hierarchy_sample
from .gradients import finite_diff_check
from .metrics import auroc
from .models import HorseshoeLayerQ, ModelKind, ModelSpec, Task, draw_noise, init_model


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "details": self.details}


def _randomize(model, rng, spread=0.5):
    """Move every trainable and auxiliary parameter away from its initial value."""
    model.set_vector(model.vector() + spread * rng.standard_normal(model.vector().size))
    for layer in model.horseshoe_layers():
        for name in layer.AUX:
            arr = getattr(layer, name)
            arr[...] = rng.uniform(0.3, 2.0, size=arr.shape)
    return model


# -- (a) ELBO gradients -----------------------------------------------------

def check_gradients(n_instances: int = 20, tol_rel: float = 1e-3, h: float = 1e-5,
                    seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, failures, count = 0.0, [], 0
    for kind in ModelKind:
        for i in range(n_instances):
            task = Task.REGRESSION if i % 2 == 0 else Task.CLASSIFICATION
            d = int(rng.integers(1, 5))
            spec = ModelSpec.create(kind, task, d, int(rng.integers(1, 6)),
                                    b0=float(rng.uniform(0.5, 2.0)), bg=float(rng.uniform(0.5, 2.0)),
                                    sigma_prior=float(rng.uniform(0.5, 2.0)))
            model = _randomize(init_model(spec, int(rng.integers(1 << 31))), rng)
            M = int(rng.integers(1, 9))
            X = rng.standard_normal((M, d))
            y = rng.standard_normal(M) if task is Task.REGRESSION else (rng.random(M) < 0.5) * 1.0
            loss = training.FrozenNegElbo(model, X, y, n_total=M + int(rng.integers(0, 20)),
                                          n_samples=int(rng.integers(1, 4)),
                                          seed=int(rng.integers(1 << 31)))
            rep = finite_diff_check(loss, model.vector(), h=h, tol_rel=tol_rel)
            count += 1
            worst = max(worst, rep.max_rel_diff)
            if not rep.passed:
                failures.append({"kind": kind.value, "task": task.value, "instance": i,
                                 "max_rel_diff": rep.max_rel_diff, "block": rep.worst_block})
    return CheckResult("elbo_gradients", not failures,
                       {"instances": count, "tol_rel": tol_rel, "worst_max_rel_diff": worst,
                        "failures": failures})


# -- (b) horseshoe KL against Monte Carlo ----------------------------------

def _log_lognormal(x, mu, sigma):
    return stats.lognorm.logpdf(x, s=sigma, scale=np.exp(mu))


def _log_scale_prior(s, c):
    """log p(s) when s^2 | c ~ IG(1/2, 1/c): density of s^2 times the Jacobian 2s."""
    return stats.invgamma.logpdf(s * s, a=0.5, scale=1.0 / c) + np.log(2.0 * s)


def mc_horseshoe_kl(layer: HorseshoeLayerQ, b0: float, bg: float, sigma_prior: float,
                    n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) of E_q[log q - log p] for a 1x1 layer."""
    if layer.shape != (1, 1):
        raise ValueError("the oracle handles 1x1 layers only")
    f = lambda a: float(np.ravel(a)[0])
    mb, sb = f(layer.beta_mu), f(layer.beta_sigma)
    mt, st = f(layer.tau_mu), f(layer.tau_sigma)
    mv, sv = f(layer.v_mu), f(layer.v_sigma)
    mc, sc = f(layer.bias_mu), f(layer.bias_sigma)
    la, lr = f(layer.lambda_shape), f(layer.lambda_rate)
    ta, tr = f(layer.theta_shape), f(layer.theta_rate)

    beta = rng.normal(mb, sb, n)
    tau = np.exp(rng.normal(mt, st, n))
    v = np.exp(rng.normal(mv, sv, n))
    lam = stats.invgamma.rvs(la, scale=lr, size=n, random_state=rng)
    theta = stats.invgamma.rvs(ta, scale=tr, size=n, random_state=rng)
    bias = rng.normal(mc, sc, n)

    log_q = (stats.norm.logpdf(beta, mb, sb) + _log_lognormal(tau, mt, st)
             + _log_lognormal(v, mv, sv) + stats.invgamma.logpdf(lam, la, scale=lr)
             + stats.invgamma.logpdf(theta, ta, scale=tr) + stats.norm.logpdf(bias, mc, sc))
    log_p = (stats.norm.logpdf(beta, 0.0, 1.0) + _log_scale_prior(tau, lam)
             + _log_scale_prior(v, theta)
             + stats.invgamma.logpdf(lam, 0.5, scale=1.0 / b0**2)
             + stats.invgamma.logpdf(theta, 0.5, scale=1.0 / bg**2)
             + stats.norm.logpdf(bias, 0.0, sigma_prior))
    diff = log_q - log_p
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n))


def check_kl(n_configs: int = 10, n_samples: int = 10**6, n_se: float = 3.0,
             seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    rows, ok = [], True
    for i in range(n_configs):
        b0, bg = float(rng.uniform(0.3, 3.0)), float(rng.uniform(0.3, 3.0))
        spec = ModelSpec(ModelKind.LINEAR_HORSESHOE, Task.REGRESSION, 1, b0=b0, bg=bg)
        layer = _randomize(init_model(spec, i), rng, spread=0.7).layers[0]
        analytic = training.kl_horseshoe_layer(layer, b0, bg, spec.sigma_prior)
        mean, se = mc_horseshoe_kl(layer, b0, bg, spec.sigma_prior, n_samples, rng)
        z = abs(analytic - mean) / se
        ok &= bool(z < n_se)
        rows.append({"analytic": analytic, "mc_mean": mean, "mc_se": se, "z": z})
    return CheckResult("horseshoe_kl_vs_mc", ok,
                       {"n_samples": n_samples, "n_se": n_se, "configs": rows,
                        "max_z": max(r["z"] for r in rows)})


# -- (c) half-Cauchy sampler --------------------------------------------------

def check_halfcauchy(scales=(0.5, 1.0, 3.0), n: int = 10**5, limit: float = 0.01,
                     seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    rows = []
    for b in scales:
        x = halfcauchy_hierarchy_sample(b, n, rng)
        res = stats.kstest(x, stats.halfcauchy(scale=b).cdf)
        rows.append({"b": b, "ks_statistic": float(res.statistic), "p_value": float(res.pvalue)})
    return CheckResult("halfcauchy_ks", all(r["ks_statistic"] < limit for r in rows),
                       {"n": n, "limit": limit, "results": rows})


# -- (d) auxiliary updates ----------------------------------------------------

def check_aux_updates(n_configs: int = 20, n_samples: int = 2000, seed: int = 0) -> CheckResult:
    """The closed-form auxiliary update must not lower the ELBO (fixed noise draws)."""
    rng = np.random.default_rng(seed)
    rows, ok = [], True
    for i in range(n_configs):
        kind = ModelKind.HORSESHOE_BNN if i % 2 else ModelKind.LINEAR_HORSESHOE
        d = int(rng.integers(1, 6))
        spec = ModelSpec.create(kind, Task.REGRESSION, d, 3, b0=float(rng.uniform(0.3, 3.0)),
                                bg=float(rng.uniform(0.3, 3.0)))
        model = _randomize(init_model(spec, i), rng)
        X = rng.standard_normal((10, d))
        y = rng.standard_normal(10)
        noise = draw_noise(model, rng, n_samples)
        before = training.neg_elbo_and_grad(model, X, y, 10, noise, need_grad=False)[2].elbo
        training.update_model_auxiliaries(model)
        after = training.neg_elbo_and_grad(model, X, y, 10, noise, need_grad=False)[2].elbo
        ok &= bool(after >= before - 1e-9 * max(1.0, abs(before)))
        rows.append({"before": before, "after": after})
    return CheckResult("aux_update_ascent", ok, {"n_samples": n_samples, "configs": rows})


# -- (e) AUROC ----------------------------------------------------------------

def brute_force_auroc(scores, labels) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels != 1]
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def check_auroc(n_instances: int = 100, max_n: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(2, max_n + 1))
        labels = (rng.random(n) < rng.uniform(0.1, 0.9)).astype(float)
        labels[:2] = [0.0, 1.0]  # both classes present
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding makes ties
        worst = max(worst, abs(auroc(scores, labels) - brute_force_auroc(scores, labels)))
    return CheckResult("auroc_vs_bruteforce", worst < 1e-12,
                       {"instances": n_instances, "max_abs_diff": worst})


CHECKS = {
    "gradients": check_gradients,
    "kl": check_kl,
    "halfcauchy": check_halfcauchy,
    "aux": check_aux_updates,
    "auroc": check_auroc,
}


def run_checks(names=None, seed: int = 0) -> list[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks {unknown}; choose from {sorted(CHECKS)}")
    return [CHECKS[n](seed=seed) for n in names]

import csv
import json
import math

import numpy as np
import pytest
from scipy import stats

from hsbnn.gradients import softplus_inv
from hsbnn.models import ModelSpec, init_model
from hsbnn.relevance import (DegenerateReportError, UnsupportedModelError, feature_scores,
                             gap_threshold, log_histogram, relevance_report, scale_modes)


def _hs_model(d=4, h=3, seed=0):
    return init_model(ModelSpec.create("HorseshoeBNN", "classification", d, h), seed)


def test_scores_vanish_when_tau_collapses():
    m = _hs_model()
    m.layers[0].tau_mu[2] = -800.0
    s = feature_scores(m)
    assert s[2] == 0.0 and np.all(np.delete(s, 2) > 0)


def test_scores_linear_gaussian():
    m = init_model(ModelSpec.create("LinearGaussian", "regression", 2), 0)
    m.layers[0].weight_mu[:] = [[1.0, -2.0]]
    np.testing.assert_array_equal(feature_scores(m), [1.0, 2.0])


def test_scores_average_over_hidden_units():
    m = init_model(ModelSpec.create("GaussianBNN", "regression", 2, 2), 0)
    m.layers[0].weight_mu[:] = [[1.0, -4.0], [-3.0, 0.0]]
    np.testing.assert_array_equal(feature_scores(m), [2.0, 2.0])


def test_histogram_edges_are_geometric():
    scores = np.geomspace(1e-6, 1.0, 30)
    hist = log_histogram(scores, 12)
    edges = np.array([b.lo for b in hist.bins] + [hist.bins[-1].hi])
    np.testing.assert_allclose(edges[1:] / edges[:-1], (1 / 1e-6) ** (1 / 12), rtol=1e-12)
    assert hist.counts.sum() == 30 and hist.n_zero == 0


def test_histogram_single_value_and_zeros():
    hist = log_histogram([0.3, 0.3, 0.0], 10)
    assert len(hist.bins) == 1 and hist.counts.tolist() == [2] and hist.n_zero == 1
    assert hist.to_rows()[0] == {"bin_lo": 0.0, "bin_hi": 0.0, "count": 1}
    with pytest.raises(DegenerateReportError):
        log_histogram([0.0, 0.0])
    with pytest.raises(ValueError):
        log_histogram([-1.0, 1.0])


def test_histogram_empty_run():
    hist = log_histogram([1e-6, 2e-6, 0.5, 1.0], 10)
    assert hist.longest_empty_run() >= 2


def test_gap_threshold_examples():
    t = gap_threshold([1e-6, 1e-6, 0.1, 0.2])
    assert t == pytest.approx(math.sqrt(1e-6 * 0.1)) and t == pytest.approx(3.16e-4, rel=1e-3)
    # equal log-gaps: the first one wins
    assert gap_threshold([1.0, 10.0, 100.0, 1000.0]) == pytest.approx(math.sqrt(10.0))
    with pytest.raises(DegenerateReportError):
        gap_threshold([0.0, 0.5, 0.5])


def test_scale_modes_examples():
    m = _hs_model()
    L = m.layers[0]
    L.v_mu[:], L.v_rho[:] = 0.0, softplus_inv(1e-9)
    L.tau_mu[:], L.tau_rho[:] = 0.0, softplus_inv(1e-9)
    np.testing.assert_allclose(scale_modes(m), 1.0)
    L.v_rho[:], L.tau_rho[:] = softplus_inv(math.sqrt(0.5)), softplus_inv(math.sqrt(0.5))
    L.tau_mu[:] = 1.0
    np.testing.assert_allclose(scale_modes(m), 1.0, rtol=1e-12)
    with pytest.raises(UnsupportedModelError):
        scale_modes(init_model(ModelSpec.create("GaussianBNN", "regression", 2, 2), 0))


def test_scale_mode_matches_kde_peak():
    m = init_model(ModelSpec.create("LinearHorseshoe", "regression", 1), 0)
    L = m.layers[0]
    L.v_mu[:], L.v_rho[:] = 0.3, softplus_inv(0.25)
    L.tau_mu[:], L.tau_rho[:] = -0.2, softplus_inv(0.3)
    rng = np.random.default_rng(0)
    n = 10**6
    prod = np.exp(rng.normal(0.3, 0.25, n) + rng.normal(-0.2, 0.3, n))
    kde = stats.gaussian_kde(prod[:20000])
    grid = np.linspace(0.2, 3.0, 2801)
    peak = grid[np.argmax(kde(grid))]
    assert abs(scale_modes(m)[0] - peak) < kde.factor * prod[:20000].std()


def _report_model():
    m = init_model(ModelSpec.create("LinearHorseshoe", "classification", 4), 0)
    L = m.layers[0]
    L.beta_mu[:] = [[1.0, -1.0, 0.5, 1.0]]
    L.tau_mu[:] = [0.0, 0.0, -9.0, -10.0]
    return m


def test_report_gap_and_fixed():
    m = _report_model()
    rep = relevance_report(m, ["a", "b", "c", "d"], "gap")
    assert rep.relevant_mask.tolist() == [True, True, False, False]
    rep0 = relevance_report(m, method="fixed", threshold=0.0)
    assert rep0.relevant_mask.all()
    with pytest.raises(ValueError):
        relevance_report(m, method="fixed")
    with pytest.raises(ValueError):
        relevance_report(m, ["a"])


def test_report_scale_mode():
    rep = relevance_report(_report_model(), method="scale_mode")
    assert rep.threshold_on == "scale_mode"
    assert rep.relevant_mask.tolist() == [True, True, False, False]
    lin = init_model(ModelSpec.create("LinearGaussian", "regression", 2), 0)
    with pytest.raises(UnsupportedModelError):
        relevance_report(lin, method="scale_mode")


def test_report_write(tmp_path):
    rep = relevance_report(_report_model(), ["a", "b", "c", "d"])
    paths = rep.write(tmp_path)
    data = json.loads(paths["json"].read_text())
    assert [f["name"] for f in data["features"]] == ["a", "b", "c", "d"]
    rows = list(csv.DictReader(open(paths["csv"])))
    assert [r["relevant"] for r in rows] == ["1", "1", "0", "0"]
    assert float(rows[0]["score"]) == rep.scores[0]
    hist = list(csv.DictReader(open(paths["histogram"])))
    assert sum(int(r["count"]) for r in hist) == 4

import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ehrgan import metrics
from ehrgan.metrics import (
    ScatterSeries,
    apriori_maximal,
    ccd_demographics,
    ccd_vitals,
    cvt,
    dwp,
    dws,
    far,
    frequent_itemsets,
    histogram_svg,
    rules_from_maximal,
    scatter_svg,
)

from conftest import make_cohort
from oracles import brute_far, brute_frequent, brute_maximal, brute_rules


def random_codes(rng, n, m, p=None):
    p = rng.uniform(0.05, 0.6, m) if p is None else p
    return rng.random((n, m)) < p


# ---------------------------------------------------------------------------
# scatter series


def test_scatter_summary_recomputes_from_points(tmp_path):
    s = ScatterSeries("t", ["a", "b", "c"], [0.0, 1.0, 2.0], [0.0, 3.0, 1.0])
    d = [abs(x - y) / math.sqrt(2) for x, y in zip(s.x, s.y)]
    assert s.mean_distance == pytest.approx(np.mean(d)) and s.std_distance == pytest.approx(np.std(d))
    doc = s.to_dict()
    pts = doc["points"]
    again = ScatterSeries("t", [p["id"] for p in pts], [p["x"] for p in pts], [p["y"] for p in pts])
    assert again.mean_distance == doc["mean_distance"]
    path = tmp_path / "s.csv"
    s.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,real,synthetic,distance" and len(lines) == 4
    assert sum(s.histogram(bins=4)["counts"]) == 3


def test_empty_series_summary_is_none():
    s = ScatterSeries("e", [], [], [])
    assert s.mean_distance is None and s.to_dict()["n"] == 0


# ---------------------------------------------------------------------------
# DWS


def test_dws_identical_is_diagonal():
    rng = np.random.default_rng(0)
    c = make_cohort(random_codes(rng, 300, 8))
    s = dws(c, c)
    assert np.all(s.distances == 0) and s.pearson == pytest.approx(1.0)


def test_dws_log_prevalence_and_floor():
    codes = np.zeros((100, 2), bool)
    codes[0, 0] = True
    c = make_cohort(codes)
    s = dws(c, c)
    assert s.x[0] == pytest.approx(-2.0) and s.y[0] == pytest.approx(-2.0)
    assert s.x[1] == pytest.approx(math.log10(0.5 / 100))


def test_dws_errors():
    c = make_cohort(np.ones((3, 2), bool))
    with pytest.raises(ValueError):
        dws(c, c.subset([]))
    with pytest.raises(ValueError):
        dws(c, make_cohort(np.ones((3, 3), bool)))


# ---------------------------------------------------------------------------
# DWP


def test_dwp_linearly_predictable_code_scores_one():
    rng = np.random.default_rng(1)
    codes = random_codes(rng, 600, 5, p=np.full(5, 0.4))
    codes[:, 1] = codes[:, 0]
    train, test = make_cohort(codes[:400]), make_cohort(codes[400:])
    s = dwp(train, train, test)
    i = s.ids.index("icd:101")
    assert s.x[i] == 1.0 and s.y[i] == 1.0


def test_dwp_same_data_is_deterministic_and_on_diagonal():
    rng = np.random.default_rng(2)
    codes = random_codes(rng, 500, 6)
    train, test = make_cohort(codes[:400]), make_cohort(codes[400:])
    a, b = dwp(train, train, test), dwp(train, train, test)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.x, a.y)
    assert np.all(a.distances == 0)


def test_dwp_skips_codes_absent_from_training():
    rng = np.random.default_rng(3)
    codes = random_codes(rng, 200, 4)
    codes[:150, 3] = False
    train, test = make_cohort(codes[:150]), make_cohort(codes[150:])
    s = dwp(train, train, test)
    assert s.skipped == ["icd:103"] and "icd:103" not in s.ids


def test_logistic_fit_matches_scalar_reference():
    rng = np.random.default_rng(4)
    x = (rng.random((60, 3)) < 0.5).astype(float)
    cfg = metrics.LogisticConfig(iterations=50)
    w, b = metrics.fit_logistic_all(x, cfg)
    # independent single-model loop for column 2
    feats, y = x[:, :2], x[:, 2]
    ww, bb = np.zeros(2), 0.0
    for _ in range(cfg.iterations):
        p = 1 / (1 + np.exp(-(feats @ ww + bb)))
        ww, bb = ww - cfg.lr * (feats.T @ (p - y) / len(y) + cfg.l2 * ww), bb - cfg.lr * np.mean(p - y)
    assert np.allclose(w[:2, 2], ww, atol=1e-12) and w[2, 2] == 0.0
    assert b[2] == pytest.approx(bb, abs=1e-12)


def test_f1_edge_cases():
    assert metrics.f1_score([1, 0, 1], [1, 0, 0]) == pytest.approx(2 / 3)
    assert metrics.f1_score([0, 0], [0, 0]) == 0.0


# ---------------------------------------------------------------------------
# CVT


GOOD = [22.0, 24.0, 26.0, 115.0, 120.0, 125.0, 70.0, 75.0, 80.0]


def test_cvt_clean_real_has_no_negatives():
    c = make_cohort(np.ones((10, 2), bool), vitals=np.tile(GOOD, (10, 1)))
    r = cvt(c, c)
    assert r.total_negative_fraction("real") == 0.0
    assert len(r.distributions) == 9


def test_cvt_single_bad_row():
    vit = np.tile(GOOD, (10, 1))
    vit[0, 1] = 30.0  # bmi median above max
    real = make_cohort(np.ones((10, 2), bool), vitals=np.tile(GOOD, (10, 1)))
    synth = make_cohort(np.ones((10, 2), bool), vitals=vit)
    r = cvt(real, synth)
    assert r["bmi_max-med"].synth_negative == pytest.approx(0.1)
    assert r["bmi_med-min"].synth_negative == 0.0
    assert r.total_negative_fraction("synth") == pytest.approx(0.1 / 6)
    h = r["sys-dia_min"].histograms()
    assert sum(h["real"]) == 10 and len(h["edges"]) == 31


# ---------------------------------------------------------------------------
# Apriori and FAR


def test_apriori_all_ab():
    m = np.ones((10, 2), bool)
    assert apriori_maximal(m, 0.5) == {frozenset({0, 1})}


def test_apriori_threshold_above_max_frequency_is_empty():
    rng = np.random.default_rng(5)
    m = random_codes(rng, 50, 5, p=np.full(5, 0.3))
    top = m.mean(axis=0).max()
    assert apriori_maximal(m, min(1.0, top + 1e-9)) == set()
    with pytest.raises(ValueError):
        apriori_maximal(m, 0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 40), st.integers(1, 7))), st.sampled_from([0.05, 0.1, 0.2, 0.3, 0.5]))
def test_apriori_matches_exhaustive(matrix, min_s):
    freq = frequent_itemsets(matrix, min_s)
    assert freq == brute_frequent(matrix, min_s)
    maximal = apriori_maximal(matrix, min_s)
    assert maximal == brute_maximal(matrix, min_s)
    assert not any(a < b for a in maximal for b in maximal)


def test_rules_match_exhaustive_on_five_codes():
    rng = np.random.default_rng(6)
    m = random_codes(rng, 200, 5, p=np.array([0.7, 0.6, 0.5, 0.4, 0.3]))
    m[:, 4] |= m[:, 0] & m[:, 1]
    for s in (0.1, 0.2, 0.3):
        for c in (0.3, 0.5, 0.7):
            got = {r.key for r in rules_from_maximal(m, apriori_maximal(m, s), c)}
            assert got == brute_rules(m, s, c)
            assert got, "fixture should yield rules"


def test_rule_invariants():
    rng = np.random.default_rng(7)
    m = random_codes(rng, 200, 6, p=np.full(6, 0.5))
    for r in rules_from_maximal(m, apriori_maximal(m, 0.1), 0.2):
        assert r.antecedent and r.consequent and not r.antecedent & r.consequent
        assert 0 < r.support <= 1 and 0 < r.confidence <= 1


def test_far_identical_is_one_and_matches_brute():
    rng = np.random.default_rng(8)
    real = make_cohort(random_codes(rng, 200, 5, p=np.array([0.7, 0.6, 0.5, 0.4, 0.3])))
    synth = make_cohort(random_codes(rng, 200, 5, p=np.array([0.6, 0.6, 0.5, 0.5, 0.2])))
    same = far(real, real)
    vals = [v for cell in same.defined_cells() for v in cell]
    assert vals and all(v == 1.0 for v in vals)
    res = far(real, synth)
    prec, rec = brute_far(real.codes, synth.codes, res.s_grid, res.c_grid)
    assert res.precision == prec and res.recall == rec
    assert all(0 <= v <= 1 for cell in res.defined_cells() for v in cell)


def test_far_undefined_cells():
    real = make_cohort(np.eye(4, dtype=bool))  # no pair co-occurs
    r = far(real, real, s_grid=[0.1], c_grid=[0.5])
    assert r.precision == [[None]] and r.n_real == [[0]]
    with pytest.raises(ValueError):
        far(real, real, s_grid=[], c_grid=[0.5])


def test_default_grids_span_stated_ranges():
    assert len(metrics.DEFAULT_S_GRID) == 8 and metrics.DEFAULT_S_GRID[0] == 0.08 and metrics.DEFAULT_S_GRID[-1] == 0.22
    assert len(metrics.DEFAULT_C_GRID) == 8 and metrics.DEFAULT_C_GRID[0] == 0.5 and metrics.DEFAULT_C_GRID[-1] == 0.78


# ---------------------------------------------------------------------------
# CCD


def test_ccd_identical_has_zero_distance():
    rng = np.random.default_rng(9)
    n = 200
    vit = np.sort(rng.uniform(20, 40, (n, 3)), axis=1)
    vit = np.hstack([vit, vit + 100, vit + 50])
    c = make_cohort(random_codes(rng, n, 5), vitals=vit, age=rng.integers(0, 100, n), gender=rng.integers(0, 2, n))
    for series in list(ccd_demographics(c, c).values()) + list(ccd_vitals(c, c).values()):
        assert series.mean_distance == 0.0


def test_ccd_female_only_code_and_constant_vital():
    codes = np.zeros((6, 2), bool)
    codes[:3, 0] = True
    codes[:, 1] = True
    gender = np.array([1, 1, 1, 0, 0, 1])
    vit = np.tile([0.1, 0.2, 0.3, 110.7, 120.1, 130.3, 70.9, 75.3, 80.1], (6, 1))
    c = make_cohort(codes, gender=gender, age=[33, 47, 51, 60, 70, 80], vitals=vit)
    demo = ccd_demographics(c, c)
    assert (demo["female_fraction"].x[0], demo["female_fraction"].y[0]) == (1.0, 1.0)
    assert demo["age_mean"].x[0] == pytest.approx(131 / 3)
    assert demo["age_std"].x[0] == pytest.approx(np.std([33, 47, 51]))
    v = ccd_vitals(c, c)
    assert len(v) == 18
    assert np.all(np.abs(v["bmi_min_std"].x) < 1e-12) and np.all(np.abs(v["sys_med_std"].y) < 1e-12)


def test_ccd_skips_codes_missing_on_one_side():
    real = make_cohort(np.ones((4, 3), bool))
    codes = np.ones((4, 3), bool)
    codes[:, 2] = False
    s = ccd_demographics(real, make_cohort(codes))["age_mean"]
    assert s.ids == ["icd:100", "icd:101"] and s.skipped == ["icd:102"]


# ---------------------------------------------------------------------------
# SVG


def test_svgs_are_well_formed():
    s = ScatterSeries("dws <test>", ["a", "b"], [-2.0, -1.0], [-2.5, float("nan")])
    root = ET.fromstring(scatter_svg(s))
    assert root.tag.endswith("svg")
    root = ET.fromstring(histogram_svg("h", [0, 1, 2], {"real": [3, 4], "synth": [1, 2]}))
    assert root.tag.endswith("svg")
    ET.fromstring(scatter_svg(ScatterSeries("empty", [], [], [])))

import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from polyvgae.errors import UndefinedMetricError
from polyvgae.metrics import (
    accuracy,
    ap_at_k,
    auprc,
    auroc,
    classification_suite,
    macro_average,
    micro_average,
    pearson,
    r_squared,
    regression_suite,
    rmse,
    write_report,
)

# ---------------------------------------------------------------------------
# brute-force oracles


def auroc_oracle(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def auprc_oracle(s, y):
    n_pos = sum(y)
    prev_recall, area = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        sel = [l for a, l in zip(s, y) if a >= t]
        tp = sum(sel)
        recall = tp / n_pos
        area += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return area


def ap_at_k_oracle(s, y, k):
    ranked = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
    hits, total = 0, 0.0
    for r, i in enumerate(ranked, 1):
        if y[i]:
            hits += 1
            total += hits / r
    return total / min(k, sum(y))


scored = st.lists(
    st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]) | st.floats(-5, 5), st.booleans()),
    min_size=1,
    max_size=30,
)


@settings(max_examples=300, deadline=None)
@given(scored)
def test_auroc_matches_oracle(items):
    s, y = zip(*items)
    assume(any(y) and not all(y))
    assert auroc(s, y) == pytest.approx(auroc_oracle(s, y), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(scored)
def test_auprc_matches_oracle(items):
    s, y = zip(*items)
    assume(any(y))
    assert auprc(s, y) == pytest.approx(auprc_oracle(s, y), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(scored, st.integers(1, 35))
def test_ap_at_k_matches_oracle(items, k):
    s, y = zip(*items)
    assume(any(y))
    assert ap_at_k(s, y, k) == pytest.approx(ap_at_k_oracle(s, y, k), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=2, max_size=30, unique=True), st.data())
def test_auroc_monotone_invariance_and_complement(s, data):
    y = data.draw(st.lists(st.booleans(), min_size=len(s), max_size=len(s)))
    assume(any(y) and not all(y))
    a = auroc(s, y)
    assert auroc(np.exp(np.asarray(s) / 50) * 3 + 1, y) == pytest.approx(a, abs=1e-12)
    assert a + auroc(s, [not v for v in y]) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# hand examples


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auroc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]) == 0.75
    assert auroc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_auroc_single_class():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auprc([0.9, 0.8, 0.3, 0.2], [0, 1, 0, 0]) == 0.5
    assert auprc([0.3, 0.1, 0.7], [1, 1, 1]) == 1.0
    with pytest.raises(UndefinedMetricError):
        auprc([0.1, 0.2], [0, 0])


def test_ap_at_k_examples(caplog):
    assert ap_at_k(np.linspace(1, 0, 60), [1] * 55 + [0] * 5, k=50) == 1.0
    assert ap_at_k([0.9, 0.5, 0.1], [1, 0, 0], k=50) == 1.0
    assert ap_at_k([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0], k=50) == pytest.approx((1 + 2 / 3) / 2)
    assert ap_at_k([0.2, 0.1], [0, 0]) == 0.0
    assert "no positives" in caplog.text
    with pytest.raises(ValueError):
        ap_at_k([0.1], [1], k=0)


def test_ap_at_k_tie_break_by_index():
    # tied scores: the earlier index ranks first
    assert ap_at_k([0.5, 0.5], [1, 0], k=1) == 1.0
    assert ap_at_k([0.5, 0.5], [0, 1], k=1) == 0.0


def test_accuracy_examples():
    assert accuracy([0.9, 0.1], [1, 0]) == 1.0
    assert accuracy([0.4, 0.6], [1, 0]) == 0.0
    assert accuracy([0.5], [1]) == 1.0
    assert accuracy([0.5], [0]) == 0.0


def test_regression_perfect():
    t = [1.0, 2.0, 4.0]
    r = regression_suite(t, t)
    assert r == {"rmse": 0.0, "r2": 1.0, "pcc": pytest.approx(1.0), "fitness": pytest.approx(2.0)}


def test_regression_constant_prediction():
    t = np.array([1.0, 2.0, 6.0])
    assert r_squared(np.full(3, t.mean()), t) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        pearson(np.full(3, t.mean()), t)
    with pytest.raises(UndefinedMetricError):
        regression_suite(t, np.ones(3))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40))
def test_regression_matches_formula_oracle(seed, n):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=n).tolist(), rng.normal(size=n).tolist()
    mse = sum((a - b) ** 2 for a, b in zip(p, t)) / n
    mt, mp = sum(t) / n, sum(p) / n
    ss_tot = sum((b - mt) ** 2 for b in t)
    r2 = 1 - sum((b - a) ** 2 for a, b in zip(p, t)) / ss_tot
    cov = sum((a - mp) * (b - mt) for a, b in zip(p, t))
    pcc = cov / math.sqrt(sum((a - mp) ** 2 for a in p) * ss_tot)
    r = regression_suite(p, t)
    assert r["rmse"] == pytest.approx(math.sqrt(mse), abs=1e-10)
    assert r["r2"] == pytest.approx(r2, abs=1e-10)
    assert r["pcc"] == pytest.approx(pcc, abs=1e-10)
    assert r["fitness"] == pytest.approx(r2 + pcc - math.sqrt(mse), abs=1e-10)
    assert rmse(p, t) == r["rmse"]


def test_regression_length_mismatch():
    with pytest.raises(ValueError):
        regression_suite([1.0], [1.0, 2.0])


def test_macro_average():
    assert macro_average({"a": {"auroc": 0.8}}) == {"auroc": 0.8, "relations": 1, "excluded": 0}
    m = macro_average({"a": {"auroc": 0.8}, "b": {"auroc": 0.6}})
    assert m["auroc"] == pytest.approx(0.7)
    m = macro_average({"a": {"auroc": 0.8}, "b": None})
    assert m["auroc"] == 0.8 and m["excluded"] == 1
    with pytest.raises(UndefinedMetricError):
        macro_average({"a": None})


def test_micro_average_pools():
    s = {"a": np.array([0.9, 0.1]), "b": np.array([0.8, 0.2])}
    y = {"a": np.array([1, 0]), "b": np.array([0, 1])}
    m = micro_average(s, y)
    assert m["auroc"] == auroc([0.9, 0.1, 0.8, 0.2], [1, 0, 0, 1])


def test_classification_suite_keys():
    m = classification_suite([0.9, 0.1], [1, 0], k=50)
    assert set(m) == {"auroc", "auprc", "ap@50", "acc"}


def test_write_report(tmp_path):
    per = {"a": {"auroc": 0.75, "auprc": 0.5}, "b": None}
    write_report(tmp_path, per, {"a": (2, 2), "b": (0, 0)}, {"auroc": 0.75})
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "relation,n_pos,n_neg,auroc,auprc"
    assert lines[1] == "a,2,2,0.75,0.5"
    assert lines[2] == "b,0,0,,"
    assert json.loads((tmp_path / "metrics.json").read_text()) == {"auroc": 0.75}

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from cdrscope import evaluation as ev
from cdrscope import models as mdl


def test_confusion_example():
    actual = np.r_[np.ones(10), np.zeros(1990)]
    pred = np.r_[np.ones(9), 0, np.ones(96), np.zeros(1894)]
    m = ev.confusion_metrics(pred, actual)
    assert (m["TP"], m["FN"], m["FP"], m["TN"]) == (9, 1, 96, 1894)
    assert m["recall"] == pytest.approx(0.9)
    assert m["fallout"] == pytest.approx(96 / 1990)
    assert m["precision"] == pytest.approx(9 / 105)


def test_confusion_edge_cases():
    y = np.array([1, 0, 1, 0])
    m = ev.confusion_metrics(y, y)
    assert (m["recall"], m["fallout"], m["precision"]) == (1.0, 0.0, 1.0)
    m = ev.confusion_metrics(np.zeros(4), y)
    assert m["precision"] == 0.0 and m["no_predictions"]
    m = ev.confusion_metrics(y, np.zeros(4))
    assert m["recall"] == 0.0 and m["no_positives"]
    with pytest.raises(ValueError):
        ev.confusion_counts([1, 0], [1])


def test_roc_cases(rng):
    y = np.r_[np.ones(50), np.zeros(50)]
    assert ev.roc_curve(y, y).auc == 1.0
    assert ev.roc_curve(-y, y).auc == 0.0
    y = rng.random(10_000) < 0.3
    assert ev.roc_curve(rng.random(10_000), y).auc == pytest.approx(0.5, abs=0.02)
    with pytest.raises(ValueError):
        ev.roc_curve([1, 2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 300))
def test_roc_auc_agrees_with_rank_sum(seed, n):
    rng = np.random.default_rng(seed)
    y = np.r_[1, 0, rng.random(n - 2) < 0.3]
    s = rng.integers(0, 6, size=n).astype(float)
    c = ev.roc_curve(s, y)
    assert c.auc == pytest.approx(mdl.roc_auc(s, y), abs=1e-12)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert c.fpr[-1] == 1.0 and c.tpr[-1] == 1.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    n = 400
    y = rng.random(n) < 0.05
    y[:2] = [True, False]
    s = rng.normal(size=n)
    ids = [f"u{i:04d}" for i in range(n)]
    t = np.exp(3 * s) + 7
    assert ev.roc_curve(t, y).auc == pytest.approx(ev.roc_curve(s, y).auc, abs=1e-12)
    a, b = ev.quantile_metrics(s, y, ids), ev.quantile_metrics(t, y, ids)
    assert {k: a[k] for k in ("recall", "fallout", "precision")} == {k: b[k] for k in ("recall", "fallout", "precision")}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(20, 2000), rate=st.floats(0.0, 0.3))
def test_fallout_bound(seed, m, rate):
    rng = np.random.default_rng(seed)
    y = rng.random(m) < rate
    out = ev.quantile_metrics(rng.random(m), y)
    base = y.mean()
    if base < 1:
        assert out["fallout"] <= 0.05 / (1 - base) + 1 / (m * (1 - base)) + 1e-12
    assert out["n_flagged"] == mdl.n_flagged(m, 0.95)


def test_random_baseline(rng):
    y = rng.random(3000) < 0.02
    out = ev.random_baseline(y, n_repeats=100, seed=1)
    assert 0.02 <= out["recall"] <= 0.08
    assert out["fallout"] == pytest.approx(0.05, abs=0.005)


# -- stability ----------------------------------------------------------------

def test_ranking_stability_examples():
    assert ev.ranking_stability(list("abcde"), list("abcde")) == (100.0, 100.0)
    overlap, aos = ev.ranking_stability(list("abc"), list("acb"), 3)
    assert overlap == 100.0
    assert aos == pytest.approx(100 * (1 + 0.5 + 1) / 3)
    assert ev.ranking_stability(list("abc"), list("xyz")) == (0.0, 0.0)
    with pytest.raises(ValueError):
        ev.ranking_stability(list("ab"), list("ab"), 3)


def _brute_average_overlap(a, b, depth):
    return 100 * np.mean([len(set(a[:d]) & set(b[:d])) / d for d in range(1, depth + 1)])


@settings(max_examples=80, deadline=None)
@given(st.permutations(list(range(12))), st.permutations(list(range(12))), st.integers(1, 12))
def test_ranking_stability_symmetric_and_exact(a, b, depth):
    o1, s1 = ev.ranking_stability(a, b, depth)
    o2, s2 = ev.ranking_stability(b, a, depth)
    assert (o1, s1) == pytest.approx((o2, s2))
    assert s1 == pytest.approx(_brute_average_overlap(a, b, depth))
    assert o1 == pytest.approx(100 * len(set(a[:depth]) & set(b[:depth])) / depth)


# -- ablation -----------------------------------------------------------------

def test_ablation_dummy_group():
    groups = ["SIGNAL", "DUMMY", "CORRESPONDENT"]

    def evaluate(include):
        recall = 0.2 + 0.5 * ("SIGNAL" in include) + 0.2 * ("CORRESPONDENT" in include)
        return {"recall": recall, "precision": recall / 10}

    df = ev.ablate_groups(evaluate, groups).set_index("run")
    assert df.loc["-DUMMY", "delta_recall"] == 0
    assert df.loc["-SIGNAL", "delta_recall"] == pytest.approx(0.5)
    assert df.loc["only CORRESPONDENT", "recall"] == pytest.approx(0.4)
    assert df.attrs["baseline"]["recall"] == pytest.approx(0.9)


def test_ablation_records_failures():
    def evaluate(include):
        if "B" not in include:
            raise RuntimeError("boom")
        return {"recall": 0.5, "precision": 0.1}

    df = ev.ablate_groups(evaluate, ["A", "B"], only=None).set_index("run")
    assert df.loc["-B", "error"] == "boom" and np.isnan(df.loc["-B", "recall"])
    assert df.loc["-A", "error"] is None


# -- coefficients and importance ---------------------------------------------

def test_backmap_examples(rng):
    np.testing.assert_allclose(ev.backmap_coefficients(np.array([[0.6], [0.8]]), [2.0]), [1.2, 1.6])
    b = rng.normal(size=4)
    np.testing.assert_array_equal(ev.backmap_coefficients(np.eye(4), b), b)
    X = rng.normal(size=(60, 4)) @ rng.normal(size=(4, 4))
    basis = mdl.pca_fit(X, 4)
    Z = basis.transform(X)
    y = (Z[:, 0] + rng.normal(size=60) > 0).astype(float)
    m = mdl.logistic_fit(Z, y)
    beta = ev.backmap_coefficients(basis, m.coef)
    np.testing.assert_allclose((X - basis.center) @ beta, Z @ m.coef, atol=1e-8)


def test_mean_relative_contribution(rng):
    X = rng.normal(size=(200, 3)) + [1, 2, 3]
    y = rng.random(200) < 0.3
    df, means = ev.mean_relative_contribution([0.5, 0.0, -1.0], X, y, ["a", "b", "c"])
    t = df.set_index("feature")
    assert t.loc["b", "contrib_default"] == 0 and t.loc["b", "contrib_paying"] == 0
    assert df["rel_default"].sum() == pytest.approx(1.0)
    assert df["rel_paying"].sum() == pytest.approx(1.0)
    assert means["defaulting"] == pytest.approx(float((X[y] @ [0.5, 0.0, -1.0]).mean()))


def test_pratt_symmetric_predictors(rng):
    n = 10_000
    Q, _ = np.linalg.qr(rng.normal(size=(n, 2)))
    X = (Q - Q.mean(axis=0)) / Q.std(axis=0)
    y = (rng.random(n) < mdl.sigmoid(-1 + X @ [1.0, 1.0])).astype(float)
    m = mdl.logistic_fit(X, y)
    vi = ev.pratt_vi(X, y, m.coef, m.intercept, ["a", "b"])
    d = vi.table.set_index("feature")["d"]
    assert d["a"] == pytest.approx(0.5, abs=0.05) and d["b"] == pytest.approx(0.5, abs=0.05)
    assert vi.total == pytest.approx(1.0, abs=1e-6)
    assert vi.subset_importance(["a", "b"]) == pytest.approx(1.0, abs=1e-6)


def test_pratt_noise_predictor(rng):
    n = 10_000
    X = rng.normal(size=(n, 3))
    y = (rng.random(n) < mdl.sigmoid(-1 + X[:, 0] - 0.7 * X[:, 1])).astype(float)
    m = mdl.logistic_fit(X, y)
    vi = ev.pratt_vi(X, y, m.coef, m.intercept)
    d = vi.table.set_index("feature")["d"]
    assert abs(d["x2"]) < 0.02
    assert vi.total == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.integers(1, 6))
def test_pratt_sums_to_one_for_any_coefficients(seed, p):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(300, p))
    y = (rng.random(300) < 0.3).astype(float)
    beta = rng.normal(size=p)
    try:
        vi = ev.pratt_vi(X, y, beta, float(rng.normal()))
    except ValueError:
        return        # non-positive pseudo-R^2 is reported, not normalized away
    assert vi.total == pytest.approx(1.0, abs=1e-6)


def test_pratt_options(rng):
    X = rng.normal(size=(500, 2))
    y = (rng.random(500) < mdl.sigmoid(X[:, 0])).astype(float)
    m = mdl.logistic_fit(X, y)
    alt = ev.pratt_vi(X, y, m.coef, m.intercept, rho="point_biserial", r2="mckelvey_zavoina")
    assert alt.method == {"rho": "point_biserial", "r2": "mckelvey_zavoina"}
    with pytest.raises(ValueError):
        ev.pratt_vi(X, y, m.coef, m.intercept, rho="spearman")
    with pytest.raises(ValueError):
        ev.pratt_vi(X, y, m.coef, m.intercept, r2="nagelkerke")


def _vi(names, d):
    return ev.PrattResult(pd.DataFrame({"feature": names, "d": d}), 0.5, float(sum(d)), {})


def test_vi_stability_check():
    full = _vi(["a", "b", "c"], [0.6, 0.3, 0.1])

    def refit(excluded):
        left = [f for f in ["a", "b", "c"] if f not in excluded]
        return {"recall": 0.3 + 0.2 * ("a" in left)}, _vi(left, [1.0 / len(left)] * len(left))

    out = ev.vi_stability_check(refit, full, top_k=1)
    assert out["removed"] == ["a"]
    assert out["delta_recall"] == pytest.approx(0.2)
    assert out["new_top_feature"] == "b"
    null = ev.vi_stability_check(lambda ex: ({"recall": 0.5}, _vi(["a"], [1.0])), full, 1, baseline_recall=0.5)
    assert null["delta_recall"] == 0
    with pytest.raises(ValueError):
        ev.vi_stability_check(refit, full, top_k=3)

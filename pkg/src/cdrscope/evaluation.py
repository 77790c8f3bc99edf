"""Confusion metrics, ROC, ranking stability, ablation and variable importance."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .models import n_flagged, sigmoid, threshold_topquantile

log = logging.getLogger(__name__)

# reference values measured on real operator data (comparison only)
REFERENCE = {
    "best_model": {"name": "pval-05", "recall": 0.900, "fallout": 0.0477, "precision": 0.048},
    "random_model": {"recall": 0.060, "fallout": 0.0501},
    "ablation_correspondent": {"recall": 0.58, "precision": 0.031, "delta_recall": 0.32},
    "score_means": {"paying": -0.0453, "defaulting": 16.2758},
    "pratt_top": 0.048, "pratt_top4_sum": 0.148,
}


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


def confusion_counts(predicted, actual) -> ConfusionCounts:
    p = np.asarray(predicted).astype(bool)
    a = np.asarray(actual).astype(bool)
    if p.shape != a.shape:
        raise ValueError("predicted and actual differ in length")
    return ConfusionCounts(int((p & a).sum()), int((p & ~a).sum()), int((~p & a).sum()), int((~p & ~a).sum()))


def confusion_metrics(predicted, actual) -> dict:
    """Recall TP/(TP+FN), fall-out FP/(FP+TN), precision TP/(TP+FP).

    0/0 resolves to 0; ``no_positives`` / ``no_predictions`` flag those cases.
    """
    c = confusion_counts(predicted, actual)
    pos = c.TP + c.FN
    neg = c.FP + c.TN
    flagged = c.TP + c.FP
    return {
        "recall": c.TP / pos if pos else 0.0,
        "fallout": c.FP / neg if neg else 0.0,
        "precision": c.TP / flagged if flagged else 0.0,
        "TP": c.TP, "FP": c.FP, "FN": c.FN, "TN": c.TN,
        "no_positives": pos == 0, "no_predictions": flagged == 0,
    }


def quantile_metrics(scores, actual, ids=None, q: float = 0.95) -> dict:
    """Confusion metrics after flagging the top ``1 - q`` share of scores."""
    pred = threshold_topquantile(scores, q, ids)
    out = confusion_metrics(pred, actual)
    # worst case: every flagged user is a negative, ceil((1-q) m) / N0 <= (1-q)/(1-b) + 1/(m (1-b))
    n_neg = out["FP"] + out["TN"]
    bound = min(1.0, int(pred.sum()) / n_neg) if n_neg else 0.0
    if out["fallout"] > bound + 1e-12:
        raise AssertionError(f"fall-out {out['fallout']:.4f} exceeds bound {bound:.4f}")
    out["n_flagged"] = int(pred.sum())
    return out


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"fpr": self.fpr, "tpr": self.tpr, "threshold": self.thresholds})

    def write_csv(self, path):
        self.frame().to_csv(path, index=False)


def roc_curve(scores, actual) -> RocCurve:
    """ROC points at every distinct score (ties grouped) and trapezoidal AUC.

    The first point is (0, 0) at threshold +inf.
    """
    s = np.asarray(scores, dtype=float)
    a = np.asarray(actual).astype(bool)
    n1 = a.sum()
    n0 = len(a) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="mergesort")
    s, a = s[order], a[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(a)[last]
    fp = np.cumsum(~a)[last]
    tpr = np.r_[0.0, tp / n1]
    fpr = np.r_[0.0, fp / n0]
    thr = np.r_[np.inf, s[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thr, auc)


def ranking_stability(ranking_a, ranking_b, depth: int | None = None):
    """Overlap and average-overlap score (both in percent) of two rankings.

    overlap = |A_D & B_D| / D at depth D; AOS = mean over d = 1..D of
    |A_d & B_d| / d.
    """
    a = list(ranking_a)
    b = list(ranking_b)
    depth = min(len(a), len(b)) if depth is None else int(depth)
    if depth < 1 or depth > len(a) or depth > len(b):
        raise ValueError("depth must lie in [1, ranking length]")
    seen_a, seen_b = set(), set()
    inter = 0
    total = 0.0
    for d in range(depth):
        x, y = a[d], b[d]
        if x == y:
            inter += 1
        else:
            inter += (x in seen_b) + (y in seen_a)
        seen_a.add(x)
        seen_b.add(y)
        total += inter / (d + 1)
    return 100.0 * inter / depth, 100.0 * total / depth


def random_baseline(actual, ids=None, q: float = 0.95, n_repeats: int = 200, seed: int = 0) -> dict:
    """Metrics of uniform random scores, averaged over seeded repeats."""
    rng = np.random.default_rng(seed)
    rows = [quantile_metrics(rng.random(len(actual)), actual, ids, q) for _ in range(n_repeats)]
    out = {k: float(np.mean([r[k] for r in rows])) for k in ("recall", "fallout", "precision")}
    out["n_repeats"] = n_repeats
    out["recall_std"] = float(np.std([r["recall"] for r in rows]))
    return out


# ---------------------------------------------------------------------------
# ablation

def ablate_groups(evaluate, groups, baseline: dict | None = None, only: str | None = "CORRESPONDENT") -> pd.DataFrame:
    """Refit without each group in turn (plus an ``only`` row) and report deltas.

    ``evaluate(include_groups)`` must return a metrics dict with ``recall`` and
    ``precision``. Failures are recorded per row instead of aborting.
    """
    groups = list(groups)
    base = baseline if baseline is not None else evaluate(groups)
    rows = []
    runs = [(f"-{g}", [h for h in groups if h != g]) for g in groups]
    if only:
        runs.append((f"only {only}", [only]))
    for label, include in runs:
        row = {"run": label}
        try:
            m = evaluate(include)
            row.update(recall=m["recall"], precision=m["precision"],
                       delta_recall=base["recall"] - m["recall"],
                       delta_precision=base["precision"] - m["precision"], error=None)
        except Exception as exc:      # keep the table even if one refit fails
            log.warning("ablation %s failed: %s", label, exc)
            row.update(recall=np.nan, precision=np.nan, delta_recall=np.nan, delta_precision=np.nan,
                       error=str(exc))
        rows.append(row)
    df = pd.DataFrame(rows)
    df.attrs["baseline"] = {"recall": base["recall"], "precision": base["precision"]}
    return df


# ---------------------------------------------------------------------------
# coefficients and importance

def backmap_coefficients(components, beta_pc) -> np.ndarray:
    """Coefficients over the original features: ``C @ beta_pc``."""
    C = getattr(components, "components", components)
    return np.asarray(C, dtype=float) @ np.asarray(beta_pc, dtype=float)


def mean_relative_contribution(beta, X, y, names=None) -> tuple[pd.DataFrame, dict]:
    """Per-feature ``beta_j * mean(X_j | class)`` and its share of the class total.

    Returns the table (sorted by the defaulting-class share) and the class
    means of the per-user score ``beta . x_u``.
    """
    beta = np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(bool)
    names = [f"x{j}" for j in range(len(beta))] if names is None else list(names)
    out = {"feature": names, "beta": beta}
    for label, mask in (("paying", ~y), ("default", y)):
        mean = X[mask].mean(axis=0) if mask.any() else np.zeros(X.shape[1])
        c = beta * mean
        tot = np.abs(c).sum()
        out[f"mean_{label}"] = mean
        out[f"contrib_{label}"] = c
        out[f"rel_{label}"] = np.abs(c) / tot if tot > 0 else np.zeros_like(c)
    df = pd.DataFrame(out).sort_values(["rel_default", "feature"], ascending=[False, True], kind="mergesort")
    score = X @ beta
    means = {"paying": float(score[~y].mean()) if (~y).any() else 0.0,
             "defaulting": float(score[y].mean()) if y.any() else 0.0}
    return df.reset_index(drop=True), means


@dataclass
class PrattResult:
    table: pd.DataFrame           # feature, beta, beta_std, rho, d (sorted by d descending)
    r2: float
    total: float
    method: dict

    def subset_importance(self, features) -> float:
        return float(self.table.loc[self.table["feature"].isin(list(features)), "d"].sum())

    def top(self, k: int) -> pd.DataFrame:
        return self.table.head(k)


def _wmean(w, v):
    return (w[:, None] * v).sum(axis=0) / w.sum() if v.ndim == 2 else float((w * v).sum() / w.sum())


def pratt_vi(X, y, beta, intercept: float, names=None, *, rho: str = "wls", r2: str = "wls") -> PrattResult:
    """Pratt importances ``d_j = beta_std_j * rho_j / R^2`` of a fitted logistic model.

    The fit is expressed as a weighted least-squares regression of the working
    response ``z = eta + (y - pi) / (pi (1 - pi))`` on ``X`` with weights
    ``pi (1 - pi)``. With ``rho="wls"`` the correlations are the weighted
    correlations with ``z`` and ``R^2`` is the weighted R^2 of the fitted
    linear predictor, ``cov_w(eta, z) / var_w(z)``. That equals
    ``var_w(eta) / var_w(z)`` at the maximum-likelihood fit, and the ``d_j``
    sum to 1 for any coefficient vector, penalized fits included.
    ``rho="point_biserial"`` uses the plain correlation with ``y`` instead and
    ``r2="mckelvey_zavoina"`` swaps the denominator, both for sensitivity runs
    where the sum is no longer pinned to 1.
    """
    from .features import point_biserial

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    names = [f"x{j}" for j in range(len(beta))] if names is None else list(names)
    eta = intercept + X @ beta
    pi = sigmoid(eta)
    w = np.clip(pi * (1 - pi), 1e-12, None)
    z = eta + (y - pi) / w
    Xc = X - _wmean(w, X)
    zc = z - _wmean(w, z)
    ec = eta - _wmean(w, eta)
    sx = np.sqrt(_wmean(w, Xc ** 2))
    sz = math.sqrt(_wmean(w, zc ** 2))
    cov_ez = _wmean(w, ec * zc)
    beta_std = beta * sx / sz
    if rho == "wls":
        cov = _wmean(w, Xc * zc[:, None])
        rho_v = np.where(sx > 0, cov / np.where(sx > 0, sx, 1) / sz, 0.0)
    elif rho == "point_biserial":
        rho_v = np.array([point_biserial(X[:, j], y) for j in range(X.shape[1])])
    else:
        raise ValueError("rho must be 'wls' or 'point_biserial'")
    if r2 == "wls":
        r2_v = cov_ez / sz ** 2
    elif r2 == "mckelvey_zavoina":
        v = float(np.var(eta))
        r2_v = v / (v + math.pi ** 2 / 3)
    else:
        raise ValueError("r2 must be 'wls' or 'mckelvey_zavoina'")
    if not r2_v > 0:
        raise ValueError("pseudo-R^2 must be positive")
    d = beta_std * rho_v / r2_v
    df = pd.DataFrame({"feature": names, "beta": beta, "beta_std": beta_std, "rho": rho_v, "d": d})
    df = df.sort_values(["d", "feature"], ascending=[False, True], kind="mergesort").reset_index(drop=True)
    return PrattResult(df, float(r2_v), float(d.sum()), {"rho": rho, "r2": r2})


def vi_stability_check(refit, vi: PrattResult, top_k: int = 4, baseline_recall: float | None = None) -> dict:
    """Drop the ``top_k`` most important features, refit, report the recall change and new top d_j.

    ``refit(excluded_names)`` returns ``(metrics dict, PrattResult)``.
    """
    removed = vi.table["feature"].head(top_k).tolist()
    if len(removed) >= len(vi.table):
        raise ValueError("cannot remove every feature")
    if baseline_recall is None:
        baseline_recall = refit([])[0]["recall"]
    metrics, new_vi = refit(removed)
    top = new_vi.table.iloc[0]
    return {"removed": removed, "recall_before": baseline_recall, "recall_after": metrics["recall"],
            "delta_recall": baseline_recall - metrics["recall"],
            "new_max_d": float(top["d"]), "new_top_feature": top["feature"]}


def expected_flagged(m: int, q: float = 0.95) -> int:
    return n_flagged(m, q)

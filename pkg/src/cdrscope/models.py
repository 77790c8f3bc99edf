"""PCA, logistic regression, lasso-logistic, linear SVM and percentile thresholding."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import linalg, stats
from scipy.sparse.linalg import LinearOperator, eigsh

log = logging.getLogger(__name__)

EIGH_MAX_P = 2000
# variance shares measured on real operator data (comparison only)
REFERENCE_PCA = {"pc1_share": 0.20, "first30_share": 0.42, "first500_share": 0.66}


class ModelError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# PCA

@dataclass
class PcaBasis:
    components: np.ndarray      # p x p1, orthonormal columns
    explained: np.ndarray       # variance share of each retained component
    center: np.ndarray          # train column means
    eigenvalues: np.ndarray

    @property
    def p1(self) -> int:
        return self.components.shape[1]

    def transform(self, X) -> np.ndarray:
        return pca_transform(X, self)

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.components.T + self.center

    def subset(self, idx) -> "PcaBasis":
        idx = np.asarray(idx)
        return PcaBasis(self.components[:, idx], self.explained[idx], self.center, self.eigenvalues[idx])


def _fix_signs(C):
    pivot = np.abs(C).argmax(axis=0)
    s = np.sign(C[pivot, np.arange(C.shape[1])])
    s[s == 0] = 1.0
    return C * s


def pca_fit(X_train, p1: int, rank_tol: float = 1e-10) -> PcaBasis:
    """Principal components of the train covariance.

    Uses a dense symmetric eigensolver for p <= 2000 columns and Lanczos
    iteration with a fixed start vector for larger p. Components are sign-fixed
    so the largest-magnitude loading of each is positive. ``p1`` beyond the
    numerical rank is truncated with a warning.
    """
    X = np.asarray(X_train, dtype=np.float64)
    n, p = X.shape
    if p1 < 1:
        raise ValueError("p1 must be >= 1")
    if p1 > min(n, p):
        warnings.warn(f"p1={p1} exceeds min(n, p)={min(n, p)}; truncating", RuntimeWarning, stacklevel=2)
        p1 = min(n, p)
    center = X.mean(axis=0)
    Xc = X - center
    total = float((Xc ** 2).sum() / n)
    if p <= EIGH_MAX_P or p1 >= min(n, p) - 1:
        if p <= n or p <= EIGH_MAX_P:
            cov = Xc.T @ Xc / n
            vals, vecs = linalg.eigh(cov)
        else:
            # n < p: eigenvectors of the Gram matrix mapped back to feature space
            gram = Xc @ Xc.T / n
            gvals, gvecs = linalg.eigh(gram)
            vals = gvals
            keep = gvals > 0
            vecs = np.zeros((p, len(gvals)))
            vecs[:, keep] = Xc.T @ gvecs[:, keep] / np.sqrt(n * gvals[keep])
        order = np.argsort(vals)[::-1]
        vals = vals[order][:p1]
        vecs = vecs[:, order][:, :p1]
    else:
        op = LinearOperator((p, p), matvec=lambda v: Xc.T @ (Xc @ v) / n, dtype=np.float64)
        v0 = np.ones(p) / np.sqrt(p)
        vals, vecs = eigsh(op, k=p1, which="LA", v0=v0, tol=1e-12, maxiter=max(1000, 20 * p1))
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
    vals = np.clip(vals, 0.0, None)
    rank = int((vals > rank_tol * max(vals.max(initial=0.0), 1e-300)).sum())
    if rank < len(vals):
        warnings.warn(f"p1={len(vals)} exceeds numerical rank {rank}; truncating", RuntimeWarning, stacklevel=2)
        vals, vecs = vals[:rank], vecs[:, :rank]
    C = _fix_signs(vecs)
    share = vals / total if total > 0 else np.zeros_like(vals)
    return PcaBasis(C, share, center, vals)


def pca_transform(X, basis: PcaBasis) -> np.ndarray:
    """Projection of centred ``X`` on the basis: ``(X - center) @ C``."""
    return (np.asarray(X, dtype=np.float64) - basis.center) @ basis.components


# ---------------------------------------------------------------------------
# logistic regression

def sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(t, dtype=float)))


def logistic_nll(theta, X, y, l2: float = 0.0):
    """Mean negative log-likelihood; ``theta = (b0, beta...)``."""
    eta = theta[0] + X @ theta[1:]
    val = np.mean(np.logaddexp(0.0, eta) - y * eta)
    return val + 0.5 * l2 * float(theta[1:] @ theta[1:])


def logistic_grad(theta, X, y, l2: float = 0.0):
    """Analytic gradient of :func:`logistic_nll`."""
    eta = theta[0] + X @ theta[1:]
    r = sigmoid(eta) - y
    n = len(y)
    g = np.empty(len(theta))
    g[0] = r.sum() / n
    g[1:] = X.T @ r / n + l2 * theta[1:]
    return g


@dataclass
class LogisticModel:
    intercept: float
    coef: np.ndarray
    se: np.ndarray                  # (intercept, coef...) standard errors
    pvalues: np.ndarray             # Wald, two-sided, same layout as ``se``
    diagnostics: dict = field(default_factory=dict)

    def decision(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision(X))

    def to_json(self) -> dict:
        return {"type": "logistic", "intercept": self.intercept, "coef": self.coef.tolist(),
                "se": self.se.tolist(), "pvalues": self.pvalues.tolist(), "diagnostics": self.diagnostics}


def logistic_fit(X, y, *, jitter: float = 1e-6, l2: float = 0.0, max_iter: int = 100,
                 tol: float = 1e-8, weights=None) -> LogisticModel:
    """Maximum-likelihood logistic regression by Newton/IRLS.

    ``jitter`` is added to the Hessian diagonal of the Newton step only, so the
    fixed point is still the (optionally ``l2``-penalized) MLE. Iteration stops
    when the max-norm of the mean-loss gradient drops below ``tol`` or after
    ``max_iter`` steps; a backtracking line search keeps each step a descent
    step. Standard errors come from the inverse observed information.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary")
    w_obs = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    wsum = w_obs.sum()
    A = np.hstack([np.ones((n, 1)), X])
    theta = np.zeros(p + 1)
    ybar = float((w_obs * y).sum() / wsum)
    if 0 < ybar < 1:
        theta[0] = math.log(ybar / (1 - ybar))
    pen = np.full(p + 1, l2)
    pen[0] = 0.0

    def loss(th):
        eta = A @ th
        return float((w_obs * (np.logaddexp(0.0, eta) - y * eta)).sum() / wsum + 0.5 * (pen * th * th).sum())

    f = loss(theta)
    converged = False
    g = np.zeros(p + 1)
    it = 0
    for it in range(1, max_iter + 1):
        eta = A @ theta
        mu = sigmoid(eta)
        g = A.T @ (w_obs * (mu - y)) / wsum + pen * theta
        if np.abs(g).max() < tol:
            converged = True
            it -= 1
            break
        W = w_obs * mu * (1 - mu) / wsum
        H = (A * W[:, None]).T @ A + np.diag(pen + jitter)
        try:
            step = linalg.solve(H, g, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(H, g)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            fc = loss(cand)
            if fc <= f + 1e-4 * t * float(g @ -step) or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    else:
        eta = A @ theta
        mu = sigmoid(eta)
        g = A.T @ (w_obs * (mu - y)) / wsum + pen * theta
        converged = np.abs(g).max() < tol

    mu = sigmoid(A @ theta)
    info = (A * (w_obs * mu * (1 - mu))[:, None]).T @ A + np.diag(pen * wsum)
    try:
        cov = linalg.inv(info)
    except linalg.LinAlgError:
        cov = linalg.pinv(info)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, theta / se, 0.0)
    pvals = 2 * stats.norm.sf(np.abs(z))
    diag = {
        "converged": bool(converged), "n_iter": int(it), "grad_max": float(np.abs(g).max()),
        "jitter": jitter, "l2": l2, "loss": f,
        "separation_suspected": bool(not converged or np.abs(theta).max() > 30),
    }
    if not converged:
        log.info("logistic fit did not converge (|grad|=%.2e)", diag["grad_max"])
    return LogisticModel(float(theta[0]), theta[1:].copy(), se, pvals, diag)


def filter_by_pvalue(model: LogisticModel, Z, y, threshold: float = 0.5, **fit_kw):
    """Keep inputs with Wald p < ``threshold`` and refit; returns ``(kept indices, model)``."""
    keep = np.flatnonzero(model.pvalues[1:] < threshold)
    if len(keep) == 0:
        raise ModelError(f"no coefficient has p < {threshold}")
    return keep, logistic_fit(np.asarray(Z)[:, keep], y, **fit_kw)


def oversample(X, y, factor: int):
    """Repeat every positive row ``factor`` times; negatives unchanged. Returns ``(X, y, index)``."""
    if int(factor) != factor or factor < 2:
        raise ValueError("oversampling factor must be an integer >= 2")
    y = np.asarray(y)
    pos = np.flatnonzero(y == 1)
    if len(pos) == 0:
        raise ModelError("no positive rows to oversample")
    idx = np.concatenate([np.arange(len(y)), np.repeat(pos, int(factor) - 1)])
    return np.asarray(X)[idx], y[idx], idx


# ---------------------------------------------------------------------------
# ranking helpers

def roc_auc(scores, y) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    y = np.asarray(y).astype(bool)
    n1 = y.sum()
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both classes must be present")
    r = stats.rankdata(scores)
    return float((r[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def stratified_folds(y, k: int, seed: int = 0) -> list:
    """``k`` disjoint index arrays, each class dealt round-robin after a seeded shuffle."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = np.arange(len(idx)) % k
    return [np.flatnonzero(fold == f) for f in range(k)]


# ---------------------------------------------------------------------------
# lasso-logistic

@numba.njit(cache=True)
def _cd_quadratic(Xt, z, w, beta, b0, lam, h, max_sweeps, tol):
    """Weighted least-squares lasso by cyclic coordinate descent with an active-set strategy.

    Minimizes (1/2) sum_i w_i (z_i - b0 - x_i beta)^2 + lam |beta|_1 where the
    weights already include the 1/n factor. ``Xt`` is p x n.
    """
    p, n = Xt.shape
    r = z - b0
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                r[i] -= Xt[j, i] * beta[j]
    wsum = w.sum()
    full = True
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        dmax = 0.0
        # intercept
        s = 0.0
        for i in range(n):
            s += w[i] * r[i]
        db = s / wsum
        if db != 0.0:
            b0 += db
            for i in range(n):
                r[i] -= db
            if abs(db) > dmax:
                dmax = abs(db)
        for j in range(p):
            if not full and beta[j] == 0.0:
                continue
            if h[j] <= 0.0:
                continue
            g = 0.0
            for i in range(n):
                g += w[i] * Xt[j, i] * r[i]
            g += h[j] * beta[j]
            if g > lam:
                nb = (g - lam) / h[j]
            elif g < -lam:
                nb = (g + lam) / h[j]
            else:
                nb = 0.0
            d = nb - beta[j]
            if d != 0.0:
                for i in range(n):
                    r[i] -= Xt[j, i] * d
                beta[j] = nb
                if abs(d) * math.sqrt(h[j]) > dmax:
                    dmax = abs(d) * math.sqrt(h[j])
        if dmax < tol:
            if full:
                break
            full = True
        else:
            full = False
    return b0, sweeps


@dataclass
class SparseLinearModel:
    kind: str                       # "lasso" or "svm"
    intercept: float
    coef: np.ndarray
    lam: float | None = None
    support: np.ndarray | None = None     # indices into the input columns the model was fitted on
    diagnostics: dict = field(default_factory=dict)

    def decision(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision(X))

    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.coef != 0)

    def to_json(self) -> dict:
        return {"type": self.kind, "intercept": self.intercept, "coef": self.coef.tolist(), "lam": self.lam,
                "support": None if self.support is None else np.asarray(self.support).tolist(),
                "diagnostics": self.diagnostics}


def _lasso_objective(X, y, b0, beta, lam):
    eta = b0 + X @ beta
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta) + lam * np.abs(beta).sum())


def lasso_logistic_path(X, y, lams, *, max_outer: int = 100, tol: float = 1e-10, max_sweeps: int = 10000,
                        b0=None, beta=None):
    """Coefficients along a descending ``lams`` path with warm starts.

    Each outer step forms the IRLS quadratic approximation of the mean
    log-loss and solves its lasso by coordinate descent; a backtracking step
    on the penalized objective guards against overshooting.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    Xt = np.ascontiguousarray(X.T)
    ybar = y.mean()
    if b0 is None:
        b0 = math.log(ybar / (1 - ybar)) if 0 < ybar < 1 else 0.0
    beta = np.zeros(p) if beta is None else np.array(beta, dtype=float)
    out = []
    for lam in lams:
        f = _lasso_objective(X, y, b0, beta, lam)
        n_outer = 0
        for n_outer in range(1, max_outer + 1):
            eta = b0 + X @ beta
            mu = sigmoid(eta)
            w = np.clip(mu * (1 - mu), 1e-5, None)
            z = eta + (y - mu) / w
            wn = w / n
            h = (Xt * Xt) @ wn
            nb = beta.copy()
            nb0, _ = _cd_quadratic(Xt, z, wn, nb, b0, lam, h, max_sweeps, tol * 1e-2)
            t = 1.0
            while True:
                cb0 = b0 + t * (nb0 - b0)
                cb = beta + t * (nb - beta)
                fc = _lasso_objective(X, y, cb0, cb, lam)
                if fc <= f + 1e-12 or t < 1e-6:
                    break
                t *= 0.5
            change = max(abs(cb0 - b0), float(np.abs(cb - beta).max(initial=0.0)))
            b0, beta, f = cb0, cb, fc
            if change < tol:
                break
        out.append((float(b0), beta.copy(), n_outer))
    return out


def default_lambda_grid(X, y, n: int = 20, ratio: float = 0.01) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    # nudged above the exact bound so rounding cannot leave a 1e-16 coefficient at the top
    lam_max = float(np.abs(X.T @ (y - y.mean())).max() / len(y)) * (1 + 1e-9)
    return lam_max * np.logspace(0, np.log10(ratio), n)


def lasso_logistic_fit(X, y, lam_grid=None, folds: int = 5, seed: int = 0, *, tol: float = 1e-8,
                       max_outer: int = 50) -> SparseLinearModel:
    """L1-penalized logistic regression with lambda picked by cross-validated AUC.

    Objective: mean log-loss + lambda * |beta|_1 (intercept unpenalized). The
    grid must be positive and descending; the largest lambda is kept on AUC
    ties. The final model is refitted on all rows along the path.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lams = default_lambda_grid(X, y) if lam_grid is None else np.asarray(lam_grid, dtype=float)
    if np.any(lams <= 0) or np.any(np.diff(lams) >= 0):
        raise ValueError("lambda grid must be positive and strictly descending")
    auc = np.zeros((folds, len(lams)))
    for f, test in enumerate(stratified_folds(y, folds, seed)):
        train = np.setdiff1d(np.arange(len(y)), test)
        if y[train].min() == y[train].max() or y[test].min() == y[test].max():
            raise ModelError("a fold lacks one of the classes")
        path = lasso_logistic_path(X[train], y[train], lams, tol=tol, max_outer=max_outer)
        for k, (b0, beta, _) in enumerate(path):
            auc[f, k] = roc_auc(b0 + X[test] @ beta, y[test])
    mean_auc = auc.mean(axis=0)
    best = int(np.flatnonzero(mean_auc >= mean_auc.max() - 1e-12)[0])
    path = lasso_logistic_path(X, y, lams[: best + 1], tol=tol, max_outer=max_outer)
    b0, beta, n_outer = path[-1]
    support_sizes = [int((b != 0).sum()) for _, b, _ in path]
    all_zero = max(support_sizes) == 0
    if all_zero:
        warnings.warn("lasso selected no feature at any lambda", RuntimeWarning, stacklevel=2)
    diag = {"cv_auc": mean_auc.tolist(), "lambdas": lams.tolist(), "best_index": best,
            "support_sizes": support_sizes, "all_zero": all_zero, "n_outer": n_outer}
    return SparseLinearModel("lasso", b0, beta, float(lams[best]), np.flatnonzero(beta != 0), diag)


# ---------------------------------------------------------------------------
# linear SVM

def linear_svm_fit(X, y, C_reg: float = 1.0, seed: int = 0, *, n_iter: int = 2000,
                   eta0: float = 1.0) -> SparseLinearModel:
    """L2-regularized hinge loss by full-batch subgradient descent.

    Minimizes ``0.5 |w|^2 / (C n) + mean hinge`` with steps ``eta0 / sqrt(t)``
    from a zero start and keeps the iterate with the lowest objective. The
    schedule is fixed, so ``seed`` only enters the record.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    s = np.where(np.asarray(y) == 1, 1.0, -1.0)
    lam = 1.0 / (C_reg * n)
    scale = max(float(np.sqrt((X ** 2).sum(axis=1)).max(initial=0.0)), 1.0)
    w = np.zeros(p)
    b = 0.0
    best = (np.inf, w.copy(), b)
    for t in range(1, n_iter + 1):
        m = s * (X @ w + b)
        viol = m < 1
        obj = 0.5 * lam * float(w @ w) + float(np.maximum(0, 1 - m).mean())
        if not np.isfinite(obj):
            raise ModelError("non-finite SVM objective")
        if obj < best[0]:
            best = (obj, w.copy(), b)
        gw = lam * w - (X[viol] * s[viol, None]).sum(axis=0) / n
        gb = -s[viol].sum() / n
        step = eta0 / (scale * math.sqrt(t))
        w = w - step * gw
        b = b - step * gb
    obj, w, b = best
    diag = {"objective": obj, "n_iter": n_iter, "C": C_reg, "seed": seed,
            "train_hinge": float(np.maximum(0, 1 - s * (X @ w + b)).mean())}
    return SparseLinearModel("svm", float(b), w, None, None, diag)


# ---------------------------------------------------------------------------
# thresholding

def n_flagged(m: int, q: float) -> int:
    """``ceil((1 - q) m)``, robust to binary rounding of ``1 - q``."""
    return int(math.ceil(round((1.0 - q) * m, 9)))


def threshold_topquantile(scores, q: float = 0.95, ids=None) -> np.ndarray:
    """Flag exactly ``ceil((1 - q) m)`` highest scores; ties go to the smaller user id."""
    scores = np.asarray(scores, dtype=float)
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    m = len(scores)
    ids = np.arange(m) if ids is None else np.asarray(ids)
    tie = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    order = np.lexsort((tie, -scores))
    out = np.zeros(m, dtype=np.int8)
    out[order[: n_flagged(m, q)]] = 1
    return out


def rank_order(scores, ids) -> list:
    """Ids sorted by descending score, ties by id."""
    scores = np.asarray(scores, dtype=float)
    ids = np.asarray(ids)
    tie = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    return ids[np.lexsort((tie, -scores))].tolist()

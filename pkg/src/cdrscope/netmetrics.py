"""Harmonic centrality, reciprocity metrics and heavy-tailed distribution fits."""

from __future__ import annotations

import enum
import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.sparse import csgraph

from .graph import WeightedDigraph

LOG10E = np.log10(np.e)

# values measured on the proprietary network, for comparison only
REFERENCE = {
    "harmonic_mean": 4.61, "harmonic_std": 1.84,
    "harmonic_mean_rewired": 4.11, "harmonic_std_rewired": 1.20,
    "diameter": 6.24, "mean_path": 0.311,
    "reciprocated_pair_fraction": 0.6288,
    "corr_weighted_binary": 0.9224, "corr_weighted_hyper": 0.727,
    "lognormal_sigma_wij": 2.01, "stretched_beta_wij": 0.127,
}


class FitError(RuntimeError):
    """Distribution fit did not converge; ``diagnostics`` holds residual information."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class CentralityResult:
    nodes: list
    values: np.ndarray
    mean: float
    std: float
    n_nodes: int
    diameter: float
    mean_path: float
    sampled: bool = False

    def as_series(self) -> pd.Series:
        return pd.Series(self.values, index=self.nodes)

    def summary(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n_nodes": self.n_nodes, "diameter": self.diameter,
                "mean_path": self.mean_path, "sampled": self.sampled}


def harmonic_centrality(graph: WeightedDigraph, sources=None, *, exact_threshold: int = 50_000,
                        n_samples: int = 2_000, seed: int = 0, chunk: int = 256) -> CentralityResult:
    """C_H(i) = 1/(N-1) * sum_{j != i} 1/l_ij over shortest paths with d_ij = w_avg / w_ij.

    Unreachable pairs contribute zero. Diameter and mean path length are taken
    over reachable ordered pairs inside the weakly connected giant component.
    Above ``exact_threshold`` nodes the value of every node is estimated from
    ``n_samples`` seeded random targets (mean of 1/l over sampled targets).
    ``sources`` restricts the exact computation to the given node ids.
    """
    n = graph.n_nodes
    if n == 0:
        raise ValueError("empty graph")
    if n == 1 or graph.n_edges == 0:
        return CentralityResult(list(graph.nodes), np.zeros(n), 0.0, 0.0, n, 0.0, 0.0)
    dist = graph.distances()
    gc = graph.giant_component()
    sampled = n > exact_threshold and sources is None
    values = np.zeros(n)
    max_d, sum_d, cnt_d = 0.0, 0.0, 0
    if sampled:
        rng = np.random.default_rng(seed)
        targets = np.sort(rng.choice(n, size=min(n_samples, n), replace=False))
        acc = np.zeros(n)
        hits = np.full(n, float(len(targets)))
        hits[targets] -= 1
        dist_t = dist.T.tocsr()
        for lo in range(0, len(targets), chunk):
            tg = targets[lo:lo + chunk]
            # row r: distance from every node i to target tg[r]
            d = csgraph.dijkstra(dist_t, directed=True, indices=tg)
            d[np.arange(len(tg)), tg] = np.inf
            with np.errstate(divide="ignore"):
                inv = np.where(np.isfinite(d), 1.0 / d, 0.0)
            acc += inv.sum(axis=0)
            sub = d[gc[tg]][:, gc]
            fin = sub[np.isfinite(sub)]
            if fin.size:
                max_d = max(max_d, float(fin.max()))
                sum_d += float(fin.sum())
                cnt_d += fin.size
        values = acc / np.maximum(hits, 1)
        idx = np.arange(n)
    else:
        idx = np.arange(n) if sources is None else np.array([graph.index[s] for s in sources])
        for lo in range(0, len(idx), chunk):
            src = idx[lo:lo + chunk]
            d = csgraph.dijkstra(dist, directed=True, indices=src)
            d[np.arange(len(src)), src] = np.inf
            with np.errstate(divide="ignore"):
                inv = np.where(np.isfinite(d), 1.0 / d, 0.0)
            values[src] = inv.sum(axis=1) / (n - 1)
            sub = d[gc[src]][:, gc]
            fin = sub[np.isfinite(sub)]
            if fin.size:
                max_d = max(max_d, float(fin.max()))
                sum_d += float(fin.sum())
                cnt_d += fin.size
    vals = values[idx]
    nodes = [graph.nodes[i] for i in idx]
    return CentralityResult(nodes, vals, float(vals.mean()), float(vals.std()), n, max_d,
                            sum_d / cnt_d if cnt_d else 0.0, sampled)


def reciprocated_pair_fraction(graph: WeightedDigraph) -> float:
    """Share of directed edges i->j whose reverse edge j->i also exists."""
    if graph.n_edges == 0:
        raise ValueError("graph has no edges")
    n = graph.n_nodes
    fwd = graph.src * n + graph.dst
    rev = graph.dst * n + graph.src
    return float(np.isin(fwd, rev).mean())


class Variant(str, enum.Enum):
    WEIGHTED = "WEIGHTED"
    BINARY = "BINARY"
    HYPER = "HYPER"


@dataclass
class ReciprocityResult:
    variant: Variant
    nodes: list               # nodes with at least one incident edge
    values: np.ndarray        # R_i in [-1, 1]
    k: np.ndarray             # normalizer used for WEIGHTED/BINARY
    pair_fraction: float

    def as_series(self) -> pd.Series:
        return pd.Series(self.values, index=self.nodes)

    def spikes(self) -> np.ndarray:
        return np.abs(self.values) == 1.0


def _incidences(graph: WeightedDigraph):
    """One row per (node, neighbour) dyad side: (node, w_out, w_in)."""
    n = graph.n_nodes
    w = graph.weight.astype(float)
    lo = np.minimum(graph.src, graph.dst)
    hi = np.maximum(graph.src, graph.dst)
    key = lo * n + hi
    uniq, inv = np.unique(key, return_inverse=True)
    w_lohi = np.zeros(len(uniq))
    w_hilo = np.zeros(len(uniq))
    fwd = graph.src < graph.dst
    np.add.at(w_lohi, inv[fwd], w[fwd])
    np.add.at(w_hilo, inv[~fwd], w[~fwd])
    a = uniq // n
    b = uniq % n
    node = np.concatenate([a, b])
    w_out = np.concatenate([w_lohi, w_hilo])
    w_in = np.concatenate([w_hilo, w_lohi])
    return node, w_out, w_in


def reciprocity(graph: WeightedDigraph, variant="WEIGHTED", k_convention: str = "dyad") -> ReciprocityResult:
    """Per-node reciprocity.

    WEIGHTED: R_i = 1/k_i * sum_j (w_ij - w_ji)/(w_ij + w_ji)
    BINARY:   same average of r_ij in {-1, 0, +1}
    HYPER:    R_i = sum_j (w_ij - w_ji) / sum_j (w_ij + w_ji)

    ``k_convention`` is ``"dyad"`` (k_i = distinct neighbours) or ``"in_out"``
    (k_i = in-degree + out-degree).
    """
    variant = Variant(variant)
    node, w_out, w_in = _incidences(graph)
    n = graph.n_nodes
    if k_convention == "dyad":
        k = np.bincount(node, minlength=n).astype(float)
    elif k_convention == "in_out":
        k = (graph.out_degree() + graph.in_degree()).astype(float)
    else:
        raise ValueError("k_convention must be 'dyad' or 'in_out'")
    if variant is Variant.WEIGHTED:
        num = np.bincount(node, weights=(w_out - w_in) / (w_out + w_in), minlength=n)
        den = k
    elif variant is Variant.BINARY:
        r = (w_out > 0).astype(float) - (w_in > 0).astype(float)
        num = np.bincount(node, weights=r, minlength=n)
        den = k
    else:
        num = np.bincount(node, weights=w_out - w_in, minlength=n)
        den = np.bincount(node, weights=w_out + w_in, minlength=n)
    has = np.bincount(node, minlength=n) > 0
    vals = num[has] / den[has]
    frac = reciprocated_pair_fraction(graph) if graph.n_edges else float("nan")
    return ReciprocityResult(variant, [graph.nodes[i] for i in np.flatnonzero(has)], vals, k[has], frac)


def reciprocity_metric_correlation(graph: WeightedDigraph, exclude_spikes: bool = False,
                                   k_convention: str = "dyad") -> dict:
    """Pearson r between the per-node scores of every pair of variants."""
    res = {v: reciprocity(graph, v, k_convention) for v in Variant}
    keep = np.ones(len(res[Variant.WEIGHTED].values), dtype=bool)
    if exclude_spikes:
        for r in res.values():
            keep &= ~r.spikes()
    if keep.sum() < 2:
        raise ValueError("need at least two nodes scored under every variant")
    out = {}
    for a, b in itertools.combinations_with_replacement(list(Variant), 2):
        x, y = res[a].values[keep], res[b].values[keep]
        if x.std() == 0 or y.std() == 0:
            raise ValueError(f"zero variance in {a.value} or {b.value} scores")
        out[f"{a.value}-{b.value}"] = float(np.corrcoef(x, y)[0, 1])
    return out


class Family(str, enum.Enum):
    LOG_NORMAL = "LOG_NORMAL"
    STRETCHED_EXP = "STRETCHED_EXP"


@dataclass
class FitResult:
    family: Family
    params: dict
    r2: float
    bin_edges: np.ndarray
    bin_centers: np.ndarray
    log_density: np.ndarray
    discrete: bool = False
    reference: dict = field(default_factory=dict)

    def predict_log_density(self, x):
        return _model(self.family)(np.asarray(x, float), *self._vector())

    def _vector(self):
        p = self.params
        if self.family is Family.LOG_NORMAL:
            return p["log10_amplitude"], p["mu"], p["sigma"]
        return p["log10_amplitude"], p["alpha"], p["beta"]

    def to_json(self) -> dict:
        return {"family": self.family.value, "params": self.params, "r2": self.r2,
                "bins": {"edges": self.bin_edges.tolist(), "centers": self.bin_centers.tolist(),
                         "log10_density": self.log_density.tolist(), "discrete": self.discrete}}


def _lognormal(x, c, mu, sigma):
    return c - np.log10(x) - LOG10E * (np.log(x) - mu) ** 2 / (2 * sigma ** 2)


def _stretched(x, c, alpha, beta):
    return c - LOG10E * x ** beta / alpha


def _model(family):
    return _lognormal if family is Family.LOG_NORMAL else _stretched


def log_binned_density(samples, n_bins: int = 50):
    """Occupied log-spaced bins and their empirical densities.

    Integer-valued samples use integer bin edges, with each bin's width being
    the number of integers it contains.
    """
    x = np.asarray(samples, dtype=float)
    x = x[x > 0]
    edges = np.logspace(np.log10(x.min()), np.log10(x.max()), n_bins + 1)
    discrete = bool(np.all(x == np.round(x)))
    if discrete:
        edges = np.unique(np.floor(edges))
        edges = np.append(edges[:-1], x.max() + 1)
        if len(edges) < 2:
            edges = np.array([x.min(), x.max() + 1])
        counts, _ = np.histogram(x, bins=edges)
        width = np.diff(edges)
        centers = np.sqrt(edges[:-1] * (edges[1:] - 1))
    else:
        edges[-1] = np.nextafter(edges[-1], np.inf)
        counts, _ = np.histogram(x, bins=edges)
        width = np.diff(edges)
        centers = np.sqrt(edges[:-1] * edges[1:])
    occ = counts > 0
    dens = counts[occ] / (len(x) * width[occ])
    return edges, centers[occ], np.log10(dens), discrete


def fit_distribution(samples, family="LOG_NORMAL", n_bins: int = 50, max_nfev: int = 2000) -> FitResult:
    """Least-squares fit of log10(density) over occupied log bins; R^2 in the same space."""
    family = Family(family)
    x = np.asarray(samples, dtype=float)
    if (x > 0).sum() < 20:
        raise ValueError("need at least 20 positive samples")
    edges, xc, ly, discrete = log_binned_density(x, n_bins)
    if len(xc) < 4:
        raise FitError("fewer than four occupied bins", {"n_bins": len(xc)})
    if family is Family.LOG_NORMAL:
        # the log-normal is quadratic in ln x, so the linear LS solution is an exact start
        a2, a1, a0 = np.polyfit(np.log(xc), ly + np.log10(xc), 2)
        if a2 < 0:
            sigma0 = np.sqrt(-LOG10E / (2 * a2))
            mu0 = a1 * sigma0 ** 2 / LOG10E
        else:
            lx = np.log(x[x > 0])
            mu0, sigma0 = lx.mean(), max(lx.std(), 1e-3)
        p0 = [float(np.max(ly + np.log10(xc))), mu0, sigma0]
        bounds = ([-np.inf, -np.inf, 1e-6], [np.inf, np.inf, np.inf])
    else:
        best = None
        for beta in np.linspace(0.05, 2.0, 40):
            slope, icpt = np.polyfit(xc ** beta, ly, 1)
            if slope >= 0:
                continue
            sse = ((icpt + slope * xc ** beta - ly) ** 2).sum()
            if best is None or sse < best[0]:
                best = (sse, icpt, -LOG10E / slope, beta)
        if best is None:
            raise FitError("density does not decay; no stretched-exponential start", {"n_bins": len(xc)})
        p0 = list(best[1:])
        bounds = ([-np.inf, 1e-12, 1e-4], [np.inf, np.inf, 10.0])
    model = _model(family)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            popt, _ = optimize.curve_fit(model, xc, ly, p0=p0, bounds=bounds, max_nfev=max_nfev)
    except (RuntimeError, ValueError) as exc:
        resid = ly - model(xc, *p0)
        raise FitError(f"{family.value} fit did not converge: {exc}",
                       {"start": p0, "rms_residual_at_start": float(np.sqrt((resid ** 2).mean()))}) from exc
    resid = ly - model(xc, *popt)
    ss_tot = ((ly - ly.mean()) ** 2).sum()
    r2 = float(1 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else 1.0
    if family is Family.LOG_NORMAL:
        params = {"log10_amplitude": float(popt[0]), "mu": float(popt[1]), "sigma": float(popt[2])}
    else:
        params = {"log10_amplitude": float(popt[0]), "alpha": float(popt[1]), "beta": float(popt[2])}
    return FitResult(family, params, r2, edges, xc, ly, discrete)


def write_node_metrics(path, metrics: dict):
    """Long-format CSV ``user_id,metric,value`` from ``{metric: pd.Series}``."""
    frames = [pd.DataFrame({"user_id": s.index, "metric": name, "value": s.to_numpy()})
              for name, s in metrics.items()]
    out = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["user_id", "metric", "value"])
    out.to_csv(path, index=False)


def write_fits(path, fits: dict):
    with open(path, "w") as fh:
        json.dump({k: v.to_json() for k, v in fits.items()}, fh, indent=2)

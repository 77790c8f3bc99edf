"""Weighted and cutoff-thresholded communication graphs."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, sparse, special
from scipy.sparse import csgraph

log = logging.getLogger(__name__)


class Digraph:
    """Simple directed graph over a fixed, sorted node list (edge arrays, no weights)."""

    def __init__(self, nodes, src, dst):
        self.nodes = list(nodes)
        self.index = {v: i for i, v in enumerate(self.nodes)}
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        if np.any(self.src == self.dst):
            raise ValueError("self-loops are not allowed")
        for a in (self.src, self.dst):
            a.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def edge_set(self) -> set:
        return set(zip(self.src.tolist(), self.dst.tolist()))

    def adjacency(self, values=None) -> sparse.csr_matrix:
        vals = np.ones(self.n_edges) if values is None else values
        return sparse.csr_matrix((vals, (self.src, self.dst)), shape=(self.n_nodes, self.n_nodes))

    def out_degree(self) -> np.ndarray:
        return np.bincount(self.src, minlength=self.n_nodes)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)

    def weak_components(self) -> np.ndarray:
        _, labels = csgraph.connected_components(self.adjacency(), directed=True, connection="weak")
        return labels

    def giant_component(self) -> np.ndarray:
        """Boolean mask of the largest weakly connected component (ties: lowest label)."""
        labels = self.weak_components()
        sizes = np.bincount(labels)
        return labels == int(np.argmax(sizes))


class WeightedDigraph(Digraph):
    """Directed graph with positive integer communication counts ``w_ij``."""

    def __init__(self, nodes, src, dst, weight):
        super().__init__(nodes, src, dst)
        self.weight = np.asarray(weight, dtype=np.int64)
        if len(self.weight) != len(self.src):
            raise ValueError("one weight per edge required")
        if np.any(self.weight < 1):
            raise ValueError("edge weights must be >= 1")
        if len(self.edge_set()) != self.n_edges:
            raise ValueError("parallel edges are not allowed")
        self.weight.setflags(write=False)

    @property
    def w_avg(self) -> float:
        return float(self.weight.sum() / self.n_edges) if self.n_edges else float("nan")

    def weight_of(self, a, b) -> int:
        i, j = self.index[a], self.index[b]
        hit = np.flatnonzero((self.src == i) & (self.dst == j))
        return int(self.weight[hit[0]]) if len(hit) else 0

    def distances(self) -> sparse.csr_matrix:
        """Sparse matrix of edge lengths ``d_ij = w_avg / w_ij`` (heavier edges are shorter)."""
        return self.adjacency(self.w_avg / self.weight.astype(float))

    def out_strength(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.weight, minlength=self.n_nodes)

    def in_strength(self) -> np.ndarray:
        return np.bincount(self.dst, weights=self.weight, minlength=self.n_nodes)

    def reversed(self) -> "WeightedDigraph":
        return WeightedDigraph(self.nodes, self.dst, self.src, self.weight)

    def scaled(self, factor: int) -> "WeightedDigraph":
        return WeightedDigraph(self.nodes, self.src, self.dst, self.weight * int(factor))

    def to_frame(self) -> pd.DataFrame:
        names = np.array(self.nodes, dtype=object)
        return pd.DataFrame({"src": names[self.src], "dst": names[self.dst], "weight": self.weight})

    def write_edges(self, path):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_edges(cls, edges, nodes=None) -> "WeightedDigraph":
        """Build from ``(src, dst, weight)`` triples; node list defaults to all endpoints."""
        edges = list(edges)
        names = set(nodes or [])
        for a, b, _ in edges:
            names.update((a, b))
        order = sorted(names)
        idx = {v: i for i, v in enumerate(order)}
        src = [idx[a] for a, _, _ in edges]
        dst = [idx[b] for _, b, _ in edges]
        return cls(order, src, dst, [w for _, _, w in edges])


def build_weighted(dataset) -> WeightedDigraph:
    """Edge i->j with ``w_ij`` = number of events (calls and messages alike) from i to j."""
    ev = dataset.events
    nodes = sorted(set(dataset.users) | set(ev["caller"].unique()) | set(ev["callee"].unique()))
    if len(ev) == 0:
        return WeightedDigraph(nodes, [], [], [])
    codes = pd.Index(nodes)
    s = codes.get_indexer(ev["caller"])
    d = codes.get_indexer(ev["callee"])
    key = s.astype(np.int64) * len(nodes) + d
    uniq, counts = np.unique(key, return_counts=True)
    return WeightedDigraph(nodes, uniq // len(nodes), uniq % len(nodes), counts)


def apply_cutoff(graph: WeightedDigraph, c: int) -> Digraph:
    """Unweighted graph keeping edge i->j iff ``w_ij >= c``."""
    if c < 1 or int(c) != c:
        raise ValueError("cutoff must be an integer >= 1")
    keep = graph.weight >= c
    return Digraph(graph.nodes, graph.src[keep], graph.dst[keep])


@dataclass
class CurveFit:
    name: str
    parameter: float | None
    intercept: float | None
    r2: float | None
    error: str | None = None

    def to_json(self):
        return {"name": self.name, "parameter": self.parameter, "intercept": self.intercept,
                "r2": self.r2, "error": self.error}


@dataclass
class CutoffSweepResult:
    cutoffs: list
    gc_fraction: list
    edge_count: list
    isolated_outside_gc: list
    gc_decay: CurveFit          # gc_fraction ~ exp(-lambda c)
    edge_decay: CurveFit        # edge_count ~ c**(-gamma)
    # values measured on real operator data, kept for comparison only
    reference: dict = field(default_factory=lambda: {"lambda": 0.0238, "gamma": 0.7536})

    def records(self) -> list[dict]:
        return [{"cutoff": c, "gc_fraction": g, "edge_count": e, "isolated_outside_gc": i}
                for c, g, e, i in zip(self.cutoffs, self.gc_fraction, self.edge_count, self.isolated_outside_gc)]

    def to_json(self) -> dict:
        return {"records": self.records(), "gc_decay": self.gc_decay.to_json(),
                "edge_decay": self.edge_decay.to_json(), "reference": self.reference}

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def _loglinear_fit(name, x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = y > 0
    if ok.sum() < 3:
        return CurveFit(name, None, None, None, f"only {int(ok.sum())} positive points")
    ly = np.log(y[ok])
    slope, intercept = np.polyfit(x[ok], ly, 1)
    resid = ly - (slope * x[ok] + intercept)
    ss_tot = ((ly - ly.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return CurveFit(name, float(-slope), float(intercept), float(r2))


def cutoff_sweep(graph: WeightedDigraph, c_max: int) -> CutoffSweepResult:
    """Giant-component fraction, edge count and isolated share outside the GC for c = 1..c_max."""
    if c_max < 2:
        raise ValueError("c_max must be >= 2")
    cs, gcs, ecs, iso = [], [], [], []
    for c in range(1, c_max + 1):
        g = apply_cutoff(graph, c)
        gc = g.giant_component()
        deg = g.out_degree() + g.in_degree()
        outside = ~gc
        cs.append(c)
        gcs.append(float(gc.mean()) if g.n_nodes else 0.0)
        ecs.append(int(g.n_edges))
        iso.append(float((deg[outside] == 0).sum() / outside.sum()) if outside.any() else 0.0)
    gc_fit = _loglinear_fit("exponential", cs, gcs)
    edge_fit = _loglinear_fit("power_law", np.log(cs), ecs)
    for f in (gc_fit, edge_fit):
        if f.error:
            log.warning("cutoff sweep %s fit failed: %s", f.name, f.error)
    return CutoffSweepResult(cs, gcs, ecs, iso, gc_fit, edge_fit)


def rewire_random(graph: WeightedDigraph, seed: int = 0, n_attempts: int | None = None) -> WeightedDigraph:
    """Degree-preserving null model by pairwise destination swaps.

    Each attempt picks two edges a->b, c->d and proposes a->d, c->b; swaps that
    would create a self-loop or a parallel edge are rejected. Weights stay with
    the edge's source side, so out-strength per edge is untouched.
    """
    m = graph.n_edges
    if m < 2:
        raise ValueError("rewiring needs at least two edges")
    n_attempts = 10 * m if n_attempts is None else int(n_attempts)
    rng = np.random.default_rng(seed)
    src = graph.src.tolist()
    dst = graph.dst.tolist()
    present = set(zip(src, dst))
    picks = rng.integers(0, m, size=(n_attempts, 2))
    accepted = 0
    for e1, e2 in picks.tolist():
        if e1 == e2:
            continue
        a, b, c, d = src[e1], dst[e1], src[e2], dst[e2]
        if a == d or c == b or (a, d) in present or (c, b) in present:
            continue
        present.difference_update(((a, b), (c, d)))
        present.update(((a, d), (c, b)))
        dst[e1], dst[e2] = d, b
        accepted += 1
    if accepted == 0:
        warnings.warn("no valid destination swap found; returning the input graph", RuntimeWarning, stacklevel=2)
        return graph
    return WeightedDigraph(graph.nodes, src, dst, graph.weight)


def discrete_powerlaw_mle(samples, x_min: int, bounds=(1.0001, 8.0)) -> float:
    """Exponent of P(k) ~ k**-alpha for k >= x_min by discrete maximum likelihood."""
    k = np.asarray(samples, dtype=float)
    k = k[k >= x_min]
    n = len(k)
    s = np.log(k).sum()

    def nll(alpha):
        return n * np.log(special.zeta(alpha, x_min)) + alpha * s

    res = optimize.minimize_scalar(nll, bounds=bounds, method="bounded", options={"xatol": 1e-7})
    return float(res.x)


@dataclass
class DegreeDistribution:
    direction: str
    histogram: np.ndarray        # histogram[k] = number of nodes with degree k
    x_min: int
    n_tail: int
    exponent: float | None       # None when fewer than 10 tail points

    def to_json(self):
        return {"direction": self.direction, "histogram": self.histogram.tolist(), "x_min": self.x_min,
                "n_tail": self.n_tail, "exponent": self.exponent}


def degree_distribution(graph: Digraph, direction: str = "out", x_min: int = 5) -> DegreeDistribution:
    if graph.n_nodes == 0:
        raise ValueError("empty graph")
    if direction == "out":
        deg = graph.out_degree()
    elif direction == "in":
        deg = graph.in_degree()
    else:
        raise ValueError("direction must be 'out' or 'in'")
    hist = np.bincount(deg)
    n_tail = int((deg >= x_min).sum())
    exponent = discrete_powerlaw_mle(deg, x_min) if n_tail >= 10 else None
    return DegreeDistribution(direction, hist, x_min, n_tail, exponent)

"""Speaker-listener label propagation (SLPA) and community/district composition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numba
import numpy as np
import pandas as pd
from scipy import sparse

from .graph import WeightedDigraph

# district composition measured on real operator data (comparison only)
REFERENCE = {"top1_share": 0.41, "top5_cumulative_share": 0.78, "n_communities": 6450, "mean_size": 74.65}


@dataclass
class CommunityCover:
    communities: list                 # list of frozensets of node ids
    memberships: dict                 # node id -> {label node id: memory frequency}
    T: int
    r: float
    seed: int
    labels: list = field(default_factory=list)   # label (node id) defining each community

    def sizes(self) -> list[int]:
        return [len(c) for c in self.communities]

    def membership_pairs(self) -> set:
        return {(v, lab) for v, labs in self.memberships.items() for lab in labs}

    def node_communities(self) -> dict:
        out = {}
        for ci, c in enumerate(self.communities):
            for v in c:
                out.setdefault(v, []).append(ci)
        return out

    def to_frame(self) -> pd.DataFrame:
        rows = [(ci, v) for ci, c in enumerate(self.communities) for v in sorted(c)]
        return pd.DataFrame(rows, columns=["community_id", "user_id"])

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False)


def undirected_weights(graph: WeightedDigraph) -> sparse.csr_matrix:
    """Symmetric CSR matrix with dyad weight w_ij + w_ji."""
    a = graph.adjacency(graph.weight.astype(float))
    return (a + a.T).tocsr()


@numba.njit(cache=True)
def _slpa_round(order, indptr, indices, weights, mem, lengths, u):
    cand = np.empty(indices.shape[0], dtype=np.int64)
    score = np.empty(indices.shape[0], dtype=np.float64)
    for i in order:
        lo, hi = indptr[i], indptr[i + 1]
        if hi == lo:
            continue
        m = 0
        for p in range(lo, hi):
            j = indices[p]
            lab = mem[j, int(u[p] * lengths[j])]
            w = weights[p]
            found = False
            for q in range(m):
                if cand[q] == lab:
                    score[q] += w
                    found = True
                    break
            if not found:
                cand[m] = lab
                score[m] = w
                m += 1
        best = cand[0]
        best_s = score[0]
        for q in range(1, m):
            if score[q] > best_s or (score[q] == best_s and cand[q] < best):
                best = cand[q]
                best_s = score[q]
        mem[i, lengths[i]] = best
        lengths[i] += 1


def slpa_detect(graph: WeightedDigraph, T: int = 100, r: float = 0.05, seed: int = 0,
                remove_nested: bool = True) -> CommunityCover:
    """Overlapping communities by speaker-listener label propagation.

    The graph is symmetrised with dyad weights w_ij + w_ji. Each round visits
    the nodes in a seeded random order; every neighbour speaks one label drawn
    uniformly from its memory, the listener keeps the label with the largest
    total dyad weight (ties to the smallest label) and appends it to memory.
    A node belongs to the community of every label whose memory frequency is
    at least ``r``. Duplicate and strictly nested communities are removed when
    ``remove_nested`` is set.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < r < 0.5:
        raise ValueError("r must lie in (0, 0.5)")
    n = graph.n_nodes
    adj = undirected_weights(graph)
    adj.sort_indices()
    indptr = adj.indptr.astype(np.int64)
    indices = adj.indices.astype(np.int64)
    weights = adj.data.astype(np.float64)
    mem = np.zeros((n, T + 1), dtype=np.int64)
    mem[:, 0] = np.arange(n)
    lengths = np.ones(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    for _ in range(T):
        order = rng.permutation(n).astype(np.int64)
        u = rng.random(len(indices))
        _slpa_round(order, indptr, indices, weights, mem, lengths, u)

    memberships = {}
    groups = {}
    for i in range(n):
        labs, counts = np.unique(mem[i, :lengths[i]], return_counts=True)
        freq = counts / lengths[i]
        keep = freq >= r
        node = graph.nodes[i]
        memberships[node] = {graph.nodes[l]: float(f) for l, f in zip(labs[keep], freq[keep])}
        for l in labs[keep]:
            groups.setdefault(int(l), []).append(node)
    labels = sorted(groups)
    comms = [frozenset(groups[l]) for l in labels]
    if remove_nested:
        keep_idx = []
        order = sorted(range(len(comms)), key=lambda k: (-len(comms[k]), labels[k]))
        kept = []
        for k in order:
            if any(comms[k] <= comms[j] for j in kept):
                continue
            kept.append(k)
        keep_idx = sorted(kept, key=lambda k: labels[k])
        comms = [comms[k] for k in keep_idx]
        labels = [labels[k] for k in keep_idx]
    return CommunityCover(comms, memberships, T, r, seed, [graph.nodes[l] for l in labels])


@dataclass
class DistrictOverlap:
    top_k: int
    shares: np.ndarray          # (n_communities, top_k), descending per row
    mean_share: np.ndarray      # mean over communities per rank
    mean_cumulative: np.ndarray
    community_index: list

    def to_json(self) -> dict:
        return {"top_k": self.top_k, "mean_share": self.mean_share.tolist(),
                "mean_cumulative": self.mean_cumulative.tolist(), "reference": REFERENCE}


def district_overlap(cover: CommunityCover, users: dict, top_k: int = 5) -> DistrictOverlap:
    """Descending shares of each community's top-k districts (members outside ``users`` ignored)."""
    rows, idx = [], []
    for ci, comm in enumerate(cover.communities):
        districts = [users[v].district_id for v in comm if v in users]
        if not districts:
            continue
        counts = np.sort(np.unique(districts, return_counts=True)[1])[::-1] / len(districts)
        row = np.zeros(top_k)
        row[:min(top_k, len(counts))] = counts[:top_k]
        rows.append(row)
        idx.append(ci)
    shares = np.array(rows) if rows else np.zeros((0, top_k))
    mean = shares.mean(axis=0) if rows else np.zeros(top_k)
    return DistrictOverlap(top_k, shares, mean, np.cumsum(mean), idx)


def cover_summary(cover: CommunityCover, overlap: DistrictOverlap | None = None) -> dict:
    sizes = np.array(cover.sizes())
    out = {
        "n_communities": int(len(sizes)),
        "T": cover.T, "r": cover.r, "seed": cover.seed,
        "size_mean": float(sizes.mean()) if len(sizes) else 0.0,
        "size_median": float(np.median(sizes)) if len(sizes) else 0.0,
        "size_max": int(sizes.max()) if len(sizes) else 0,
        "sizes": sorted(sizes.tolist(), reverse=True),
    }
    if overlap is not None:
        out["district_overlap"] = overlap.to_json()
    return out


def write_summary(path, cover, overlap=None):
    with open(path, "w") as fh:
        json.dump(cover_summary(cover, overlap), fh, indent=2)

import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdrscope.community import district_overlap, slpa_detect
from cdrscope.graph import WeightedDigraph


def clique(names, w=1):
    return [(a, b, w) for a, b in itertools.permutations(names, 2)]


def random_graph(seed, n=10, p=0.3):
    rng = np.random.default_rng(seed)
    nodes = [f"v{i}" for i in range(n)]
    edges = [(nodes[a], nodes[b], int(rng.integers(1, 5)))
             for a in range(n) for b in range(n) if a != b and rng.random() < p]
    return WeightedDigraph.from_edges(edges, nodes)


def test_two_triangles():
    g = WeightedDigraph.from_edges(clique("abc") + clique("xyz"))
    cover = slpa_detect(g, T=20, r=0.1, seed=0)
    assert sorted(map(sorted, cover.communities)) == [["a", "b", "c"], ["x", "y", "z"]]


def test_singleton():
    cover = slpa_detect(WeightedDigraph.from_edges([], nodes=["solo"]), T=10, r=0.1)
    assert cover.communities == [frozenset({"solo"})]


def test_barbell():
    left, right = [f"l{i}" for i in range(6)], [f"r{i}" for i in range(6)]
    g = WeightedDigraph.from_edges(clique(left) + clique(right) + [("l0", "r0", 1)])
    cover = slpa_detect(g, T=100, r=0.3, seed=2)
    assert len(cover.communities) == 2
    core = [c - {"l0", "r0"} for c in cover.communities]
    assert sorted(map(sorted, core)) == [sorted(left[1:]), sorted(right[1:])]


def test_parameter_validation():
    g = WeightedDigraph.from_edges(clique("ab"))
    with pytest.raises(ValueError):
        slpa_detect(g, T=0)
    with pytest.raises(ValueError):
        slpa_detect(g, r=0.5)


def test_deterministic(small_dataset):
    from cdrscope.graph import build_weighted

    g = build_weighted(small_dataset)
    a, b = slpa_detect(g, seed=11), slpa_detect(g, seed=11)
    assert a.communities == b.communities and a.memberships == b.memberships


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), r1=st.floats(0.01, 0.45), dr=st.floats(0.0, 0.3))
def test_membership_monotone_in_r(seed, r1, dr):
    g = random_graph(seed)
    r2 = min(r1 + dr, 0.49)
    lo = slpa_detect(g, T=30, r=r1, seed=seed).membership_pairs()
    hi = slpa_detect(g, T=30, r=r2, seed=seed).membership_pairs()
    assert hi <= lo


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 40))
def test_full_coverage_below_bound(seed, T):
    g = random_graph(seed)
    cover = slpa_detect(g, T=T, r=0.99 / (T + 1), seed=seed)
    assert all(cover.memberships[v] for v in g.nodes)
    covered = set().union(*cover.communities)
    assert covered == set(g.nodes)


def _users(mapping):
    return {u: SimpleNamespace(district_id=d) for u, d in mapping.items()}


def test_district_shares():
    members = [f"u{i}" for i in range(10)]
    g = WeightedDigraph.from_edges(clique(members))
    cover = slpa_detect(g, T=20, r=0.1)
    assert len(cover.communities) == 1
    homog = district_overlap(cover, _users({u: "d1" for u in members}), top_k=2)
    assert homog.shares[0].tolist() == [1.0, 0.0]
    mixed = _users({u: ("d1" if i < 4 else "d2" if i < 7 else "d3") for i, u in enumerate(members)})
    ov = district_overlap(cover, mixed, top_k=2)
    np.testing.assert_allclose(ov.shares[0], [0.4, 0.3])
    np.testing.assert_allclose(ov.mean_cumulative, [0.4, 0.7])


def test_district_ignores_external_members():
    g = WeightedDigraph.from_edges(clique(["a", "b", "ext"]))
    cover = slpa_detect(g, T=10, r=0.1)
    ov = district_overlap(cover, _users({"a": "d1", "b": "d2"}), top_k=3)
    np.testing.assert_allclose(ov.shares[0], [0.5, 0.5, 0.0])

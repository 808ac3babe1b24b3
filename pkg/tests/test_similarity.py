import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_graph, cosine_loop, jaccard_sets
from patientgraph.ehr import CohortSpec, generate_cohort
from patientgraph.encoding import encode_cohort, fit_schema
from patientgraph.similarity import (
    GraphError,
    SimilarityParams,
    add_node,
    build_graph,
    compute_tau,
    cosine_similarity,
    hybrid_similarity,
    jaccard_similarity,
    recompute_similarity,
)


# -- components --------------------------------------------------------------

def test_cosine_examples():
    assert cosine_similarity([0.3, 0.4, 0.5], [0.3, 0.4, 0.5]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(cosine_loop([1, 1], [1, 0]), abs=1e-15)
    assert cosine_similarity([0, 0], [1, 0]) == 0.0
    with pytest.raises(GraphError):
        cosine_similarity([1, 2], [1, 2, 3])


def test_jaccard_examples():
    assert jaccard_similarity({1, 2}, {1, 2}) == 1.0
    assert jaccard_similarity({1}, {2}) == 0.0
    assert jaccard_similarity({1, 2}, {2, 3}) == pytest.approx(1 / 3)
    assert jaccard_similarity(set(), set()) == 0.0


def test_hybrid_identical_is_one(schema200, features200):
    fv = features200[5]
    for alpha in (0.0, 0.3, 0.7, 1.0):
        assert hybrid_similarity(fv, fv, schema200, SimilarityParams(alpha=alpha)) == pytest.approx(1.0, abs=1e-15)


def test_hybrid_arithmetic():
    assert 0.7 * 0.8 + 0.3 * 0.5 == pytest.approx(0.71, abs=1e-15)


def test_hybrid_matches_components(schema200, features200):
    nc = schema200.n_continuous
    for a in range(5):
        u, v = features200[a], features200[a + 10]
        cos = cosine_loop(u[:nc], v[:nc])
        jac = jaccard_sets({k for k in range(nc, 133) if u[k] == 1}, {k for k in range(nc, 133) if v[k] == 1})
        for alpha in (0.0, 0.7, 1.0):
            got = hybrid_similarity(u, v, schema200, SimilarityParams(alpha=alpha))
            assert got == pytest.approx(alpha * cos + (1 - alpha) * jac, abs=1e-12)
        assert hybrid_similarity(u, v, schema200, SimilarityParams(alpha=1.0)) == pytest.approx(cos, abs=1e-15)


def test_hybrid_symmetric_exactly(schema200, features200):
    p = SimilarityParams()
    for a in range(10):
        u, v = features200[a], features200[199 - a]
        assert hybrid_similarity(u, v, schema200, p) == hybrid_similarity(v, u, schema200, p)


def test_hybrid_schema_mismatch(schema200):
    with pytest.raises(GraphError):
        hybrid_similarity(np.zeros(10), np.zeros(10), schema200, SimilarityParams())


@pytest.mark.parametrize("kw", [{"alpha": -0.1}, {"alpha": 1.1}, {"tau_percentile": 0.0}, {"tau_percentile": 100.0}])
def test_params_validated(kw):
    with pytest.raises(GraphError):
        SimilarityParams(**kw)


# -- threshold ---------------------------------------------------------------

def test_tau_decile_grid():
    values = [round(0.1 * k, 1) for k in range(1, 11)]
    tau = compute_tau(values, 90)
    assert tau == 0.9
    assert sum(v > tau for v in values) == 1


def test_tau_degenerate_lists():
    assert compute_tau([0.42], 90) == 0.42
    assert compute_tau([0.42], 1) == 0.42
    assert compute_tau([0.3] * 7, 90) == 0.3
    with pytest.raises(GraphError):
        compute_tau([], 90)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0.5, 99.5))
def test_tau_nearest_rank(values, p):
    ordered = sorted(values)
    rank = math.ceil(round(p / 100 * len(ordered), 9))
    assert compute_tau(values, p) == ordered[max(rank - 1, 0)]
    tau = compute_tau(values, p)
    assert sum(v > tau for v in values) <= len(values) - rank


# -- construction ------------------------------------------------------------

def test_graph_matches_brute_force(schema200, features200):
    ids = [f"P{i}" for i in range(200)]
    graph = build_graph(features200, ids, schema200, SimilarityParams())
    expected, tau = brute_force_graph(features200, schema200.n_continuous, 0.7, percentile=90)
    assert graph.tau == pytest.approx(tau, abs=1e-12)
    assert set(graph.edges) == set(expected)
    assert max(abs(graph.edges[k] - expected[k]) for k in expected) < 1e-12
    assert graph.n_edges <= 0.10 * math.comb(200, 2)
    assert all(graph.tau < w <= 1.0 for w in graph.edges.values())


def test_three_identical_patients_zero_edges(schema200, features200):
    X = np.vstack([features200[0]] * 3)
    graph = build_graph(X, ["a", "b", "c"], schema200, SimilarityParams())
    assert graph.n_edges == 0
    assert graph.n_nodes == 3


def test_tau_override_zero_gives_complete_graph(schema200, features200):
    X = features200[:40]
    graph = build_graph(X, [str(i) for i in range(40)], schema200, SimilarityParams(tau_override=0.0))
    assert graph.n_edges == math.comb(40, 2)


def test_build_errors(schema200, features200):
    with pytest.raises(GraphError):
        build_graph(features200[:1], ["a"], schema200)
    with pytest.raises(GraphError):
        build_graph(features200[:3], ["a", "b", "a"], schema200)
    with pytest.raises(GraphError):
        build_graph(features200[:3], ["a", "b"], schema200)


def test_isolated_nodes_kept(schema200, features200):
    X = features200[:30].copy()
    X[29] = 0.0
    graph = build_graph(X, [str(i) for i in range(30)], schema200, SimilarityParams())
    assert graph.n_nodes == 30
    assert graph.neighbors(29) == []


def test_recompute_similarity(schema200, features200):
    graph = build_graph(features200[:30], [str(i) for i in range(30)], schema200)
    for (i, j), w in list(graph.edges.items())[:20]:
        assert recompute_similarity(graph, i, j) == w
        assert recompute_similarity(graph, j, i) == w


# -- updates -----------------------------------------------------------------

def test_add_node_equals_rebuild():
    recs = generate_cohort(CohortSpec(51, seed=21))
    schema = fit_schema(recs)
    X = encode_cohort(recs, schema)
    ids = [r.id for r in recs]
    base = build_graph(X[:50], ids[:50], schema, SimilarityParams())
    frozen = SimilarityParams(tau_override=base.tau)
    grown = add_node(build_graph(X[:50], ids[:50], schema, frozen), X[50], ids[50])
    full = build_graph(X, ids, schema, frozen)
    assert grown.edges == full.edges
    assert grown.node_ids == full.node_ids


def test_add_duplicate_node(schema200, features200):
    graph = build_graph(features200[:40], [str(i) for i in range(40)], schema200)
    u = 7
    grown = add_node(graph, features200[u], "dup")
    new = grown.n_nodes - 1
    for v in range(40):
        if v == u:
            continue
        assert ((min(v, new), max(v, new)) in grown.edges) == ((min(u, v), max(u, v)) in graph.edges)
    assert ((u, new) in grown.edges) == (1.0 > graph.tau)
    # existing edges untouched
    assert {k: w for k, w in grown.edges.items() if new not in k} == graph.edges


def test_add_orthogonal_node_isolated(schema200, features200):
    graph = build_graph(features200[:40], [str(i) for i in range(40)], schema200)
    grown = add_node(graph, np.zeros(133), "ghost")
    assert grown.neighbors(40) == []


def test_add_node_errors(schema200, features200):
    graph = build_graph(features200[:10], [str(i) for i in range(10)], schema200)
    with pytest.raises(GraphError):
        add_node(graph, features200[11], "3")
    with pytest.raises(GraphError):
        add_node(graph, np.zeros(5), "new")


# -- export ------------------------------------------------------------------

def test_edge_list_export(tmp_path, schema200, features200):
    ids = [f"P{i}" for i in range(30)]
    graph = build_graph(features200[:30], ids, schema200)
    graph.write_edge_list(tmp_path / "e.csv")
    graph.write_sidecar(tmp_path / "g.json")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "u,v,weight"
    assert len(lines) == graph.n_edges + 1
    for line in lines[1:]:
        u, v, w = line.split(",")
        assert float(w) == pytest.approx(graph.weight(graph.index(u), graph.index(v)), abs=1e-11)
    side = graph.sidecar()
    assert side["tau"] == graph.tau and side["n_edges"] == graph.n_edges and side["alpha"] == 0.7

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsgnn import evalkit
from hsgnn.hetgraph import HeteroGraph, Schema

import oracles


def _clinic():
    schema = Schema(("C", "V", "D", "M", "P", "L"), (("C", "V"), ("V", "D"), ("V", "M"), ("V", "P"), ("V", "L")),
                    human_types=("C", "V"))
    keys = {"C": ["c0", "c1"], "V": ["v0", "v1", "v2"], "D": ["d0", "d1", "d2", "d3"], "M": ["m0", "m1"],
            "P": ["p0"], "L": ["l0"]}
    edges = {
        ("C", "V"): [("c0", "v0"), ("c0", "v1"), ("c1", "v2")],
        ("V", "D"): [("v0", "d0"), ("v0", "d1"), ("v0", "d2"), ("v1", "d1"), ("v1", "d3"), ("v2", "d0")],
        ("V", "M"): [("v0", "m0"), ("v0", "m1"), ("v2", "m1")],
        ("V", "P"): [("v0", "p0")],
        ("V", "L"): [("v0", "l0"), ("v1", "l0")],
    }
    g = HeteroGraph.from_edge_lists(schema, keys, edges)
    labels = {"v0": ["d0", "d1", "d2"], "v1": ["d1", "d3"], "v2": ["d0"]}
    return g, labels


def test_held_out_visit_loses_six_edges():
    g, labels = _clinic()
    # ratios put exactly one visit in test; find the seed that makes it v0
    for seed in range(100):
        plan, pruned = evalkit.split(g, labels, seed=seed, ratios=(2, 0, 1))
        if plan.assignment["v0"] == "test":
            break
    removed_v0 = sum(1 for pairs in plan.removed.values() for s, _ in pairs if s == "v0")
    assert removed_v0 == 6
    assert pruned.neighbors("V", "v0", "L") == ["l0"]
    assert evalkit.leaked_edges(pruned, plan) == []
    assert evalkit.leaked_edges(g, plan) != []


def test_ratio_on_1000_visits():
    schema = Schema(("V", "D"), (("V", "D"),), human_types=("V",))
    keys = {"V": [f"v{i}" for i in range(1000)], "D": ["d"]}
    g = HeteroGraph.from_edge_lists(schema, keys, {("V", "D"): [(k, "d") for k in keys["V"]]})
    plan, _ = evalkit.split(g, {k: ["d"] for k in keys["V"]}, seed=1)
    assert [len(plan.keys(p)) for p in ("train", "val", "test")] == [700, 100, 200]


def test_split_deterministic_and_serializable():
    g, labels = _clinic()
    a, _ = evalkit.split(g, labels, seed=4)
    b, _ = evalkit.split(g, labels, seed=4)
    assert a.to_json() == b.to_json()
    assert evalkit.SplitPlan.from_json(a.to_json()).to_json() == a.to_json()


def test_patient_truth_is_intersection():
    g, labels = _clinic()
    tg = evalkit.build_targets(g, labels)
    c0 = g.node_id("C", "c0")
    assert tg.Y[c0].tolist() == [0, 1, 0, 0]
    assert tg.Y[g.node_id("C", "c1")].tolist() == [1, 0, 0, 0]


def test_precision_examples():
    truth = np.zeros((1, 20), int)
    truth[0, :10] = 1
    perfect = -np.arange(20.0)[None]
    assert evalkit.precision_at_k(perfect, truth, 5) == 1.0
    assert evalkit.precision_at_k(-perfect, truth, 5) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.sampled_from([1, 5, 10, 15, 20]), capped=st.booleans())
def test_precision_matches_scalar_loop(seed, k, capped):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 6, size=(50, 25)).astype(float)
    truth = (rng.random((50, 25)) < 0.2).astype(int)
    truth[0] = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = evalkit.precision_at_k(scores, truth, k, capped)
    assert got == pytest.approx(oracles.scalar_precision(scores, truth, k, capped), abs=1e-12)


def test_empty_truth_warns():
    with pytest.warns(UserWarning, match="empty truth"):
        evalkit.precision_at_k(np.zeros((2, 3)), np.array([[1, 0, 0], [0, 0, 0]]), 1)


@pytest.mark.parametrize("k", [5, 10])
def test_random_baseline_monte_carlo(k):
    rng = np.random.default_rng(0)
    truth = (rng.random((40, 30)) < 0.15).astype(int)
    truth[truth.sum(axis=1) == 0, 0] = 1
    sims = [evalkit.precision_at_k(rng.random(truth.shape), truth, k) for _ in range(3000)]
    assert np.mean(sims) == pytest.approx(evalkit.random_baseline(truth, k), abs=3 * np.std(sims) / np.sqrt(3000) + 1e-3)
    assert np.std(sims) == pytest.approx(evalkit.random_baseline_std(truth, k), rel=0.1)


def test_report_csv_and_table(tmp_path):
    rep = evalkit.MetricReport()
    rep.add("visit", 5, 0.5)
    rep.add("visit", 5, 0.7)
    rep.add("patient", 5, 0.25)
    assert rep.mean("visit", 5) == pytest.approx(0.6)
    rep.to_csv(str(tmp_path / "m.csv"))
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "level,k,mean,std,n" and len(lines) == 3
    assert "V@5" in rep.table() and "P@5" in rep.table()


def test_embeddings_round_trip(tmp_path):
    X = np.random.default_rng(1).normal(size=(4, 3))
    evalkit.export_embeddings(X, ["a", "b", "c", "d"], str(tmp_path / "e.tsv"))
    keys, Y = evalkit.read_embeddings(str(tmp_path / "e.tsv"))
    assert keys == ["a", "b", "c", "d"] and np.array_equal(X, Y)


def test_cosine_helpers():
    X = np.array([[1.0, 0], [2.0, 0], [0, 1.0], [0, 3.0]])
    intra, inter = evalkit.cosine_separation(X, [0, 0, 1, 1])
    assert intra == pytest.approx(1.0) and inter == pytest.approx(0.0)
    Y = np.random.default_rng(2).normal(size=(7, 3))
    Z = Y / np.linalg.norm(Y, axis=1, keepdims=True)
    S = Z @ Z.T
    assert evalkit.mean_pairwise_cosine(Y) == pytest.approx(S[~np.eye(7, dtype=bool)].mean(), abs=1e-12)

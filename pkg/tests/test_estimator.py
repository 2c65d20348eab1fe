import numpy as np
import pytest
from sklearn.base import clone

from hsgnn import GraphData, HSGNNClassifier, SimilarityGraphBuilder
from hsgnn.synthgen import GenConfig, generate
from hsgnn import evalkit

import oracles


@pytest.fixture(scope="module")
def setup():
    ds = generate(GenConfig(seed=2, counts={"C": 40, "V": 60, "D": 30, "P": 10, "M": 20, "L": 20, "B": 10, "S": 10},
                            means={"D": 5, "P": 2, "M": 4, "L": 4, "B": 1, "S": 3}))
    g = ds.graph
    tg = evalkit.build_targets(g, ds.labels)
    data = SimilarityGraphBuilder(["V-D", "V-M", "D-V-D"], "sps", "onehot-code").fit_transform(g)
    return g, tg, data


def test_builder_outputs(setup):
    g, _, data = setup
    assert isinstance(data, GraphData) and len(data.subgraphs) == 3
    assert data.features.shape == (g.n_nodes, g.n_nodes - g.count("C") - g.count("V"))
    assert [str(s.path) for s in data.subgraphs] == ["V-D", "V-M", "D-V-D"]


def test_builder_rejects_bad_params():
    g = oracles.headache_graph()
    with pytest.raises(ValueError):
        SimilarityGraphBuilder(["V-D-V"], normalization="pathsim").fit(g)
    with pytest.raises(ValueError):
        SimilarityGraphBuilder("V-D-V").fit(g)


def test_get_params_and_clone():
    clf = HSGNNClassifier(variant="sum", hidden_dim=7, epochs=3)
    p = clf.get_params()
    assert p["variant"] == "sum" and p["hidden_dim"] == 7 and p["epochs"] == 3
    c = clone(clf)
    assert c.get_params() == p
    c.set_params(learning_rate=0.5)
    assert c.learning_rate == 0.5 and clf.learning_rate != 0.5


@pytest.mark.parametrize("variant", ["sum", "attention", "agg_attention"])
def test_fit_predict_shapes(setup, variant):
    g, tg, data = setup
    clf = HSGNNClassifier(variant=variant, epochs=3, hidden_dim=4).fit(data, tg.Y)
    L = tg.Y.shape[1]
    assert clf.decision_function().shape == (g.n_nodes, L)
    P = clf.predict_proba()
    assert np.all((P > 0) & (P < 1))
    assert set(np.unique(clf.predict())) <= {0, 1}
    top = clf.predict_topk(k=5, nodes=tg.visit_nodes[:4])
    assert top.shape == (4, 5)
    np.testing.assert_allclose(clf.path_weights().sum(), 1.0)
    assert len(clf.log_) == 3


def test_unsupervised_embeddings(setup):
    g, _, data = setup
    cats = np.full(g.n_nodes, -1)
    cats[g.type_slice("D")] = np.arange(g.count("D")) % 3
    clf = HSGNNClassifier(variant="sum", loss="unsup_dotproduct", embedding_dim=6, epochs=5).fit(data, cats)
    assert clf.embeddings().shape == (g.n_nodes, 6)
    assert clf.embeddings(layer="meta").shape == (g.n_nodes, data.features.shape[1])


def test_input_validation(setup):
    g, tg, data = setup
    clf = HSGNNClassifier(epochs=1)
    with pytest.raises(ValueError):
        clf.fit(data, tg.Y[:5])
    with pytest.raises(TypeError):
        clf.fit("not a graph", tg.Y)
    with pytest.raises(ValueError):
        clf.fit((data.subgraphs, np.full((g.n_nodes, 2), np.nan)), tg.Y)


def test_fit_is_deterministic(setup):
    _, tg, data = setup
    a = HSGNNClassifier(epochs=4, random_state=3).fit(data, tg.Y).decision_function()
    b = HSGNNClassifier(epochs=4, random_state=3).fit(data, tg.Y).decision_function()
    assert np.array_equal(a, b)


def test_from_params_round_trip(setup):
    _, tg, data = setup
    clf = HSGNNClassifier(variant="agg_attention", epochs=2, hidden_dim=3).fit(data, tg.Y)
    back = HSGNNClassifier.from_params(clf.network_.config, clf.params_, data)
    assert np.array_equal(back.decision_function(), clf.decision_function())

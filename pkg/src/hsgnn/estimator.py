"""scikit-learn style front-end: a similarity-graph transformer and the fused classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evalkit
from .fusion import HSGNNNetwork, ModelConfig, predict_topk, softmax
from .hetgraph import FEATURE_MODES, HeteroGraph, default_features
from .metapath import NORMALIZATIONS, MetaPath, MetaPathError, SimilaritySubgraph, build_subgraphs
from .training import TrainConfig, train


@dataclass
class GraphData:
    """Model input: K similarity subgraphs over one node set plus features."""
    subgraphs: list
    features: object
    graph: HeteroGraph | None = None

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


def _check_graph_data(X) -> GraphData:
    if isinstance(X, GraphData):
        data = X
    elif isinstance(X, (tuple, list)) and len(X) == 2:
        data = GraphData(list(X[0]), X[1])
    else:
        raise TypeError("expected GraphData or a (subgraphs, features) pair")
    if not data.subgraphs:
        raise ValueError("at least one similarity subgraph is required")
    F = data.features
    if not sp.issparse(F):
        F = np.asarray(F, dtype=np.float64)
        if F.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {F.shape}")
        if not np.all(np.isfinite(F)):
            raise ValueError("features contain NaN or inf")
    n = F.shape[0]
    for s in data.subgraphs:
        m = s.matrix if isinstance(s, SimilaritySubgraph) else s
        if m.shape != (n, n):
            raise ValueError(f"subgraph of shape {m.shape} does not match {n} feature rows")
    return GraphData(data.subgraphs, F, data.graph)


class SimilarityGraphBuilder(TransformerMixin, BaseEstimator):
    """Turn a :class:`HeteroGraph` into per-meta-path similarity subgraphs.

    Parameters
    ----------
    metapaths : sequence of str or MetaPath
        Meta-paths such as ``"V-D-V"``; each yields one subgraph.
    normalization : {"sps", "raw_pathcount"}
        SPS similarity, or PathCounts symmetrized and scaled by their max.
    features : {"onehot-type", "onehot-node", "onehot-code", "provided"}
        How the input feature matrix is formed.
    """

    def __init__(self, metapaths=("V-D-V",), normalization="sps", features="onehot-node"):
        self.metapaths = metapaths
        self.normalization = normalization
        self.features = features

    def fit(self, graph: HeteroGraph, y=None):
        if not isinstance(graph, HeteroGraph):
            raise TypeError("SimilarityGraphBuilder expects a HeteroGraph")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.features not in FEATURE_MODES:
            raise ValueError(f"features must be one of {FEATURE_MODES}")
        if isinstance(self.metapaths, (str, MetaPath)):
            raise ValueError("metapaths must be a sequence of meta-paths")
        paths = [p if isinstance(p, MetaPath) else MetaPath.parse(p) for p in self.metapaths]
        if not paths:
            raise MetaPathError("at least one meta-path is required")
        for p in paths:
            p.validate(graph.schema)
        self.metapaths_ = paths
        self.schema_ = graph.schema
        return self

    def transform(self, graph: HeteroGraph) -> GraphData:
        check_is_fitted(self, "metapaths_")
        subs = build_subgraphs(graph, self.metapaths_, self.normalization)
        return GraphData(subs, default_features(graph, self.features), graph)


class HSGNNClassifier(BaseEstimator):
    """Multi-label node classifier over a learned fusion of similarity subgraphs.

    ``variant`` selects how subgraphs are fused: ``"sum"`` (one softmax
    weight per meta-path), ``"attention"`` (per-pair attention from the raw
    features) or ``"agg_attention"`` (per-pair attention from features first
    propagated on each subgraph and then aggregated). A one-layer GCN on the
    fused graph produces the logits.

    With ``loss="unsup_dotproduct"`` ``y`` is a per-node category vector
    (negative = unlabelled) and the output layer has ``embedding_dim``
    columns.
    """

    def __init__(self, variant="agg_attention", aggregator="concat", hidden_dim=16,
                 attention_activation="leaky_relu", gnn_activation="relu", negative_slope=0.2,
                 epochs=200, learning_rate=0.01, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=5e-4, patience=20, loss="multilabel_bce", embedding_dim=16,
                 grad_check=False, grad_check_tol=1e-4, bias_init="prior", random_state=0):
        self.variant = variant
        self.aggregator = aggregator
        self.hidden_dim = hidden_dim
        self.attention_activation = attention_activation
        self.gnn_activation = gnn_activation
        self.negative_slope = negative_slope
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.patience = patience
        self.loss = loss
        self.embedding_dim = embedding_dim
        self.grad_check = grad_check
        self.grad_check_tol = grad_check_tol
        self.bias_init = bias_init
        self.random_state = random_state

    def model_config(self, label_dim: int) -> ModelConfig:
        return ModelConfig(self.variant, self.aggregator, int(self.hidden_dim), int(label_dim),
                           self.attention_activation, self.gnn_activation, self.negative_slope,
                           int(self.random_state))

    def train_config(self) -> TrainConfig:
        return TrainConfig(int(self.epochs), self.learning_rate, self.beta1, self.beta2, self.eps,
                           self.weight_decay, int(self.patience), self.loss, bool(self.grad_check),
                           self.grad_check_tol, self.bias_init)

    def _network(self, data: GraphData, label_dim: int) -> HSGNNNetwork:
        return HSGNNNetwork(data.subgraphs, data.features, self.model_config(label_dim))

    def fit(self, X, y, train_mask=None, val_nodes=None, params=None):
        """Train on graph data ``X``.

        ``y`` is an ``(N, L)`` 0/1 matrix for the supervised loss (rows
        outside ``train_mask`` are ignored by the loss, validation rows are
        read for early stopping) or a length-N category vector for the
        unsupervised loss.
        """
        data = _check_graph_data(X)
        tcfg = self.train_config()
        if tcfg.loss == "multilabel_bce":
            y = np.asarray(y)
            if y.ndim != 2 or y.shape[0] != data.n_nodes:
                raise ValueError(f"y must have shape (N, L) with N={data.n_nodes}")
            label_dim = y.shape[1]
            if train_mask is None:
                train_mask = y.any(axis=1)
            categories = None
        else:
            categories = np.asarray(y).ravel()
            if categories.shape[0] != data.n_nodes:
                raise ValueError(f"category vector must have length {data.n_nodes}")
            label_dim = int(self.embedding_dim)
        net = self._network(data, label_dim)

        def val_metric(logits, nodes, k):
            return evalkit.precision_at_k(logits[nodes], y[nodes], k)

        result = train(net, tcfg, labels=y if categories is None else None, train_mask=train_mask,
                       val_nodes=val_nodes, categories=categories, params=params, val_metric=val_metric)
        self.network_ = net
        self.data_ = data
        self.params_ = result.params
        self.log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.grad_report_ = result.grad_report
        self.n_labels_ = label_dim
        return self

    @classmethod
    def from_params(cls, config: ModelConfig, params: dict, X, **train_kw) -> "HSGNNClassifier":
        """A fitted classifier from a saved ModelConfig and parameters (no training)."""
        clf = cls(variant=config.variant, aggregator=config.aggregator, hidden_dim=config.hidden_dim,
                  attention_activation=config.attention_activation, gnn_activation=config.gnn_activation,
                  negative_slope=config.negative_slope, random_state=config.seed, **train_kw)
        data = _check_graph_data(X)
        clf.network_ = HSGNNNetwork(data.subgraphs, data.features, config)
        clf.data_ = data
        clf.params_ = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        clf.n_labels_ = config.label_dim
        clf.log_, clf.best_epoch_, clf.grad_report_ = [], -1, None
        return clf

    def _net_for(self, X):
        check_is_fitted(self, "params_")
        if X is None or X is self.data_:
            return self.network_
        return self._network(_check_graph_data(X), self.n_labels_)

    def decision_function(self, X=None) -> np.ndarray:
        """Logits (or embeddings under the unsupervised loss) for every node."""
        return self._net_for(X).forward(self.params_, keep_cache=False)[0]

    def predict_proba(self, X=None) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))

    def predict(self, X=None, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.uint8)

    def predict_topk(self, X=None, k: int = 10, nodes=None) -> np.ndarray:
        return predict_topk(self.decision_function(X), k, nodes)

    def fused_graph(self, X=None):
        """``(A_meta, F_meta)`` under the fitted parameters."""
        return self._net_for(X).fuse(self.params_)

    def path_weights(self):
        check_is_fitted(self, "params_")
        return softmax(self.params_["w"])

    def embeddings(self, X=None, layer: str = "output") -> np.ndarray:
        """Node vectors from the output layer or from F_meta (``layer="meta"``)."""
        net = self._net_for(X)
        if layer == "output":
            return net.forward(self.params_, keep_cache=False)[0]
        if layer == "meta":
            F = net.meta_features(self.params_)
            return F.toarray() if sp.issparse(F) else np.asarray(F)
        raise ValueError("layer must be 'output' or 'meta'")

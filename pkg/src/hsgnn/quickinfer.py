"""Prediction for unseen visits/patients without retraining.

The test-time fused graph keeps the trained code-code weights, recomputes
human-code weights for the new nodes from their own edges, and zeroes every
human-human weight. Only a forward pass is run.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.utils.validation import check_is_fitted

from .fusion import FusedGraph, _matmul, aggregate_features, softmax, weighted_sum
from .hetgraph import GraphError, HeteroGraph, Schema, default_features
from .metapath import MetaPath, path_count


@dataclass
class EdgePartition:
    """Indices into a fused graph's support, one array per edge category."""
    code_code: np.ndarray
    human_code: np.ndarray
    human_human: np.ndarray


def partition(fused: FusedGraph, schema: Schema, node_type_index: np.ndarray) -> EdgePartition:
    human_t = np.array([schema.is_human(t) for t in schema.node_types], dtype=bool)
    is_h = human_t[node_type_index]
    hr, hc = is_h[fused.rows], is_h[fused.cols]
    n_h = hr.astype(int) + hc.astype(int)
    return EdgePartition(np.flatnonzero(n_h == 0), np.flatnonzero(n_h == 1), np.flatnonzero(n_h == 2))


@dataclass
class TestBatch:
    """New human nodes with their edges (to medical codes, possibly to other humans)."""
    keys: dict = field(default_factory=dict)     # type -> list of new keys
    edges: dict = field(default_factory=dict)    # (a, b) -> list of (src, dst)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.keys.values())

    @classmethod
    def from_edge_files(cls, paths, graph: HeteroGraph) -> "TestBatch":
        """Read hetgraph-format edge CSVs; keys unknown to ``graph`` become new nodes."""
        schema = graph.schema
        keys: dict[str, list[str]] = {}
        edges: dict[tuple[str, str], list[tuple[str, str]]] = {}
        for path in paths:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            if not rows or not rows[0] or not rows[0][0].startswith("#"):
                raise GraphError(f"{path}:1: missing '# A,B' type header")
            a = rows[0][0].lstrip("#").strip()
            b = rows[0][1].strip() if len(rows[0]) > 1 else ""
            if a not in schema.node_types or b not in schema.node_types or not schema.has_edge_type(a, b):
                raise GraphError(f"{path}:1: edge type {a}-{b} is not declared in the schema")
            start = 2 if len(rows) > 1 and rows[1][:2] == ["src_key", "dst_key"] else 1
            for lineno, row in enumerate(rows[start:], start=start + 1):
                if not row:
                    continue
                if len(row) != 2:
                    raise GraphError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
                s, d = row
                for key, t in ((s, a), (d, b)):
                    if not graph.has_key(t, key):
                        if not schema.is_human(t):
                            raise GraphError(f"{path}:{lineno}: unknown medical code {key!r} of type {t}")
                        lst = keys.setdefault(t, [])
                        if key not in lst:
                            lst.append(key)
                edges.setdefault((a, b), []).append((s, d))
        return cls(keys, edges)


@dataclass
class QuickResult:
    keys: list
    node_ids: np.ndarray                 # ids in the augmented graph
    logits: np.ndarray
    graph: HeteroGraph
    fused: FusedGraph
    partition: EdgePartition


def _validate(batch: TestBatch, graph: HeteroGraph) -> None:
    schema = graph.schema
    new = {(t, k) for t, ks in batch.keys.items() for k in ks}
    for t, ks in batch.keys.items():
        if not schema.is_human(t):
            raise GraphError(f"new nodes must be of a human type, got {t}")
        for k in ks:
            if graph.has_key(t, k):
                raise GraphError(f"new node {k!r} already exists in the trained graph")
    code_deg = {nk: 0 for nk in new}
    for (a, b), pairs in batch.edges.items():
        for s, d in pairs:
            for key, t, other in ((s, a, b), (d, b, a)):
                if (t, key) in new:
                    if not schema.is_human(other):
                        code_deg[(t, key)] += 1
                elif not graph.has_key(t, key):
                    kind = "medical code" if not schema.is_human(t) else f"{t} node"
                    raise GraphError(f"unknown {kind} {key!r}")
    isolated = [k for (t, k), c in code_deg.items() if c == 0]
    if isolated:
        raise GraphError(f"new node(s) without any medical-code edge: {isolated[:5]}")


def _remap(m: sp.csr_matrix, old_to_new: np.ndarray, n: int) -> sp.csr_matrix:
    c = m.tocoo()
    return sp.csr_matrix((c.data, (old_to_new[c.row], old_to_new[c.col])), shape=(n, n))


def _human_code_rows(train_graph, aug, path: MetaPath, new_local: np.ndarray, normalization: str, scale: float):
    """SPS (or scaled raw PathCount) rows for the new nodes of ``path.first``.

    Code self-counts come from the training graph only, so a new node's
    weights do not depend on which other nodes share its batch.
    """
    pc_new = path_count(aug, path, rows=new_local).astype(np.float64)
    if normalization == "raw_pathcount":
        return pc_new / scale
    self_new = np.asarray(pc_new.multiply(pc_new).sum(axis=1)).ravel()
    pc_train = path_count(train_graph, path).astype(np.float64)
    self_code = np.asarray(pc_train.multiply(pc_train).sum(axis=0)).ravel()
    c = pc_new.tocoo()
    den = self_new[c.row] + self_code[c.col]
    vals = np.where(den > 0, c.data / np.where(den > 0, den, 1.0), 0.0)
    return sp.csr_matrix((vals, (c.row, c.col)), shape=pc_new.shape)


def extend_features(mode: str, graph: HeteroGraph, aug: HeteroGraph, old_to_new, train_features, new_rows=None):
    if mode in ("onehot-type", "onehot-code"):
        return default_features(aug, mode)
    if mode == "onehot-node":
        n_old = graph.n_nodes
        return sp.csr_matrix((np.ones(n_old), (old_to_new, np.arange(n_old))), shape=(aug.n_nodes, n_old))
    F = np.zeros((aug.n_nodes, train_features.shape[1]))
    F[old_to_new] = train_features.toarray() if sp.issparse(train_features) else train_features
    is_new = np.ones(aug.n_nodes, dtype=bool)
    is_new[old_to_new] = False
    if new_rows is None:
        raise GraphError("provided features require feature rows for the new nodes")
    new_rows = np.asarray(new_rows, dtype=np.float64)
    if new_rows.shape != (int(is_new.sum()), F.shape[1]):
        raise GraphError(f"new feature rows have shape {new_rows.shape}, expected {(int(is_new.sum()), F.shape[1])}")
    F[is_new] = new_rows
    return F


def quick_infer(clf, builder, graph: HeteroGraph, batch: TestBatch, new_features=None) -> QuickResult:
    """Forward-only logits for the nodes in ``batch``.

    ``clf`` is a fitted :class:`HSGNNClassifier` trained on
    ``builder.transform(graph)``; its parameters are only read. Trained
    nodes keep their fused weights, degrees and meta-features, so each new
    node is scored from its own code edges alone.
    """
    check_is_fitted(clf, "params_")
    check_is_fitted(builder, "metapaths_")
    _validate(batch, graph)
    if batch.size == 0:
        empty = FusedGraph(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), graph.n_nodes)
        part = EdgePartition(*(np.zeros(0, np.int64) for _ in range(3)))
        return QuickResult([], np.zeros(0, np.int64), np.zeros((0, clf.n_labels_)), graph, empty, part)
    schema = graph.schema
    n_old = graph.n_nodes
    aug, old_to_new = graph.with_nodes(batch.keys, batch.edges)
    n = aug.n_nodes
    is_new = np.ones(n, dtype=bool)
    is_new[old_to_new] = False
    new_ids = np.flatnonzero(is_new)
    m = new_ids.size

    # new-node rows of every similarity subgraph, columns in the trained index space
    rows_k = []
    for sub in clf.data_.subgraphs:
        R = sp.csr_matrix((m, n_old))
        p = sub.path
        if schema.is_human(p.first) != schema.is_human(p.last):
            q = p if schema.is_human(p.first) else p.reverse()
            new_keys = batch.keys.get(q.first, [])
            if new_keys:
                local = np.array([aug.local_index(q.first, k) for k in new_keys], dtype=np.int64)
                block = sp.coo_matrix(_human_code_rows(graph, aug, q, local, sub.normalization, sub.scale))
                r = np.searchsorted(new_ids, aug.offset(q.first) + local[block.row])
                R = sp.csr_matrix((block.data, (r, graph.offset(q.last) + block.col)), shape=(m, n_old))
        rows_k.append(R)

    net = clf.network_
    cfg = net.config
    params = clf.params_
    F_aug = extend_features(builder.features, graph, aug, old_to_new, clf.data_.features, new_features)
    F_new = F_aug[new_ids]
    trained, Fm_old = net.fuse(params)

    if cfg.variant == "agg_attention":
        f = net._gnn[0]
        H = []
        for k, R in enumerate(rows_k):
            W = params["meta_W"][k]
            u_old = 1.0 / np.sqrt(1.0 + np.bincount(net.stack.rows, weights=net.stack.values[k], minlength=n_old))
            u_new = 1.0 / np.sqrt(1.0 + np.asarray(R.sum(axis=1)).ravel())
            XW_old = _matmul(net.F, W)
            y = u_new[:, None] * np.asarray(R @ (u_old[:, None] * XW_old)) + (u_new ** 2)[:, None] * _matmul(F_new, W)
            H.append(f(y))
        Fm_new = aggregate_features(H, cfg.aggregator)
    else:
        Fm_new = F_new.toarray() if sp.issparse(F_new) else np.asarray(F_new)
    Fm_old = Fm_old.toarray() if sp.issparse(Fm_old) else np.asarray(Fm_old)

    # human-code pairs of the new nodes
    pattern = sum(abs(R) for R in rows_k).tocoo()
    r, c = pattern.row.astype(np.int64), pattern.col.astype(np.int64)
    vals = np.vstack([np.asarray(R[r, c]).ravel() for R in rows_k]) if r.size else np.zeros((len(rows_k), 0))
    if cfg.variant == "sum":
        a = weighted_sum(softmax(params["w"]), vals)
    else:
        d = Fm_old.shape[1]
        om = params["omega"]
        z = _matmul(Fm_new, om[:, :d].T)[r] + _matmul(Fm_old, om[:, d:].T)[c]
        a = np.einsum("ek,ke->e", softmax(net._att[0](z), axis=1), vals)

    u_old = 1.0 / np.sqrt(1.0 + np.bincount(trained.rows, weights=trained.values, minlength=n_old))
    u_new = 1.0 / np.sqrt(1.0 + np.bincount(r, weights=a, minlength=m))
    W, b = params["head_W"], params["head_b"]
    P = sp.csr_matrix((a * u_new[r] * u_old[c], (r, c)), shape=(m, n_old))
    logits = np.asarray(P @ _matmul(Fm_old, W)) + (u_new ** 2)[:, None] * _matmul(Fm_new, W) + b

    # test-time A_meta': trained values re-indexed, new human-code rows mirrored, human-human zeroed
    rr = np.concatenate([old_to_new[trained.rows], new_ids[r], old_to_new[c]])
    cc = np.concatenate([old_to_new[trained.cols], old_to_new[c], new_ids[r]])
    fused = FusedGraph(rr, cc, np.concatenate([trained.values, a, a]), n)
    part = partition(fused, schema, aug.node_type_index)
    fused.values[part.human_human] = 0.0
    keys = [aug.all_keys[i] for i in new_ids]
    return QuickResult(keys, new_ids, logits, aug, fused, part)


def write_predictions(path: str, keys, logits, label_keys, k: int = 10) -> None:
    """CSV ``node_key,rank,label,logit`` with the top-k labels per node."""
    logits = np.asarray(logits)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_key", "rank", "label", "logit"])
        if logits.size == 0:
            return
        k = min(k, logits.shape[1])
        top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        for key, row, lg in zip(keys, top, logits):
            for rank, j in enumerate(row, start=1):
                w.writerow([key, rank, label_keys[j], f"{lg[j]:.17g}"])

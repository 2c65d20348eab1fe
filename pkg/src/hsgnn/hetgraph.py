"""Typed heterogeneous graph store with sparse bipartite adjacencies."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp


class GraphError(ValueError):
    """Raised for malformed graph input (unknown keys, schema violations)."""


@dataclass(frozen=True)
class Schema:
    node_types: tuple[str, ...]
    edge_types: tuple[tuple[str, str], ...]
    human_types: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        object.__setattr__(self, "human_types", tuple(self.human_types))
        if not self.node_types:
            raise GraphError("schema declares no node types")
        if any(not t for t in self.node_types):
            raise GraphError("node type names must be nonempty")
        if len(set(self.node_types)) != len(self.node_types):
            raise GraphError(f"duplicate node types in {self.node_types}")
        order = {t: i for i, t in enumerate(self.node_types)}
        canon = []
        for pair in self.edge_types:
            a, b = pair
            if a not in order or b not in order:
                raise GraphError(f"edge type {a}-{b} references an undeclared node type")
            canon.append((a, b) if order[a] <= order[b] else (b, a))
        object.__setattr__(self, "edge_types", tuple(sorted(set(canon), key=lambda p: (order[p[0]], order[p[1]]))))
        for t in self.human_types:
            if t not in order:
                raise GraphError(f"human type {t} is not a declared node type")

    def has_edge_type(self, a: str, b: str) -> bool:
        return self.canonical(a, b) in self.edge_types

    def canonical(self, a: str, b: str) -> tuple[str, str]:
        ia, ib = self.node_types.index(a), self.node_types.index(b)
        return (a, b) if ia <= ib else (b, a)

    def is_human(self, t: str) -> bool:
        return t in self.human_types

    def to_dict(self) -> dict:
        return {
            "node_types": list(self.node_types),
            "edge_types": [list(p) for p in self.edge_types],
            "human_types": list(self.human_types),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        unknown = set(d) - {"node_types", "edge_types", "human_types"}
        if unknown:
            raise GraphError(f"unknown schema keys: {sorted(unknown)}")
        return cls(
            node_types=tuple(d["node_types"]),
            edge_types=tuple(tuple(p) for p in d.get("edge_types", ())),
            human_types=tuple(d.get("human_types", ())),
        )


class HeteroGraph:
    """Immutable typed graph.

    Global node ids are type-contiguous in schema order. For every declared
    edge type ``(a, b)`` the 0/1 adjacency ``|a| x |b|`` is stored together
    with its exact transpose.
    """

    def __init__(self, schema: Schema, keys: Mapping[str, Sequence[str]],
                 adjacency: Mapping[tuple[str, str], sp.spmatrix],
                 features: np.ndarray | None = None):
        self.schema = schema
        self._keys = {t: tuple(keys.get(t, ())) for t in schema.node_types}
        self._offsets = {}
        off = 0
        for t in schema.node_types:
            self._offsets[t] = off
            off += len(self._keys[t])
        self.n_nodes = off
        self._index = {}
        for t in schema.node_types:
            seen = {}
            for i, k in enumerate(self._keys[t]):
                if k in seen:
                    raise GraphError(f"duplicate node key {k!r} in type {t}")
                seen[k] = i
            self._index[t] = seen

        self._adj = {}
        for (a, b) in schema.edge_types:
            m = adjacency.get((a, b))
            if m is None and (b, a) in adjacency:
                m = adjacency[(b, a)].T
            if m is None:
                m = sp.csr_matrix((len(self._keys[a]), len(self._keys[b])), dtype=np.uint8)
            m = sp.csr_matrix(m, dtype=np.uint8)
            if m.shape != (len(self._keys[a]), len(self._keys[b])):
                raise GraphError(f"adjacency {a}-{b} has shape {m.shape}")
            m.sum_duplicates()
            m.data[:] = 1
            m.eliminate_zeros()
            m.sort_indices()
            self._adj[(a, b)] = m
            self._adj[(b, a)] = sp.csr_matrix(m.T)
            self._adj[(b, a)].sort_indices()
        for pair in adjacency:
            if not schema.has_edge_type(*pair):
                raise GraphError(f"edges given for undeclared type pair {pair[0]}-{pair[1]}")

        self._type_of = np.empty(self.n_nodes, dtype=np.int64)
        for ti, t in enumerate(schema.node_types):
            self._type_of[self.type_slice(t)] = ti

        if features is not None:
            features = np.asarray(features, dtype=np.float64)
            if features.ndim != 2 or features.shape[0] != self.n_nodes:
                raise GraphError(f"feature matrix has {features.shape[0]} rows, graph has {self.n_nodes} nodes")
            if not np.all(np.isfinite(features)):
                raise GraphError("feature matrix contains non-finite values")
            features.setflags(write=False)
        self.features = features

    # -- lookups -----------------------------------------------------------

    def count(self, t: str) -> int:
        return len(self._keys[t])

    def keys(self, t: str) -> tuple[str, ...]:
        return self._keys[t]

    def offset(self, t: str) -> int:
        return self._offsets[t]

    def type_slice(self, t: str) -> slice:
        o = self._offsets[t]
        return slice(o, o + len(self._keys[t]))

    def node_id(self, t: str, key: str) -> int:
        return self._offsets[t] + self._index[t][key]

    def local_index(self, t: str, key: str) -> int:
        return self._index[t][key]

    def has_key(self, t: str, key: str) -> bool:
        return key in self._index[t]

    def type_of(self, node: int) -> str:
        return self.schema.node_types[self._type_of[node]]

    @property
    def node_type_index(self) -> np.ndarray:
        """Per-node index into ``schema.node_types``."""
        return self._type_of

    @property
    def all_keys(self) -> list[str]:
        return [k for t in self.schema.node_types for k in self._keys[t]]

    def adjacency(self, a: str, b: str) -> sp.csr_matrix:
        try:
            return self._adj[(a, b)]
        except KeyError:
            raise GraphError(f"no edge type {a}-{b} in schema") from None

    def n_edges(self, a: str, b: str) -> int:
        return self.adjacency(a, b).nnz

    def edge_list(self, a: str, b: str) -> list[tuple[str, str]]:
        m = self.adjacency(a, b).tocoo()
        ka, kb = self._keys[a], self._keys[b]
        order = np.lexsort((m.col, m.row))
        return [(ka[m.row[i]], kb[m.col[i]]) for i in order]

    def neighbors(self, t: str, key: str, other: str) -> list[str]:
        row = self.adjacency(t, other)[self.local_index(t, key)]
        kb = self._keys[other]
        return [kb[j] for j in row.indices]

    # -- derived graphs ------------------------------------------------------

    def without_edges(self, removed: Mapping[tuple[str, str], Iterable[tuple[str, str]]]) -> "HeteroGraph":
        """Copy with the listed ``(src_key, dst_key)`` edges dropped."""
        drop: dict[tuple[str, str], list[int]] = {}
        for (x, y), pairs in removed.items():
            if not self.schema.has_edge_type(x, y):
                raise GraphError(f"no edge type {x}-{y} in schema")
            a, b = self.schema.canonical(x, y)
            width = len(self._keys[b])
            lin = drop.setdefault((a, b), [])
            for s, d in pairs:
                if (a, b) != (x, y):
                    s, d = d, s
                lin.append(self._index[a][s] * width + self._index[b][d])
        adj = {}
        for (a, b) in self.schema.edge_types:
            m = self._adj[(a, b)].tocoo()
            if (a, b) in drop:
                keep = ~np.isin(m.row.astype(np.int64) * m.shape[1] + m.col, drop[(a, b)])
                m = sp.coo_matrix((m.data[keep], (m.row[keep], m.col[keep])), shape=m.shape)
            adj[(a, b)] = m.tocsr()
        return HeteroGraph(self.schema, self._keys, adj, self.features)

    def drop_nodes(self, remove: Mapping[str, Iterable[str]]) -> "HeteroGraph":
        """Copy without the given nodes and their incident edges."""
        gone = {t: set(remove.get(t, ())) for t in self.schema.node_types}
        keys = {t: [k for k in self._keys[t] if k not in gone[t]] for t in self.schema.node_types}
        edges = {}
        for (a, b) in self.schema.edge_types:
            edges[(a, b)] = [(s, d) for s, d in self.edge_list(a, b) if s not in gone[a] and d not in gone[b]]
        features = None
        if self.features is not None:
            keep = np.ones(self.n_nodes, dtype=bool)
            for t, ks in gone.items():
                for k in ks:
                    if k in self._index[t]:
                        keep[self.node_id(t, k)] = False
            features = self.features[keep]
        return HeteroGraph.from_edge_lists(self.schema, keys, edges, features)

    def with_nodes(self, new_keys: Mapping[str, Sequence[str]],
                   new_edges: Mapping[tuple[str, str], Iterable[tuple[str, str]]]) -> tuple["HeteroGraph", np.ndarray]:
        """Append nodes (at the end of each type block) and edges.

        Returns the augmented graph and an array mapping old global ids to
        new global ids.
        """
        keys = {t: list(self._keys[t]) + list(new_keys.get(t, ())) for t in self.schema.node_types}
        edges = {}
        for (a, b) in self.schema.edge_types:
            edges[(a, b)] = list(self.edge_list(a, b))
        for (a, b), pairs in new_edges.items():
            if not self.schema.has_edge_type(a, b):
                raise GraphError(f"edge between undeclared type pair {a}-{b}")
            ca = self.schema.canonical(a, b)
            pairs = list(pairs)
            edges[ca].extend(pairs if ca == (a, b) else [(d, s) for s, d in pairs])
        g = HeteroGraph.from_edge_lists(self.schema, keys, edges)
        old_to_new = np.empty(self.n_nodes, dtype=np.int64)
        for t in self.schema.node_types:
            old_to_new[self.type_slice(t)] = g.offset(t) + np.arange(self.count(t))
        return g, old_to_new

    @classmethod
    def from_edge_lists(cls, schema: Schema, keys: Mapping[str, Sequence[str]],
                        edges: Mapping[tuple[str, str], Iterable[tuple[str, str]]],
                        features: np.ndarray | None = None) -> "HeteroGraph":
        index = {t: {k: i for i, k in enumerate(keys.get(t, ()))} for t in schema.node_types}
        adj = {}
        for (a, b), pairs in edges.items():
            if a not in index or b not in index or not schema.has_edge_type(a, b):
                raise GraphError(f"edge between undeclared type pair {a}-{b}")
            rows, cols = [], []
            for s, d in pairs:
                if a == b and s == d:
                    raise GraphError(f"self-edge on node {s!r}")
                if s not in index[a]:
                    raise GraphError(f"unknown {a} node key {s!r}")
                if d not in index[b]:
                    raise GraphError(f"unknown {b} node key {d!r}")
                rows.append(index[a][s])
                cols.append(index[b][d])
            shape = (len(index[a]), len(index[b]))
            m = sp.coo_matrix((np.ones(len(rows), dtype=np.uint8), (rows, cols)), shape=shape).tocsr()
            if a == b:
                m = m + m.T
            ca = schema.canonical(a, b)
            if ca != (a, b):
                m = m.T
            adj[ca] = adj[ca] + m if ca in adj else m
        return cls(schema, keys, adj, features)

    def __repr__(self):
        counts = ", ".join(f"{t}={self.count(t)}" for t in self.schema.node_types)
        return f"HeteroGraph(N={self.n_nodes}; {counts})"


# -- file ingestion ---------------------------------------------------------


def _read_lines(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def load_graph(node_files: Mapping[str, str] | Sequence[str], edge_files: Sequence[str],
               schema: Schema) -> HeteroGraph:
    """Build a graph from per-type node CSVs and typed edge CSVs.

    ``node_files`` is either a mapping ``type -> path`` or a list of paths in
    schema order. Node CSVs have a ``key`` column followed by optional
    numeric feature columns. Edge CSVs start with a ``# A,B`` line naming the
    two node types, then a ``src_key,dst_key`` header.
    """
    if not isinstance(node_files, Mapping):
        node_files = list(node_files)
        if len(node_files) != len(schema.node_types):
            raise GraphError(f"expected {len(schema.node_types)} node files, got {len(node_files)}")
        node_files = dict(zip(schema.node_types, node_files))

    keys: dict[str, list[str]] = {}
    feats: dict[str, np.ndarray] = {}
    for t in schema.node_types:
        path = node_files.get(t)
        if path is None:
            keys[t] = []
            continue
        rows = _read_lines(path)
        if not rows or not rows[0] or rows[0][0] != "key":
            raise GraphError(f"{path}: first column header must be 'key'")
        width = len(rows[0])
        ks, fs = [], []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != width:
                raise GraphError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            ks.append(row[0])
            if width > 1:
                try:
                    fs.append([float(x) for x in row[1:]])
                except ValueError as exc:
                    raise GraphError(f"{path}:{lineno}: {exc}") from None
        keys[t] = ks
        if width > 1:
            feats[t] = np.asarray(fs, dtype=np.float64).reshape(len(ks), width - 1)
    for t in node_files:
        if t not in schema.node_types:
            raise GraphError(f"node file given for undeclared type {t}")

    index = {t: {k: i for i, k in enumerate(keys[t])} for t in schema.node_types}
    edges: dict[tuple[str, str], list[tuple[str, str]]] = {}
    for path in edge_files:
        rows = _read_lines(path)
        if not rows or not rows[0] or not rows[0][0].startswith("#"):
            raise GraphError(f"{path}:1: missing '# A,B' type header")
        a = rows[0][0].lstrip("#").strip()
        b = rows[0][1].strip() if len(rows[0]) > 1 else ""
        if a not in index or b not in index:
            raise GraphError(f"{path}:1: unknown node type in header {a!r},{b!r}")
        if not schema.has_edge_type(a, b):
            raise GraphError(f"{path}:1: edge type {a}-{b} is not declared in the schema")
        start = 1
        if len(rows) > 1 and rows[1][:2] == ["src_key", "dst_key"]:
            start = 2
        pairs = edges.setdefault((a, b), [])
        for lineno, row in enumerate(rows[start:], start=start + 1):
            if not row:
                continue
            if len(row) != 2:
                raise GraphError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            s, d = row
            if s not in index[a]:
                raise GraphError(f"{path}:{lineno}: unknown {a} node key {s!r}")
            if d not in index[b]:
                raise GraphError(f"{path}:{lineno}: unknown {b} node key {d!r}")
            if a == b and s == d:
                raise GraphError(f"{path}:{lineno}: self-edge on {s!r}")
            pairs.append((s, d))

    features = None
    if feats:
        widths = {f.shape[1] for f in feats.values()}
        if len(widths) == 1 and len(feats) == len([t for t in schema.node_types if keys[t]]):
            features = np.vstack([feats[t] for t in schema.node_types if keys[t]])
    return HeteroGraph.from_edge_lists(schema, keys, edges, features)


def write_graph(graph: HeteroGraph, directory: str) -> list[str]:
    """Write node/edge CSVs and ``schema.json``; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    written = []
    schema_path = os.path.join(directory, "schema.json")
    with open(schema_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(graph.schema.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(schema_path)
    for t in graph.schema.node_types:
        path = os.path.join(directory, f"nodes_{t}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key"])
            for k in graph.keys(t):
                w.writerow([k])
        written.append(path)
    for (a, b) in graph.schema.edge_types:
        path = os.path.join(directory, f"edges_{a}_{b}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# {a},{b}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["src_key", "dst_key"])
            for s, d in graph.edge_list(a, b):
                w.writerow([s, d])
        written.append(path)
    return written


def read_graph_dir(directory: str) -> HeteroGraph:
    """Load a directory laid out by :func:`write_graph`."""
    with open(os.path.join(directory, "schema.json"), encoding="utf-8") as fh:
        schema = Schema.from_dict(json.load(fh))
    node_files = {}
    for t in schema.node_types:
        p = os.path.join(directory, f"nodes_{t}.csv")
        if os.path.exists(p):
            node_files[t] = p
    edge_files = []
    for (a, b) in schema.edge_types:
        p = os.path.join(directory, f"edges_{a}_{b}.csv")
        if os.path.exists(p):
            edge_files.append(p)
    return load_graph(node_files, edge_files, schema)


# -- features ---------------------------------------------------------------

FEATURE_MODES = ("onehot-type", "onehot-node", "onehot-code", "provided")


def default_features(graph: HeteroGraph, mode: str = "onehot-type",
                     values: np.ndarray | None = None):
    """Input feature matrix F with one row per node in global order.

    ``onehot-node`` returns a sparse CSR identity (d = N) since it is only
    ever multiplied against weights. ``onehot-code`` is the identity over
    non-human nodes only (d = number of codes); human rows are zero, so a
    visit or patient is described purely by what it is linked to.
    """
    n = graph.n_nodes
    if mode == "onehot-type":
        out = np.zeros((n, len(graph.schema.node_types)))
        out[np.arange(n), graph.node_type_index] = 1.0
        return out
    if mode == "onehot-node":
        return sp.identity(n, dtype=np.float64, format="csr")
    if mode == "onehot-code":
        human = np.array([graph.schema.is_human(t) for t in graph.schema.node_types], dtype=bool)
        codes = np.flatnonzero(~human[graph.node_type_index])
        return sp.csr_matrix((np.ones(codes.size), (codes, np.arange(codes.size))), shape=(n, codes.size))
    if mode == "provided":
        if values is None:
            values = graph.features
        if values is None:
            raise GraphError("feature mode 'provided' but the graph carries no feature columns")
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != n:
            raise GraphError(f"provided features have {values.shape[0]} rows, graph has {n} nodes")
        if not np.all(np.isfinite(values)):
            raise GraphError("provided features contain non-finite values")
        return values
    raise GraphError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")

"""Meta-path compilation, PathCount chain products and SPS similarity subgraphs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .hetgraph import GraphError, HeteroGraph, Schema

log = logging.getLogger(__name__)

NORMALIZATIONS = ("sps", "raw_pathcount")

# largest float64 that is safely below 2**64 once product rounding is allowed for
_U64_LIMIT = float(2**64) * (1 - 1e-9)
_DENSIFY_RATIO = 0.25


class MetaPathError(ValueError):
    pass


class PathCountOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class MetaPath:
    types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "types", tuple(self.types))
        if len(self.types) < 2:
            raise MetaPathError(f"meta-path needs at least two node types, got {self.types}")

    @classmethod
    def parse(cls, text: str, schema: Schema | None = None) -> "MetaPath":
        """Parse ``"V-D-V"`` (or ``"VDV"`` when every type is one letter)."""
        text = text.strip()
        if "-" in text:
            parts = text.split("-")
        else:
            parts = list(text)
        path = cls(tuple(parts))
        if schema is not None:
            path.validate(schema)
        return path

    def validate(self, schema: Schema) -> None:
        for pos, t in enumerate(self.types):
            if t not in schema.node_types:
                raise MetaPathError(f"unknown node type {t!r} at position {pos + 1} in meta-path {self}")
        for pos, (a, b) in enumerate(zip(self.types, self.types[1:])):
            if not schema.has_edge_type(a, b):
                raise MetaPathError(
                    f"no {a}-{b} edge type for step {pos + 1} of meta-path {self}")

    @property
    def palindromic(self) -> bool:
        return self.types == self.types[::-1]

    @property
    def first(self) -> str:
        return self.types[0]

    @property
    def last(self) -> str:
        return self.types[-1]

    def reverse(self) -> "MetaPath":
        return MetaPath(self.types[::-1])

    def __str__(self):
        return "-".join(self.types)


def _check_bound(left, right, path):
    """Raise if ``left @ right`` may exceed uint64; exact float check if the cheap bound fails."""
    lmax = float(np.asarray(left.sum(axis=1)).max()) if left.shape[0] else 0.0
    rmax = float(right.max()) if right.shape[0] and right.shape[1] else 0.0
    if lmax * rmax < _U64_LIMIT:
        return
    lf = left.astype(np.float64)
    rf = right.astype(np.float64)
    prod = lf @ rf
    peak = prod.max() if not sp.issparse(prod) else (prod.max() if prod.nnz else 0.0)
    if peak >= _U64_LIMIT:
        raise PathCountOverflow(f"PathCount for meta-path {path} overflows 64-bit unsigned integers")


def _chain(factors, path):
    m = factors[0]
    for f in factors[1:]:
        _check_bound(m, f, path)
        m = m @ f
        if sp.issparse(m):
            rows, cols = m.shape
            if rows and cols and m.nnz > _DENSIFY_RATIO * rows * cols:
                m = m.toarray()
    if not sp.issparse(m):
        m = sp.csr_matrix(m)
    m = sp.csr_matrix(m, dtype=np.uint64)
    m.eliminate_zeros()
    m.sort_indices()
    return m


def path_count(graph: HeteroGraph, path: MetaPath, rows: np.ndarray | None = None) -> sp.csr_matrix:
    """Exact instance counts ``|t_1| x |t_n|`` as a sparse uint64 matrix.

    ``rows`` optionally restricts the first factor to a subset of local
    ``t_1`` indices (the result then has ``len(rows)`` rows).
    """
    path.validate(graph.schema)
    factors = [graph.adjacency(a, b).astype(np.uint64) for a, b in zip(path.types, path.types[1:])]
    if rows is not None:
        factors[0] = factors[0][np.asarray(rows)]
    return _chain(factors, path)


def _squared_sums(pc: sp.csr_matrix, axis: int, path) -> np.ndarray:
    f = pc.astype(np.float64)
    f.data **= 2
    if f.shape[axis] and f.sum(axis=axis).max() >= _U64_LIMIT:
        raise PathCountOverflow(f"self-count for meta-path {path} overflows 64-bit unsigned integers")
    sq = pc.copy()
    sq.data = sq.data * sq.data
    return np.asarray(sq.sum(axis=axis, dtype=np.uint64)).ravel()


def self_counts(graph: HeteroGraph, path: MetaPath, pc: sp.csr_matrix | None = None) -> np.ndarray:
    """Per-node self counts over the full index space (zeros off the endpoints).

    Palindromic paths use the diagonal of the PathCount. Otherwise the
    round trip is used: ``(M M^T)_ii`` on ``t_1`` nodes and ``(M^T M)_jj``
    on ``t_n`` nodes. When both ends share a type (e.g. V-D-M-V) every node
    plays both roles and gets the mean of its two round trips.
    """
    if pc is None:
        pc = path_count(graph, path)
    out = np.zeros(graph.n_nodes)
    if path.palindromic:
        out[graph.type_slice(path.first)] = pc.diagonal()
    elif path.first == path.last:
        out[graph.type_slice(path.first)] = (_squared_sums(pc, 1, path).astype(np.float64)
                                             + _squared_sums(pc, 0, path)) / 2
    else:
        out[graph.type_slice(path.first)] = _squared_sums(pc, 1, path)
        out[graph.type_slice(path.last)] = _squared_sums(pc, 0, path)
    return out


def sps(pc: sp.csr_matrix, self_first: np.ndarray, self_last: np.ndarray,
        square: bool) -> sp.csr_matrix:
    """Symmetric PathSim over the ``t_1 x t_n`` block.

    When both ends share a type (``square``) ``PC(i,j)`` and ``PC(j,i)``
    live in the same block, so the numerator is ``PC + PC^T``. Otherwise
    ``PC(j,i)`` is structurally zero (no instance starts at a ``t_n`` node)
    and the mirrored entry is produced when the block is embedded.
    Only nonzero numerators are materialized; zero denominators give 0.
    """
    num = (pc + pc.T) if square else pc
    num = sp.coo_matrix(num)
    num.sum_duplicates()
    den = self_first.astype(np.float64)[num.row] + self_last.astype(np.float64)[num.col]
    vals = np.zeros(num.nnz)
    ok = den > 0
    vals[ok] = num.data[ok].astype(np.float64) / den[ok]
    if vals.size and vals.max() > 1.0:
        log.warning("SPS value %.6g above 1 clamped", vals.max())
        np.minimum(vals, 1.0, out=vals)
    out = sp.csr_matrix((vals, (num.row, num.col)), shape=pc.shape)
    out.eliminate_zeros()
    return out


@dataclass
class SimilaritySubgraph:
    """Symmetric N x N weighted graph for one meta-path.

    ``scale`` is 1 for SPS; for raw PathCounts it is the global max the
    counts were divided by, so ``matrix * scale`` recovers integers.
    """
    matrix: sp.csr_matrix
    path: MetaPath
    normalization: str = "sps"
    scale: float = 1.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _embed(graph: HeteroGraph, path: MetaPath, block: sp.spmatrix) -> sp.csr_matrix:
    n = graph.n_nodes
    b = sp.coo_matrix(block)
    r = b.row.astype(np.int64) + graph.offset(path.first)
    c = b.col.astype(np.int64) + graph.offset(path.last)
    if path.first == path.last:
        rows, cols, vals = r, c, b.data
    else:
        rows = np.concatenate([r, c])
        cols = np.concatenate([c, r])
        vals = np.concatenate([b.data, b.data])
    m = sp.csr_matrix((vals.astype(np.float64), (rows, cols)), shape=(n, n))
    m.sort_indices()
    return m


def similarity_subgraph(graph: HeteroGraph, path: MetaPath, normalization: str = "sps") -> SimilaritySubgraph:
    if normalization not in NORMALIZATIONS:
        raise MetaPathError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATIONS}")
    pc = path_count(graph, path)
    if normalization == "sps":
        selfc = self_counts(graph, path, pc)
        block = sps(pc, selfc[graph.type_slice(path.first)], selfc[graph.type_slice(path.last)],
                    path.first == path.last)
        return SimilaritySubgraph(_embed(graph, path, block), path, "sps")
    # raw mode: symmetric counts PC + PC^T divided by their global max
    num = sp.csr_matrix((pc + pc.T) if path.first == path.last else pc, dtype=np.float64)
    scale = float(num.max()) if num.nnz else 1.0
    return SimilaritySubgraph(_embed(graph, path, num / scale), path, "raw_pathcount", scale)


def build_subgraphs(graph: HeteroGraph, paths, normalization: str = "sps") -> list[SimilaritySubgraph]:
    """One similarity subgraph per meta-path, in path order."""
    paths = [p if isinstance(p, MetaPath) else MetaPath.parse(p, graph.schema) for p in paths]
    if not paths:
        raise MetaPathError("at least one meta-path is required")
    return [similarity_subgraph(graph, p, normalization) for p in paths]


# -- triplet files ------------------------------------------------------------


def write_triplets(sub: SimilaritySubgraph, path: str) -> None:
    """``# path=... norm=... N=...`` header then ``i,j,value`` with i <= j.

    SPS values are printed with 17 significant digits; raw mode writes the
    integer counts and records the divisor as ``scale=`` in the header.
    """
    m = sp.triu(sub.matrix, format="coo")
    order = np.lexsort((m.col, m.row))
    raw = sub.normalization == "raw_pathcount"
    header = f"# path={sub.path} norm={sub.normalization} N={sub.n}"
    if raw:
        header += f" scale={sub.scale:.17g}"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for idx in order:
            v = m.data[idx]
            val = str(int(round(v * sub.scale))) if raw else f"{v:.17g}"
            fh.write(f"{m.row[idx]},{m.col[idx]},{val}\n")


def read_triplets(path: str) -> SimilaritySubgraph:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise GraphError(f"{path}:1: missing triplet header")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        n = int(fields["N"])
        scale = float(fields.get("scale", 1.0))
        mp = MetaPath.parse(fields["path"])
    except (KeyError, ValueError) as exc:
        raise GraphError(f"{path}:1: malformed triplet header ({exc})") from None
    r, c, v = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            i, j, x = int(parts[0]), int(parts[1]), float(parts[2])
        except (IndexError, ValueError):
            raise GraphError(f"{path}:{lineno}: expected i,j,value") from None
        if not (0 <= i <= j < n):
            raise GraphError(f"{path}:{lineno}: index out of range or i > j")
        r.append(i), c.append(j), v.append(x)
    r, c, v = np.array(r, dtype=np.int64), np.array(c, dtype=np.int64), np.array(v, dtype=np.float64) / scale
    off = r != c
    m = sp.csr_matrix((np.concatenate([v, v[off]]), (np.concatenate([r, c[off]]), np.concatenate([c, r[off]]))),
                      shape=(n, n))
    m.sort_indices()
    return SimilaritySubgraph(m, mp, fields.get("norm", "sps"), scale)

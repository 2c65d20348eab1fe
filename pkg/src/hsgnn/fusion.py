"""Fusion of similarity subgraphs into a learned graph and the GCN prediction head."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp

VARIANTS = ("sum", "attention", "agg_attention")
AGGREGATORS = ("mean", "concat")


class NumericalError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


# -- activations -------------------------------------------------------------


def activation(name: str, slope: float = 0.2):
    """Return ``(f, df)`` where ``df`` is evaluated on the pre-activation."""
    if name == "relu":
        return (lambda x: np.maximum(x, 0.0)), (lambda x: (x > 0).astype(np.float64))
    if name == "leaky_relu":
        return ((lambda x: np.where(x > 0, x, slope * x)),
                (lambda x: np.where(x > 0, 1.0, slope)))
    if name == "tanh":
        return np.tanh, (lambda x: 1.0 - np.tanh(x) ** 2)
    if name == "identity":
        return (lambda x: x), (lambda x: np.ones_like(x))
    raise ConfigError(f"unknown activation {name!r}")


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- config / params ----------------------------------------------------------


@dataclass
class ModelConfig:
    variant: str = "agg_attention"
    aggregator: str = "concat"
    hidden_dim: int = 16
    label_dim: int = 1
    attention_activation: str = "leaky_relu"
    gnn_activation: str = "relu"
    negative_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if int(self.hidden_dim) < 1:
            raise ConfigError("hidden_dim must be positive")
        if int(self.label_dim) < 1:
            raise ConfigError("label_dim must be positive")
        activation(self.attention_activation, self.negative_slope)
        activation(self.gnn_activation, self.negative_slope)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def glorot(rng, fan_in, fan_out, shape=None):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape if shape is not None else (fan_in, fan_out))


# -- sparse support -------------------------------------------------------------


class SupportStack:
    """K similarity matrices stored on the union of their supports.

    ``values[k, e]`` is ``A_k[rows[e], cols[e]]``. The GCN propagator
    pattern (support plus the diagonal) is precomputed so that
    ``D^-1/2 (A + I) D^-1/2`` can be refilled cheaply for new edge values.
    """

    def __init__(self, matrices, n: int | None = None):
        mats = [sp.csr_matrix(getattr(m, "matrix", m), dtype=np.float64) for m in matrices]
        if not mats:
            raise ConfigError("at least one similarity subgraph is required")
        n = mats[0].shape[0] if n is None else n
        for m in mats:
            if m.shape != (n, n):
                raise ConfigError(f"subgraph shape {m.shape} does not match N={n}")
        self.n = n
        self.K = len(mats)
        coos = [m.tocoo() for m in mats]
        lin_all = [c.row.astype(np.int64) * n + c.col for c in coos]
        support = np.unique(np.concatenate(lin_all)) if lin_all else np.zeros(0, np.int64)
        self.rows = (support // n).astype(np.int64)
        self.cols = (support % n).astype(np.int64)
        self.values = np.zeros((self.K, support.size))
        for k, (c, lin) in enumerate(zip(coos, lin_all)):
            keep = c.data != 0
            self.values[k, np.searchsorted(support, lin[keep])] = c.data[keep]
        E = support.size
        self.row_incidence = sp.csr_matrix((np.ones(E), (self.rows, np.arange(E))), shape=(n, E))
        self.col_incidence = sp.csr_matrix((np.ones(E), (self.cols, np.arange(E))), shape=(n, E))
        diag = np.arange(n, dtype=np.int64) * (n + 1)
        uniq, inv = np.unique(np.concatenate([support, diag]), return_inverse=True)
        self._inv = inv
        self._nnz = uniq.size
        self._indices = (uniq % n).astype(np.int32)
        self._indptr = np.searchsorted(uniq // n, np.arange(n + 1)).astype(np.int32)

    @property
    def n_support(self) -> int:
        return self.rows.size

    def matrix(self, k: int) -> sp.csr_matrix:
        return sp.csr_matrix((self.values[k], (self.rows, self.cols)), shape=(self.n, self.n))

    def propagator(self, a: np.ndarray):
        """Return ``(P, u)`` with ``u = deg^-1/2`` for edge values ``a`` on the support."""
        deg = 1.0 + np.bincount(self.rows, weights=a, minlength=self.n)
        u = 1.0 / np.sqrt(deg)
        vals = np.concatenate([a * u[self.rows] * u[self.cols], u * u])
        data = np.bincount(self._inv, weights=vals, minlength=self._nnz)
        P = sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=(self.n, self.n))
        return P, u


@dataclass
class FusedGraph:
    """A_meta on a fixed support; ``values`` follow the current parameters."""
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    n: int

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, (self.rows, self.cols)), shape=(self.n, self.n))


# -- standalone ops -------------------------------------------------------------


def gcn_normalize(A) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with D the row sums of ``A + I``."""
    A = sp.csr_matrix(A, dtype=np.float64)
    M = A + sp.identity(A.shape[0], format="csr")
    d = np.asarray(M.sum(axis=1)).ravel()
    u = 1.0 / np.sqrt(d)
    return sp.csr_matrix(sp.diags(u) @ M @ sp.diags(u))


def _matmul(X, W):
    out = X @ W
    return np.asarray(out)


def meta_gnn_forward(F, A_k, W_k, act: str = "relu", slope: float = 0.2):
    """One GCN-style layer ``act(P F W)`` on a single similarity subgraph."""
    f, _ = activation(act, slope)
    out = f(np.asarray(gcn_normalize(A_k) @ _matmul(F, W_k)))
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite meta-GNN output")
    return out


def aggregate_features(blocks, aggregator: str = "concat") -> np.ndarray:
    blocks = [np.asarray(b) for b in blocks]
    if not blocks:
        raise ConfigError("no feature blocks to aggregate")
    n = blocks[0].shape[0]
    if any(b.shape[0] != n for b in blocks):
        raise ConfigError("feature blocks disagree on row count")
    if aggregator == "mean":
        if any(b.shape != blocks[0].shape for b in blocks):
            raise ConfigError("mean aggregation needs equal block shapes")
        return sum(blocks) / len(blocks)
    if aggregator == "concat":
        return np.hstack(blocks)
    raise ConfigError(f"unknown aggregator {aggregator!r}")


def weighted_sum(weights, values):
    """``sum_k weights[k] * values[k]`` accumulated in meta-path order.

    A plain ``weights @ values`` lets BLAS pick a different summation order
    per column, which breaks exact symmetry between mirrored support pairs.
    """
    out = weights[0] * values[0]
    for k in range(1, len(weights)):
        out = out + weights[k] * values[k]
    return out


def attention_logits(features, omega, rows, cols):
    """``omega_k^T [f_i || f_j]`` for every support pair, shape (E, K)."""
    d = features.shape[1]
    if omega.shape[1] != 2 * d:
        raise ConfigError(f"omega has width {omega.shape[1]}, expected {2 * d}")
    left = _matmul(features, omega[:, :d].T)
    right = _matmul(features, omega[:, d:].T)
    return left[rows] + right[cols]


def attention_weights(features, omega, rows, cols, act: str = "leaky_relu", slope: float = 0.2):
    """Per-pair softmax over meta-paths, shape (E, K); rows sum to 1."""
    f, _ = activation(act, slope)
    return softmax(f(attention_logits(features, omega, rows, cols)), axis=1)


def predict_topk(logits, k: int, nodes=None) -> np.ndarray:
    """Top-k label indices per row, descending score, ties to the lower index."""
    logits = np.asarray(logits)
    if nodes is not None:
        logits = logits[np.asarray(nodes)]
    L = logits.shape[1]
    if not 1 <= k <= L:
        raise ConfigError(f"k must be in [1, {L}], got {k}")
    # stable sort on the negated scores keeps lower indices first among ties
    order = np.argsort(-logits, axis=1, kind="stable")
    return order[:, :k]


# -- the network -------------------------------------------------------------


def _rowdot(A, B, ra, rb, chunk=1 << 16):
    out = np.empty(ra.size)
    for s in range(0, ra.size, chunk):
        e = s + chunk
        out[s:e] = np.einsum("ij,ij->i", A[ra[s:e]], B[rb[s:e]])
    return out


class HSGNNNetwork:
    """Full-graph forward computation for one fused model.

    Holds the fixed inputs (support stack, feature matrix, config) and
    evaluates logits for a parameter dict. ``forward`` returns a cache
    consumed by :func:`hsgnn.training.backward`.
    """

    def __init__(self, subgraphs, features, config: ModelConfig, stack: SupportStack | None = None):
        self.config = config
        self.stack = stack if stack is not None else SupportStack(subgraphs)
        self.n = self.stack.n
        self.K = self.stack.K
        if features.shape[0] != self.n:
            raise ConfigError(f"feature matrix has {features.shape[0]} rows, graph has {self.n} nodes")
        self.F = features.tocsr() if sp.issparse(features) else np.asarray(features, dtype=np.float64)
        self.in_dim = features.shape[1]
        self._att = activation(config.attention_activation, config.negative_slope)
        self._gnn = activation(config.gnn_activation, config.negative_slope)
        self.meta_propagators = None
        if config.variant == "agg_attention":
            self.meta_propagators = [self.stack.propagator(self.stack.values[k])[0] for k in range(self.K)]

    @property
    def meta_dim(self) -> int:
        """Width of F_meta."""
        if self.config.variant != "agg_attention":
            return self.in_dim
        h = self.config.hidden_dim
        return h * self.K if self.config.aggregator == "concat" else h

    def init_params(self, seed: int | None = None) -> dict:
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        cfg = self.config
        p = {"w": np.zeros(self.K)}
        if cfg.variant in ("attention", "agg_attention"):
            fd = self.meta_dim
            p["omega"] = glorot(rng, 2 * fd, 1, shape=(self.K, 2 * fd))
        if cfg.variant == "agg_attention":
            p["meta_W"] = glorot(rng, self.in_dim, cfg.hidden_dim, shape=(self.K, self.in_dim, cfg.hidden_dim))
        p["head_W"] = glorot(rng, self.meta_dim, cfg.label_dim)
        p["head_b"] = np.zeros(cfg.label_dim)
        return p

    # pieces ---------------------------------------------------------------

    def meta_features(self, params, cache=None):
        if self.config.variant != "agg_attention":
            return self.F
        f, _ = self._gnn
        H, pre = [], []
        for k in range(self.K):
            y = np.asarray(self.meta_propagators[k] @ _matmul(self.F, params["meta_W"][k]))
            pre.append(y)
            H.append(f(y))
        if cache is not None:
            cache["meta_pre"] = pre
        return aggregate_features(H, self.config.aggregator)

    def fused_values(self, params, F_meta, cache=None):
        st = self.stack
        if self.config.variant == "sum":
            sw = softmax(params["w"])
            a = weighted_sum(sw, st.values)
            if cache is not None:
                cache["sum_weights"] = sw
            return a
        f, _ = self._att
        z = attention_logits(F_meta, params["omega"], st.rows, st.cols)
        wts = softmax(f(z), axis=1)
        a = np.einsum("ek,ke->e", wts, st.values)
        if cache is not None:
            cache["att_pre"] = z
            cache["att_weights"] = wts
        return a

    def head(self, params, a, F_meta, cache=None):
        P, u = self.stack.propagator(a)
        XW = _matmul(F_meta, params["head_W"])
        logits = np.asarray(P @ XW) + params["head_b"]
        if cache is not None:
            cache.update(P=P, u=u, XW=XW)
        return logits

    def forward(self, params, keep_cache: bool = True):
        cache = {} if keep_cache else None
        F_meta = self.meta_features(params, cache)
        a = self.fused_values(params, F_meta, cache)
        logits = self.head(params, a, F_meta, cache)
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite logits")
        if cache is not None:
            cache.update(F_meta=F_meta, a=a)
        return logits, cache

    def fuse(self, params) -> tuple[FusedGraph, np.ndarray]:
        F_meta = self.meta_features(params)
        a = self.fused_values(params, F_meta)
        return FusedGraph(self.stack.rows, self.stack.cols, a, self.n), F_meta

    def attention(self, params) -> np.ndarray:
        """Current per-pair meta-path weights (E, K); sum variant broadcasts softmax(w)."""
        if self.config.variant == "sum":
            return np.broadcast_to(softmax(params["w"]), (self.stack.n_support, self.K))
        F_meta = self.meta_features(params)
        return attention_weights(F_meta, params["omega"], self.stack.rows, self.stack.cols,
                                 self.config.attention_activation, self.config.negative_slope)


def fuse(subgraphs, params, config: ModelConfig, F):
    """Build A_meta and F_meta for the configured variant."""
    return HSGNNNetwork(subgraphs, F, config).fuse(params)


def head_forward(fused: FusedGraph, F_meta, W, b):
    """One GCN layer over A_meta: ``D^-1/2 (A + I) D^-1/2 F_meta W + b``."""
    P = gcn_normalize(fused.to_csr())
    out = np.asarray(P @ _matmul(F_meta, W)) + b
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite logits")
    return out


# -- checkpoints ----------------------------------------------------------------

_MAGIC = "# hsgnn checkpoint v1"


def save_checkpoint(path: str, config: ModelConfig, params: dict, extra: dict | None = None) -> None:
    """Text checkpoint: config echo, then ``[name] shape`` blocks of row-major floats."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_MAGIC + "\n")
        fh.write("# config " + json.dumps(config.to_dict(), sort_keys=True) + "\n")
        fh.write("# extra " + json.dumps(extra or {}, sort_keys=True) + "\n")
        for name in sorted(params):
            arr = np.asarray(params[name], dtype=np.float64)
            fh.write(f"[{name}] {' '.join(str(s) for s in arr.shape)}\n")
            rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
            for row in rows:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_checkpoint(path: str) -> tuple[ModelConfig, dict, dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != _MAGIC:
        raise ConfigError(f"{path}: not an hsgnn checkpoint")
    config = ModelConfig.from_dict(json.loads(lines[1][len("# config "):]))
    extra = json.loads(lines[2][len("# extra "):])
    params = {}
    i = 3
    while i < len(lines):
        line = lines[i]
        if not line:
            i += 1
            continue
        if not line.startswith("["):
            raise ConfigError(f"{path}:{i + 1}: expected a parameter block header")
        name, _, shape_s = line[1:].partition("] ")
        shape = tuple(int(s) for s in shape_s.split())
        nrows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        vals = []
        for j in range(nrows):
            row = lines[i + 1 + j]
            vals.extend(float(v) for v in row.split())
        params[name] = np.asarray(vals, dtype=np.float64).reshape(shape)
        i += 1 + nrows
    return config, params, extra

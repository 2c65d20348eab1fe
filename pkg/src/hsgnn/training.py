"""Losses, analytic backpropagation, Adam and finite-difference gradient checks."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from .fusion import ConfigError, HSGNNNetwork, NumericalError, _rowdot, softmax

log = logging.getLogger(__name__)

LOSSES = ("multilabel_bce", "unsup_dotproduct")
BIAS_INITS = ("prior", "zero")
# blocks that get weight decay; vectors (w, omega, bias) are exempt
DECAYED = ("meta_W", "head_W")


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    patience: int = 20
    loss: str = "multilabel_bce"
    grad_check: bool = False
    grad_check_tol: float = 1e-4
    bias_init: str = "prior"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate, eps and weight_decay must be non-negative (eps positive)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.bias_init not in BIAS_INITS:
            raise ConfigError(f"bias_init must be one of {BIAS_INITS}, got {self.bias_init!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- losses ------------------------------------------------------------------------


def _mask_index(mask, n):
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ValueError("loss mask is empty")
    return idx


def loss(logits, labels, mask) -> float:
    """Mean sigmoid cross-entropy over masked rows and all labels."""
    idx = _mask_index(mask, logits.shape[0])
    x = logits[idx]
    y = np.asarray(labels[idx], dtype=np.float64)
    val = float(np.mean(np.logaddexp(0.0, x) - y * x))
    if not np.isfinite(val):
        raise NumericalError("non-finite loss")
    return val


def loss_grad(logits, labels, mask) -> np.ndarray:
    idx = _mask_index(mask, logits.shape[0])
    g = np.zeros_like(logits)
    x = logits[idx]
    g[idx] = (1.0 / (1.0 + np.exp(-x)) - labels[idx]) / x.size
    return g


def _pair_masks(categories):
    cats = np.asarray(categories)
    idx = np.flatnonzero(cats >= 0)
    c = cats[idx]
    same = c[:, None] == c[None, :]
    np.fill_diagonal(same, False)
    diff = c[:, None] != c[None, :]
    return idx, same, diff


def unsup_loss(embeddings, categories) -> float:
    """Dot-product link loss: pull same-category pairs together, push others apart.

    ``categories`` holds a category id per node, negative for unlabelled nodes.
    Positive and negative pairs are averaged separately.
    """
    idx, same, diff = _pair_masks(categories)
    Z = embeddings[idx]
    S = Z @ Z.T
    pos = np.logaddexp(0.0, -S)[same].mean() if same.any() else 0.0
    neg = np.logaddexp(0.0, S)[diff].mean() if diff.any() else 0.0
    return float(pos + neg)


def unsup_loss_grad(embeddings, categories) -> np.ndarray:
    idx, same, diff = _pair_masks(categories)
    Z = embeddings[idx]
    S = Z @ Z.T
    sig = 1.0 / (1.0 + np.exp(-S))
    dS = np.zeros_like(S)
    if same.any():
        dS -= np.where(same, 1.0 - sig, 0.0) / same.sum()
    if diff.any():
        dS += np.where(diff, sig, 0.0) / diff.sum()
    g = np.zeros_like(embeddings)
    g[idx] = (dS + dS.T) @ Z
    return g


# -- backward ------------------------------------------------------------------------


def _head_backward(net: HSGNNNetwork, params, cache, G, grads):
    """Gradients through ``P(a) (F_meta W) + b``; returns (dF_meta, da)."""
    st = net.stack
    P, u, XW, F_meta, a = cache["P"], cache["u"], cache["XW"], cache["F_meta"], cache["a"]
    W = params["head_W"]
    grads["head_b"] = G.sum(axis=0)
    dXW = np.asarray(P.T @ G)
    grads["head_W"] = np.asarray(F_meta.T @ dXW)
    # F_meta only depends on parameters in the aggregated-attention variant
    dF_meta = dXW @ W.T if net.config.variant == "agg_attention" else None

    # dL/dP on the support and on the diagonal; pick the narrower inner dimension
    if not sp.issparse(F_meta) and F_meta.shape[1] < XW.shape[1]:
        left, right = G @ W.T, F_meta
    else:
        left, right = G, XW
    dPe = _rowdot(left, right, st.rows, st.cols)
    dPd = np.einsum("ij,ij->i", left, right)

    r, c = st.rows, st.cols
    da = dPe * u[r] * u[c]
    du = (np.bincount(r, weights=dPe * a * u[c], minlength=net.n)
          + np.bincount(c, weights=dPe * a * u[r], minlength=net.n)
          + 2.0 * dPd * u)
    ddeg = du * (-0.5) * u ** 3
    da += ddeg[r]
    return dF_meta, da


def backward(net: HSGNNNetwork, params, cache, dlogits) -> dict:
    """Analytic gradients of every parameter block given dL/dlogits."""
    cfg = net.config
    st = net.stack
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    dF_meta, da = _head_backward(net, params, cache, dlogits, grads)

    if cfg.variant == "sum":
        sw = cache["sum_weights"]
        dsw = st.values @ da
        grads["w"] = sw * (dsw - sw @ dsw)
        return grads

    # attention over the support
    z, wts = cache["att_pre"], cache["att_weights"]
    dw = da[:, None] * st.values.T
    dg = wts * (dw - np.sum(wts * dw, axis=1, keepdims=True))
    dz = dg * net._att[1](z)
    ds_left = np.asarray(st.row_incidence @ dz)
    ds_right = np.asarray(st.col_incidence @ dz)
    F_meta = cache["F_meta"]
    d = F_meta.shape[1]
    omega = params["omega"]
    grads["omega"] = np.hstack([np.asarray(F_meta.T @ ds_left).T, np.asarray(F_meta.T @ ds_right).T])
    if cfg.variant == "attention":
        return grads

    dF_meta = dF_meta + ds_left @ omega[:, :d] + ds_right @ omega[:, d:]
    h = cfg.hidden_dim
    dgnn = net._gnn[1]
    for k in range(net.K):
        dH = dF_meta / net.K if cfg.aggregator == "mean" else dF_meta[:, k * h:(k + 1) * h]
        dY = dH * dgnn(cache["meta_pre"][k])
        dZ = np.asarray(net.meta_propagators[k].T @ dY)
        grads["meta_W"][k] = np.asarray(net.F.T @ dZ)
    return grads


# -- objective wrapper ------------------------------------------------------------


class Objective:
    """Loss and gradient of a network for a fixed target."""

    def __init__(self, net: HSGNNNetwork, kind: str, labels=None, mask=None, categories=None):
        if kind not in LOSSES:
            raise ConfigError(f"unknown loss {kind!r}")
        self.net = net
        self.kind = kind
        self.labels = labels
        self.mask = mask
        self.categories = categories

    def value_and_grad(self, params, scale: float = 1.0):
        logits, cache = self.net.forward(params)
        if self.kind == "multilabel_bce":
            val = loss(logits, self.labels, self.mask)
            dl = loss_grad(logits, self.labels, self.mask)
        else:
            val = unsup_loss(logits, self.categories)
            dl = unsup_loss_grad(logits, self.categories)
        return scale * val, backward(self.net, params, cache, scale * dl), logits

    def value(self, params) -> float:
        logits, _ = self.net.forward(params, keep_cache=False)
        if self.kind == "multilabel_bce":
            return loss(logits, self.labels, self.mask)
        return unsup_loss(logits, self.categories)


# -- gradient check -----------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_error.values())

    def __str__(self):
        parts = ", ".join(f"{k}={v:.3g}" for k, v in sorted(self.max_rel_error.items()))
        return f"GradCheckReport({'pass' if self.passed else 'FAIL'}: {parts})"


def relative_error(ga, gn):
    return np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)


def grad_check(objective: Objective, params, h: float = 1e-4, tol: float = 1e-4,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block.

    ``max_entries`` caps the number of probed entries per block (sampled
    with ``seed``); ``None`` checks every entry.
    """
    _, analytic, _ = objective.value_and_grad(params)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tol)
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = objective.value(params)
            flat[i] = old - h
            fm = objective.value(params)
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * h)
        err = relative_error(analytic[name].reshape(-1)[idx], numeric)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report


# -- optimizer ----------------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay on the blocks in ``DECAYED``.

    The decay shrinks weights directly (``w -= lr * wd * w``) instead of
    being added to the gradient; the label-averaged loss yields gradients far
    smaller than ``wd * w``, which would otherwise drown the data term.
    """

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            if self.weight_decay and k in DECAYED:
                params[k] *= 1.0 - self.lr * self.weight_decay
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# -- training loop ---------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_p5: float
    val_p10: float
    seconds: float


@dataclass
class TrainResult:
    params: dict
    log: list
    best_epoch: int
    grad_report: GradCheckReport | None = None


def prior_bias(labels, mask, clip: float = 1e-3) -> np.ndarray:
    """Output bias at the log-odds of each label's training frequency.

    Adam moves every bias coordinate by roughly the same step early on, so a
    zero start spends many epochs shifting all labels down together before
    any ranking signal appears.
    """
    Y = np.asarray(labels, dtype=np.float64)
    idx = _mask_index(mask, Y.shape[0])
    p = np.clip(Y[idx].mean(axis=0), clip, 1.0 - clip)
    return np.log(p) - np.log1p(-p)


def train(net: HSGNNNetwork, config: TrainConfig, labels=None, train_mask=None,
          val_nodes=None, categories=None, params=None, val_metric=None) -> TrainResult:
    """Full-batch Adam training with early stopping on validation precision@10.

    ``val_metric(logits, nodes, k)`` scores validation predictions; when
    there are no validation nodes the last epoch is kept.
    """
    if params is None:
        params = net.init_params()
        if config.bias_init == "prior" and config.loss == "multilabel_bce" and labels is not None:
            params["head_b"] = prior_bias(labels, train_mask)
    params = {k: v.copy() for k, v in params.items()}
    objective = Objective(net, config.loss, labels=labels, mask=train_mask, categories=categories)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps, config.weight_decay)
    has_val = val_nodes is not None and len(val_nodes) > 0 and val_metric is not None and config.loss == "multilabel_bce"

    report = None
    if config.grad_check:
        report = grad_check(objective, params, tol=config.grad_check_tol, max_entries=20)
        if not report.passed:
            raise NumericalError(f"gradient check failed: {report}")

    history = []
    best = (-np.inf, 0, copy.deepcopy(params))
    stale = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        try:
            val, grads, logits = objective.value_and_grad(params)
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}: {exc}") from None
        if not np.isfinite(val):
            raise NumericalError(f"epoch {epoch}: non-finite loss")
        p5 = p10 = float("nan")
        if has_val:
            p5 = val_metric(logits, val_nodes, 5)
            p10 = val_metric(logits, val_nodes, 10)
        snapshot = {k: v.copy() for k, v in params.items()}
        opt.step(params, grads)
        history.append(EpochRecord(epoch, val, p5, p10, time.perf_counter() - t0))
        score = p10 if has_val else -val
        if score > best[0]:
            best = (score, epoch, snapshot)
            stale = 0
        else:
            stale += 1
            if has_val and stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[1])
                break
    if not history:
        return TrainResult(params, history, -1, report)
    if not has_val:
        return TrainResult(params, history, len(history), report)
    return TrainResult(best[2], history, best[1], report)


def write_log(records, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss,val_p@5,val_p@10,seconds\n")
        for r in records:
            fh.write(f"{r.epoch},{r.loss:.17g},{r.val_p5:.17g},{r.val_p10:.17g},{r.seconds:.6f}\n")

"""Leakage-safe splitting, precision@k at visit and patient level, embedding export."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .hetgraph import HeteroGraph

log = logging.getLogger(__name__)

KS = (5, 10, 15, 20)
PARTS = ("train", "val", "test")


@dataclass
class SplitPlan:
    """Target assignment plus every edge removed to prevent leakage."""
    assignment: dict                     # visit key -> "train" | "val" | "test"
    removed: dict = field(default_factory=dict)  # (a, b) -> list of (src, dst) keys
    seed: int = 0

    def keys(self, part: str) -> list[str]:
        return [k for k, p in self.assignment.items() if p == part]

    def n_removed(self) -> int:
        return sum(len(v) for v in self.removed.values())

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "assignment": self.assignment,
            "removed": {f"{a}-{b}": [list(e) for e in v] for (a, b), v in sorted(self.removed.items())},
        }, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        removed = {tuple(k.split("-")): [tuple(e) for e in v] for k, v in d["removed"].items()}
        return cls(d["assignment"], removed, d.get("seed", 0))


def split(graph: HeteroGraph, labels: dict, seed: int = 0, ratios=(0.7, 0.1, 0.2),
          target_type: str = "V", removed_types=("D", "M", "P")):
    """Assign targets 7:1:2 and strip their label-revealing edges.

    Every ``target_type``-to-``removed_types`` edge of a validation or test
    target is removed (diagnoses are the labels; medications and procedures
    follow from them). Other observation edges stay.
    """
    targets = [k for k in graph.keys(target_type) if k in labels]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(targets))
    total = float(sum(ratios))
    n_train = int(round(len(targets) * ratios[0] / total))
    n_val = int(round(len(targets) * ratios[1] / total))
    assignment = {}
    for rank, i in enumerate(order):
        part = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        assignment[targets[i]] = part
    assignment = {k: assignment[k] for k in targets}

    held = [k for k in targets if assignment[k] != "train"]
    removed = {}
    for t in removed_types:
        if t not in graph.schema.node_types or not graph.schema.has_edge_type(target_type, t):
            continue
        pairs = []
        for k in held:
            pairs.extend((k, d) for d in graph.neighbors(target_type, k, t))
        removed[(target_type, t)] = pairs
    plan = SplitPlan(assignment, removed, seed)
    return plan, graph.without_edges(removed)


def leaked_edges(graph: HeteroGraph, plan: SplitPlan, target_type="V", removed_types=("D", "M", "P")) -> list:
    """Exhaustive scan: label-revealing edges still incident to val/test targets."""
    bad = []
    for k, part in plan.assignment.items():
        if part == "train":
            continue
        for t in removed_types:
            if t in graph.schema.node_types and graph.schema.has_edge_type(target_type, t):
                bad.extend((k, d) for d in graph.neighbors(target_type, k, t))
    return bad


# -- targets -------------------------------------------------------------------


@dataclass
class Targets:
    """Binary label rows over all graph nodes plus the patient/visit bookkeeping."""
    Y: np.ndarray                        # (N, L) uint8
    label_keys: list
    visit_nodes: np.ndarray              # global ids of labelled visits
    patient_nodes: np.ndarray            # global ids of patients with a visit


def build_targets(graph: HeteroGraph, labels: dict, label_type="D", visit_type="V",
                  patient_type="C") -> Targets:
    """Visit rows from ``labels``; patient rows are the intersection over their visits."""
    label_keys = list(graph.keys(label_type))
    col = {k: i for i, k in enumerate(label_keys)}
    Y = np.zeros((graph.n_nodes, len(label_keys)), dtype=np.uint8)
    visits = []
    for vk in graph.keys(visit_type):
        if vk not in labels:
            continue
        i = graph.node_id(visit_type, vk)
        visits.append(i)
        for lab in labels[vk]:
            Y[i, col[lab]] = 1
    patients = []
    if patient_type in graph.schema.node_types and graph.schema.has_edge_type(patient_type, visit_type):
        for ck in graph.keys(patient_type):
            vs = [graph.node_id(visit_type, v) for v in graph.neighbors(patient_type, ck, visit_type) if v in labels]
            if not vs:
                continue
            i = graph.node_id(patient_type, ck)
            Y[i] = np.min(Y[vs], axis=0)
            patients.append(i)
    return Targets(Y, label_keys, np.asarray(visits, dtype=np.int64), np.asarray(patients, dtype=np.int64))


def patient_parts(graph: HeteroGraph, plan: SplitPlan, visit_type="V", patient_type="C") -> dict:
    """A patient belongs to a part when all of its labelled visits do."""
    out = {}
    if patient_type not in graph.schema.node_types:
        return out
    for ck in graph.keys(patient_type):
        parts = {plan.assignment[v] for v in graph.neighbors(patient_type, ck, visit_type) if v in plan.assignment}
        if len(parts) == 1:
            out[ck] = parts.pop()
    return out


def node_sets(graph: HeteroGraph, plan: SplitPlan, visit_type="V", patient_type="C") -> dict:
    """``{(level, part): global ids}`` for level in visit/patient."""
    out = {}
    for part in PARTS:
        out[("visit", part)] = np.asarray(
            sorted(graph.node_id(visit_type, k) for k, p in plan.assignment.items() if p == part), dtype=np.int64)
    pp = patient_parts(graph, plan, visit_type, patient_type)
    for part in PARTS:
        out[("patient", part)] = np.asarray(
            sorted(graph.node_id(patient_type, k) for k, p in pp.items() if p == part), dtype=np.int64)
    return out


# -- metrics -------------------------------------------------------------------


def _topk(scores, k):
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def precision_at_k(scores, truth, k: int, capped: bool = True) -> float:
    """Mean of ``|top-k ∩ truth| / min(k, |truth|)`` over rows with nonempty truth.

    With ``capped=False`` the denominator is plain ``k``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth) > 0
    if scores.shape != truth.shape:
        raise ValueError(f"scores {scores.shape} and truth {truth.shape} differ in shape")
    sizes = truth.sum(axis=1)
    keep = sizes > 0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} target(s) with empty truth excluded from precision@{k}")
    if not keep.any():
        return float("nan")
    scores, truth, sizes = scores[keep], truth[keep], sizes[keep]
    k = min(k, scores.shape[1])
    top = _topk(scores, k)
    hits = np.take_along_axis(truth, top, axis=1).sum(axis=1)
    den = np.minimum(k, sizes) if capped else np.full(sizes.shape, k)
    return float(np.mean(hits / den))


def random_baseline(truth, k: int, capped: bool = True) -> float:
    """Expected precision@k of uniformly random rankings (rows with nonempty truth)."""
    truth = np.asarray(truth) > 0
    L = truth.shape[1]
    sizes = truth.sum(axis=1)
    sizes = sizes[sizes > 0]
    k = min(k, L)
    expected_hits = k * sizes / L
    den = np.minimum(k, sizes) if capped else np.full(sizes.shape, k)
    return float(np.mean(expected_hits / den))


def random_baseline_std(truth, k: int, capped: bool = True) -> float:
    """Standard deviation of the mean random precision@k (hypergeometric hits)."""
    truth = np.asarray(truth) > 0
    L = truth.shape[1]
    sizes = truth.sum(axis=1)
    sizes = sizes[sizes > 0]
    k = min(k, L)
    if L < 2 or sizes.size == 0:
        return 0.0
    var_hits = k * (sizes / L) * (1 - sizes / L) * (L - k) / (L - 1)
    den = np.minimum(k, sizes) if capped else np.full(sizes.shape, k)
    return float(np.sqrt(np.sum(var_hits / den ** 2)) / sizes.size)


@dataclass
class MetricReport:
    """precision@k per level as lists over repeats."""
    values: dict = field(default_factory=dict)   # (level, k) -> list of floats

    def add(self, level: str, k: int, value: float) -> None:
        self.values.setdefault((level, k), []).append(value)

    def mean(self, level: str, k: int) -> float:
        return float(np.mean(self.values[(level, k)]))

    def std(self, level: str, k: int) -> float:
        return float(np.std(self.values[(level, k)]))

    def merge(self, other: "MetricReport") -> "MetricReport":
        for key, vals in other.values.items():
            self.values.setdefault(key, []).extend(vals)
        return self

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "k", "mean", "std", "n"])
            for (level, k) in sorted(self.values):
                vals = self.values[(level, k)]
                w.writerow([level, k, f"{np.mean(vals):.6f}", f"{np.std(vals):.6f}", len(vals)])

    def table(self, name: str = "model") -> str:
        levels = [lv for lv in ("visit", "patient") if any(key[0] == lv for key in self.values)]
        ks = sorted({k for (_, k) in self.values})
        head = f"{'Model':<16}" + "".join(f"{lv[0].upper()}@{k:<9}" for lv in levels for k in ks)
        row = f"{name:<16}"
        for lv in levels:
            for k in ks:
                if (lv, k) in self.values:
                    m, s = self.mean(lv, k), self.std(lv, k)
                    cell = f"{m:.4f}" if len(self.values[(lv, k)]) == 1 else f"{m:.3f}±{s:.3f}"
                else:
                    cell = "-"
                row += f"{cell:<11}"
        return head.rstrip() + "\n" + row.rstrip() + "\n"


def evaluate(logits, targets: Targets, sets: dict, part: str = "test", ks=KS, capped=True) -> MetricReport:
    report = MetricReport()
    for level in ("visit", "patient"):
        nodes = sets.get((level, part), np.zeros(0, np.int64))
        if nodes.size == 0:
            continue
        truth = targets.Y[nodes]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for k in ks:
                report.add(level, k, precision_at_k(logits[nodes], truth, k, capped))
    return report


# -- embeddings ----------------------------------------------------------------


def export_embeddings(vectors, keys, path: str) -> None:
    """One TSV row per node: key then the vector components."""
    vectors = np.asarray(vectors)
    if len(keys) != vectors.shape[0]:
        raise ValueError("keys and vectors disagree in length")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, row in zip(keys, vectors):
            fh.write(key + "\t" + "\t".join(f"{v:.17g}" for v in row) + "\n")


def read_embeddings(path: str):
    keys, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            keys.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    return keys, np.asarray(rows)


def cosine_separation(vectors, categories) -> tuple[float, float]:
    """Mean cosine similarity within and across categories (distinct pairs only)."""
    X = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = X / np.where(norms > 0, norms, 1.0)
    S = X @ X.T
    c = np.asarray(categories)
    same = c[:, None] == c[None, :]
    off = ~np.eye(len(c), dtype=bool)
    return float(S[same & off].mean()), float(S[~same].mean())


def mean_pairwise_cosine(vectors) -> float:
    X = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = X / np.where(norms > 0, norms, 1.0)
    n = X.shape[0]
    s = X.sum(axis=0)
    # sum over i != j of x_i . x_j = |sum x|^2 - sum |x_i|^2
    total = float(s @ s) - float(np.sum(X * X))
    return total / (n * (n - 1))

"""Seeded generator of EHR-shaped heterogeneous graphs with planted conditions.

Random stream rule: a single ``numpy.random.default_rng(seed)`` stream is
consumed in a fixed order (affinities per condition and code type, then
patients, then visits in key order), so output depends only on the config.
"""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .hetgraph import HeteroGraph, Schema, write_graph

CODE_TYPES = ("D", "P", "M", "L", "B", "S")
TYPE_NAMES = {
    "C": "patient", "V": "visit", "D": "diagnosis", "P": "procedure", "M": "medication",
    "L": "lab", "B": "microbiology", "S": "symptom", "G": "gender",
}
# MIMIC-III node statistics scaled 1:100 for humans; code vocabularies kept as is
DEFAULT_COUNTS = {"C": 465, "V": 590, "D": 203, "P": 157, "M": 304, "L": 480, "B": 258, "S": 324}
DEFAULT_MEANS = {"D": 11.20, "P": 4.65, "M": 23.18, "L": 27.55, "B": 0.94, "S": 19.06}


class GenConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    means: dict = field(default_factory=lambda: dict(DEFAULT_MEANS))
    n_latent_conditions: int = 9
    signal: float = 0.8
    dirichlet_alpha: float = 1.0
    hub_attribute: bool = False
    seed: int = 7

    def __post_init__(self):
        counts = dict(DEFAULT_COUNTS)
        for k, v in dict(self.counts).items():
            if k not in DEFAULT_COUNTS:
                raise GenConfigError(f"counts.{k}: unknown node type (expected one of {sorted(DEFAULT_COUNTS)})")
            counts[k] = v
        means = dict(DEFAULT_MEANS)
        for k, v in dict(self.means).items():
            if k not in DEFAULT_MEANS:
                raise GenConfigError(f"means.{k}: unknown code type (expected one of {list(CODE_TYPES)})")
            means[k] = v
        self.counts, self.means = counts, means
        for k, v in counts.items():
            if int(v) != v or v < 1:
                raise GenConfigError(f"counts.{k} must be a positive integer, got {v}")
        for k, v in means.items():
            if v < 0:
                raise GenConfigError(f"means.{k} must be non-negative, got {v}")
            if v > counts[k]:
                raise GenConfigError(f"means.{k}={v} exceeds the number of {TYPE_NAMES[k]} codes ({counts[k]})")
        if self.n_latent_conditions < 1:
            raise GenConfigError("n_latent_conditions must be >= 1")
        if not 0.0 <= self.signal <= 1.0:
            raise GenConfigError("signal must lie in [0, 1]")
        if self.dirichlet_alpha <= 0:
            raise GenConfigError("dirichlet_alpha must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GenConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise GenConfigError(f"unknown synthgen keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PlantedTruth:
    """Latent condition per human node and per-code affinity."""
    condition: dict                      # node key -> condition id (patients and visits)
    affinity: dict                       # code type -> (n_conditions, n_codes) distribution
    home: dict                           # code type -> condition whose core set holds the code

    def code_category(self, code_type: str) -> np.ndarray:
        return self.home[code_type]


@dataclass
class SynthDataset:
    graph: HeteroGraph
    labels: dict                         # visit key -> list of diagnosis keys
    truth: PlantedTruth
    config: GenConfig


def synth_schema(hub: bool = False) -> Schema:
    types = ["C", "V", *CODE_TYPES] + (["G"] if hub else [])
    edges = [("C", "V")] + [("V", t) for t in CODE_TYPES] + ([("C", "G")] if hub else [])
    return Schema(tuple(types), tuple(edges), human_types=("C", "V"))


def _keys(prefix, n):
    width = len(str(n))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def generate(config: GenConfig | None = None) -> SynthDataset:
    cfg = config or GenConfig()
    rng = np.random.default_rng(cfg.seed)
    nc = cfg.n_latent_conditions

    # each condition owns a disjoint core set of every code type
    affinity, home = {}, {}
    for t in CODE_TYPES:
        n = cfg.counts[t]
        perm = rng.permutation(n)
        groups = np.array_split(perm, nc) if nc > 1 else [perm]
        aff = np.zeros((nc, n))
        h = np.zeros(n, dtype=np.int64)
        if nc == 1:
            aff[0] = 1.0 / n
        else:
            for c, g in enumerate(groups):
                h[g] = c
                if g.size:
                    aff[c, g] = rng.dirichlet(np.full(g.size, cfg.dirichlet_alpha))
        affinity[t], home[t] = aff, h

    keys = {"C": _keys("C", cfg.counts["C"])}
    patient_cond = rng.integers(0, nc, size=cfg.counts["C"])
    rate = max(cfg.counts["V"] / cfg.counts["C"] - 1.0, 0.0)
    n_visits = 1 + rng.poisson(rate, size=cfg.counts["C"])
    total = int(n_visits.sum())
    keys["V"] = _keys("V", total)
    for t in CODE_TYPES:
        keys[t] = _keys(t, cfg.counts[t])

    edges = {("C", "V"): []}
    for t in CODE_TYPES:
        edges[("V", t)] = []
    condition = {}
    labels = {}
    v = 0
    for ci, ck in enumerate(keys["C"]):
        condition[ck] = int(patient_cond[ci])
        for _ in range(n_visits[ci]):
            vk = keys["V"][v]
            v += 1
            cond = int(patient_cond[ci])
            condition[vk] = cond
            edges[("C", "V")].append((ck, vk))
            for t in CODE_TYPES:
                n = cfg.counts[t]
                m = min(int(rng.poisson(cfg.means[t])), n)
                if m == 0:
                    continue
                p = cfg.signal * affinity[t][cond] + (1.0 - cfg.signal) / n
                # zero-probability codes cannot be drawn without replacement; floor them
                p = np.maximum(p, 1e-12)
                p /= p.sum()
                chosen = np.sort(rng.choice(n, size=m, replace=False, p=p))
                edges[("V", t)].extend((vk, keys[t][j]) for j in chosen)
                if t == "D":
                    labels[vk] = [keys["D"][j] for j in chosen]
            labels.setdefault(vk, [])

    if cfg.hub_attribute:
        keys["G"] = ["female", "male"]
        sex = rng.integers(0, 2, size=cfg.counts["C"])
        edges[("C", "G")] = [(ck, keys["G"][s]) for ck, s in zip(keys["C"], sex)]

    schema = synth_schema(cfg.hub_attribute)
    graph = HeteroGraph.from_edge_lists(schema, keys, edges)
    return SynthDataset(graph, labels, PlantedTruth(condition, affinity, home), cfg)


def write_labels(labels: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_key", "label"])
        for k in sorted(labels):
            for lab in labels[k]:
                w.writerow([k, lab])


def read_labels(path: str) -> dict:
    out: dict[str, list[str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["node_key", "label"]:
            raise ValueError(f"{path}: expected header node_key,label")
        for row in r:
            if row:
                out.setdefault(row[0], []).append(row[1])
    return out


def write_truth(ds: SynthDataset, path: str) -> None:
    """``key,type,condition``; codes carry the condition owning their core set."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "type", "condition"])
        for t in ("C", "V"):
            for k in ds.graph.keys(t):
                w.writerow([k, t, ds.truth.condition[k]])
        for t in CODE_TYPES:
            for k, c in zip(ds.graph.keys(t), ds.truth.home[t]):
                w.writerow([k, t, int(c)])


def read_truth(path: str) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        return {row["key"]: int(row["condition"]) for row in r}


def write_dataset(ds: SynthDataset, directory: str) -> list[str]:
    written = write_graph(ds.graph, directory)
    lp = os.path.join(directory, "labels.csv")
    tp = os.path.join(directory, "truth.csv")
    write_labels(ds.labels, lp)
    write_truth(ds, tp)
    return written + [lp, tp]

"""Pipeline front-end: ``hsgnn <command> --config run.yaml``.

Every stage reads the previous stage's files from the run directory and
writes its own, so each artifact can be inspected or regenerated alone.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np
import yaml

from . import evalkit
from .estimator import HSGNNClassifier, SimilarityGraphBuilder
from .fusion import ConfigError, ModelConfig, NumericalError, load_checkpoint, save_checkpoint
from .hetgraph import FEATURE_MODES, GraphError, HeteroGraph, default_features, read_graph_dir
from .metapath import NORMALIZATIONS, MetaPath, MetaPathError, PathCountOverflow, read_triplets, write_triplets
from .quickinfer import TestBatch, quick_infer, write_predictions
from .synthgen import GenConfig, GenConfigError, generate, read_labels, write_dataset
from .training import TrainConfig, write_log

log = logging.getLogger("hsgnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


# -- config schema -------------------------------------------------------------
# Every accepted key with its default and a one-line description. Nested
# dicts are sections; anything not listed here is rejected.

def _defaults(cls):
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


_GEN_DOCS = {
    "counts": "nodes per type, keys C V D P M L B S",
    "means": "mean codes per visit for D P M L B S (Poisson)",
    "n_latent_conditions": "planted conditions",
    "signal": "probability mass a visit puts on its condition's codes",
    "dirichlet_alpha": "concentration of code weights inside a condition",
    "hub_attribute": "add a two-node gender-like hub G linked to every patient",
    "seed": "generator seed",
}
_MODEL_DOCS = {
    "variant": "fusion variant: sum | attention | agg_attention",
    "aggregator": "meta-feature aggregator: concat | mean",
    "hidden_dim": "per-meta-path GNN width (agg_attention)",
    "attention_activation": "activation on attention logits",
    "gnn_activation": "activation of the per-meta-path GNNs",
    "negative_slope": "leaky_relu slope",
    "seed": "parameter initialization seed",
    "embedding_dim": "output width under unsup_dotproduct",
}
_TRAIN_DOCS = {
    "epochs": "maximum epochs (0 = keep the initialization)",
    "learning_rate": "Adam step size",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "eps": "Adam epsilon",
    "weight_decay": "decoupled decay on weight matrices",
    "patience": "epochs without validation precision@10 gain before stopping",
    "loss": "multilabel_bce | unsup_dotproduct",
    "grad_check": "run a finite-difference check before training",
    "grad_check_tol": "max relative error allowed by the check",
    "bias_init": "prior (label log-odds) | zero",
}


def _schema():
    gen = _defaults(GenConfig)
    model = {k: v for k, v in _defaults(ModelConfig).items() if k != "label_dim"}
    model["embedding_dim"] = 16
    train = _defaults(TrainConfig)
    return {
        "output": (None, "run directory receiving every artifact (required)"),
        "data": {
            "dir": (None, "dataset directory; default <output>/data"),
            "labels": (None, "node_key,label CSV; default <dir>/labels.csv"),
            "categories": (None, "key,type,condition CSV for unsup_dotproduct; default <dir>/truth.csv"),
            "category_types": (["D"], "node types whose categories drive unsup_dotproduct"),
        },
        "synthgen": {k: (v, _GEN_DOCS[k]) for k, v in gen.items()},
        "metapaths": (["V-D", "V-M", "V-P", "V-L", "V-S", "V-B", "V-C-V", "D-V-L", "D-V-S", "D-V-D",
                       "C-V-L", "C-V-S", "C-V-D"],
                      "meta-path strings such as V-D-V, one similarity subgraph each"),
        "normalization": ("sps", "sps | raw_pathcount"),
        "features": ("onehot-code", "input features: " + " | ".join(FEATURE_MODES)),
        "model": {k: (v, _MODEL_DOCS[k]) for k, v in model.items()},
        "train": {k: (v, _TRAIN_DOCS[k]) for k, v in train.items()},
        "split": {
            "enabled": (True, "hold out val/test targets; false trains on every labelled visit"),
            "seed": (0, "split seed"),
            "ratios": ([0.7, 0.1, 0.2], "train/val/test proportions"),
            "target_type": ("V", "node type being split"),
            "removed_types": (["D", "M", "P"], "code types whose edges to held-out targets are removed"),
        },
        "eval": {
            "part": ("test", "train | val | test"),
            "ks": ([5, 10, 15, 20], "cut-offs for precision@k"),
        },
        "infer": {
            "batch": ([], "edge CSVs describing new visits/patients"),
            "k": (10, "labels written per node"),
        },
        "embeddings": {
            "layer": ("output", "output | meta"),
        },
    }


SCHEMA = _schema()


def _help_lines(schema=SCHEMA, prefix=""):
    lines = []
    for key, entry in schema.items():
        name = prefix + key
        if isinstance(entry, dict):
            lines.extend(_help_lines(entry, name + "."))
        else:
            default, doc = entry
            shown = "required" if default is None and key == "output" else json.dumps(default)
            lines.append(f"  {name:<28} {doc} [default: {shown}]")
    return lines


def _merge(schema, given, where=""):
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    out = {}
    for key, entry in schema.items():
        if isinstance(entry, dict):
            out[key] = _merge(entry, given.get(key) or {}, where + key + ".")
        else:
            out[key] = copy.deepcopy(given[key]) if key in given else copy.deepcopy(entry[0])
    return out


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    cfg = _merge(SCHEMA, raw or {})
    if not cfg["output"]:
        raise ConfigError("output: a run directory is required")
    if cfg["normalization"] not in NORMALIZATIONS:
        raise ConfigError(f"normalization must be one of {NORMALIZATIONS}")
    if cfg["features"] not in FEATURE_MODES:
        raise ConfigError(f"features must be one of {FEATURE_MODES}")
    if not isinstance(cfg["metapaths"], list) or not cfg["metapaths"]:
        raise ConfigError("metapaths must be a nonempty list")
    for p in cfg["metapaths"]:
        MetaPath.parse(str(p))
    if cfg["eval"]["part"] not in evalkit.PARTS:
        raise ConfigError(f"eval.part must be one of {evalkit.PARTS}")
    if cfg["embeddings"]["layer"] not in ("output", "meta"):
        raise ConfigError("embeddings.layer must be output or meta")
    TrainConfig.from_dict(cfg["train"])
    ModelConfig.from_dict({k: v for k, v in cfg["model"].items() if k != "embedding_dim"})
    return cfg


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# -- stage helpers -------------------------------------------------------------


def _out(cfg, *parts):
    return os.path.join(cfg["output"], *parts)


def _data_dir(cfg):
    return cfg["data"]["dir"] or _out(cfg, "data")


def _read_graph(cfg) -> HeteroGraph:
    d = _data_dir(cfg)
    if not os.path.exists(os.path.join(d, "schema.json")):
        raise DataError(f"no dataset at {d} (run 'generate' or set data.dir)")
    return read_graph_dir(d)


def _labels(cfg):
    path = cfg["data"]["labels"] or os.path.join(_data_dir(cfg), "labels.csv")
    if not os.path.exists(path):
        return None
    try:
        return read_labels(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _plan(cfg):
    path = _out(cfg, "split.json")
    if not os.path.exists(path):
        raise DataError(f"{path} missing (run 'preprocess' first)")
    with open(path, encoding="utf-8") as fh:
        return evalkit.SplitPlan.from_json(fh.read())


def _pruned(cfg):
    graph = _read_graph(cfg)
    plan = _plan(cfg)
    return graph.without_edges(plan.removed), plan


def _subgraph_files(cfg):
    return [_out(cfg, "subgraphs", f"{i:02d}_{str(MetaPath.parse(p)).replace('-', '')}.txt")
            for i, p in enumerate(cfg["metapaths"])]


def _graph_data(cfg, graph):
    files = _subgraph_files(cfg)
    for f in files:
        if not os.path.exists(f):
            raise DataError(f"{f} missing (run 'preprocess' first)")
    subs = [read_triplets(f) for f in files]
    for s in subs:
        if s.n != graph.n_nodes or s.normalization != cfg["normalization"]:
            raise DataError("subgraph files do not match the dataset/config; rerun 'preprocess'")
    from .estimator import GraphData
    return GraphData(subs, default_features(graph, cfg["features"]), graph)


def _targets(cfg, graph, plan):
    labels = _labels(cfg)
    if labels is None:
        raise DataError("labels file missing")
    tg = evalkit.build_targets(graph, labels, visit_type=cfg["split"]["target_type"])
    sets = evalkit.node_sets(graph, plan, visit_type=cfg["split"]["target_type"])
    return tg, sets


def _categories(cfg, graph):
    path = cfg["data"]["categories"] or os.path.join(_data_dir(cfg), "truth.csv")
    if not os.path.exists(path):
        raise DataError(f"unsup_dotproduct needs a categories file, {path} not found")
    cats = np.full(graph.n_nodes, -1, dtype=np.int64)
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            t = row["type"]
            if t in cfg["data"]["category_types"] and graph.has_key(t, row["key"]):
                cats[graph.node_id(t, row["key"])] = int(row["condition"])
    return cats


def _restore(cfg, graph):
    path = _out(cfg, "checkpoint.txt")
    if not os.path.exists(path):
        raise DataError(f"{path} missing (run 'train' first)")
    mcfg, params, extra = load_checkpoint(path)
    data = _graph_data(cfg, graph)
    return HSGNNClassifier.from_params(mcfg, params, data), extra


# -- commands ------------------------------------------------------------------


def cmd_generate(cfg) -> list[str]:
    gcfg = GenConfig.from_dict(cfg["synthgen"])
    ds = generate(gcfg)
    d = _data_dir(cfg)
    written = write_dataset(ds, d)
    manifest = {
        "seed": gcfg.seed,
        "config_hash": config_hash(gcfg.to_dict()),
        "files": {os.path.basename(p): _sha(p) for p in sorted(written)},
    }
    mpath = os.path.join(d, "manifest.json")
    with open(mpath, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("dataset written to %s (%d nodes)", d, ds.graph.n_nodes)
    return written + [mpath]


def cmd_preprocess(cfg) -> list[str]:
    graph = _read_graph(cfg)
    sc = cfg["split"]
    if sc["enabled"]:
        labels = _labels(cfg)
        if labels is None:
            raise DataError("splitting needs a labels file (or set split.enabled: false)")
        plan, pruned = evalkit.split(graph, labels, seed=sc["seed"], ratios=tuple(sc["ratios"]),
                                     target_type=sc["target_type"], removed_types=tuple(sc["removed_types"]))
        leaks = evalkit.leaked_edges(pruned, plan, sc["target_type"], tuple(sc["removed_types"]))
        if leaks:
            raise DataError(f"split left {len(leaks)} label-revealing edges")
    else:
        labels = _labels(cfg) or {}
        plan = evalkit.SplitPlan({k: "train" for k in graph.keys(sc["target_type"]) if k in labels}, {}, sc["seed"])
        pruned = graph
    os.makedirs(_out(cfg, "subgraphs"), exist_ok=True)
    written = [_out(cfg, "split.json")]
    with open(written[0], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(plan.to_json() + "\n")
    builder = SimilarityGraphBuilder(cfg["metapaths"], cfg["normalization"], cfg["features"]).fit(pruned)
    data = builder.transform(pruned)
    for sub, path in zip(data.subgraphs, _subgraph_files(cfg)):
        write_triplets(sub, path)
        written.append(path)
    log.info("%d subgraphs written", len(data.subgraphs))
    return written


def cmd_train(cfg) -> list[str]:
    graph, plan = _pruned(cfg)
    data = _graph_data(cfg, graph)
    tcfg = TrainConfig.from_dict(cfg["train"])
    clf = HSGNNClassifier(**{k: v for k, v in cfg["model"].items() if k != "seed"}, random_state=cfg["model"]["seed"],
                          **{k: v for k, v in cfg["train"].items()})
    if tcfg.loss == "multilabel_bce":
        tg, sets = _targets(cfg, graph, plan)
        mask = np.zeros(graph.n_nodes, dtype=bool)
        mask[sets[("visit", "train")]] = True
        mask[sets[("patient", "train")]] = True
        if not mask.any():
            raise DataError("no labelled training nodes")
        clf.fit(data, tg.Y, train_mask=mask, val_nodes=sets[("visit", "val")])
    else:
        clf.fit(data, _categories(cfg, graph))
    extra = {"best_epoch": int(clf.best_epoch_), "metapaths": [str(MetaPath.parse(p)) for p in cfg["metapaths"]],
             "normalization": cfg["normalization"], "features": cfg["features"], "train": tcfg.to_dict()}
    ck, lg = _out(cfg, "checkpoint.txt"), _out(cfg, "train_log.csv")
    save_checkpoint(ck, clf.network_.config, clf.params_, extra)
    write_log(clf.log_, lg)
    log.info("trained %d epochs (best %d)", len(clf.log_), clf.best_epoch_)
    return [ck, lg]


def cmd_eval(cfg) -> list[str]:
    graph, plan = _pruned(cfg)
    clf, _ = _restore(cfg, graph)
    tg, sets = _targets(cfg, graph, plan)
    logits = clf.decision_function()
    part = cfg["eval"]["part"]
    report = evalkit.evaluate(logits, tg, sets, part, ks=tuple(cfg["eval"]["ks"]))
    mc, mt = _out(cfg, "metrics.csv"), _out(cfg, "metrics.txt")
    report.to_csv(mc)
    lines = [report.table(f"HSGNN-{clf.variant}")]
    for level in ("visit", "patient"):
        nodes = sets.get((level, part))
        if nodes is None or nodes.size == 0:
            continue
        for k in cfg["eval"]["ks"]:
            rb = evalkit.random_baseline(tg.Y[nodes], k)
            sd = evalkit.random_baseline_std(tg.Y[nodes], k)
            lines.append(f"random {level} p@{k}: {rb:.6f} (std {sd:.6f})\n")
    with open(mt, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(lines))
    sys.stdout.write(lines[0])
    return [mc, mt]


def cmd_infer(cfg) -> list[str]:
    graph, _ = _pruned(cfg)
    clf, _ = _restore(cfg, graph)
    builder = SimilarityGraphBuilder(cfg["metapaths"], cfg["normalization"], cfg["features"]).fit(graph)
    for f in cfg["infer"]["batch"]:
        if not os.path.exists(f):
            raise DataError(f"batch file {f} not found")
    batch = TestBatch.from_edge_files(cfg["infer"]["batch"], graph)
    out = _out(cfg, "predictions.csv")
    label_keys = list(graph.keys("D"))
    if batch.size == 0:
        write_predictions(out, [], np.zeros((0, len(label_keys))), label_keys, cfg["infer"]["k"])
        return [out]
    res = quick_infer(clf, builder, graph, batch)
    write_predictions(out, res.keys, res.logits, label_keys, cfg["infer"]["k"])
    log.info("predictions for %d new nodes", len(res.keys))
    return [out]


def cmd_export_embeddings(cfg) -> list[str]:
    graph, _ = _pruned(cfg)
    clf, _ = _restore(cfg, graph)
    X = clf.embeddings(layer=cfg["embeddings"]["layer"])
    keys = [f"{graph.type_of(i)}:{k}" for i, k in enumerate(graph.all_keys)]
    out = _out(cfg, "embeddings.tsv")
    evalkit.export_embeddings(X, keys, out)
    return [out]


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic dataset and its manifest"),
    "preprocess": (cmd_preprocess, "split targets and write one similarity subgraph per meta-path"),
    "train": (cmd_train, "train and write checkpoint.txt and train_log.csv"),
    "eval": (cmd_eval, "precision@k of the checkpoint, written to metrics.csv/metrics.txt"),
    "infer": (cmd_infer, "quick inference for new nodes in infer.batch, written to predictions.csv"),
    "export-embeddings": (cmd_export_embeddings, "node vectors to embeddings.tsv"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (YAML or JSON; unknown keys are errors):\n" + "\n".join(_help_lines()) + \
        "\n\nexit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure"
    ap = argparse.ArgumentParser(prog="hsgnn", description="Heterogeneous similarity graph neural network pipeline.",
                                 epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, doc) in COMMANDS.items():
        p = sub.add_parser(name, help=doc, description=doc, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", "-c", required=True, help="run config file (YAML or JSON)")
        p.add_argument("--verbose", "-v", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        os.makedirs(cfg["output"], exist_ok=True)
        t0 = time.perf_counter()
        COMMANDS[args.command][0](cfg)
        log.info("%s done in %.2fs", args.command, time.perf_counter() - t0)
        return EXIT_OK
    except (ConfigError, GenConfigError, MetaPathError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, PathCountOverflow, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GraphError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

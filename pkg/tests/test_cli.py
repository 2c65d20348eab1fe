import csv
import json
import os
import time

import numpy as np
import pytest
import yaml

from hsgnn import cli, evalkit
from hsgnn.hetgraph import read_graph_dir, write_graph
from hsgnn.synthgen import read_labels

import oracles

SMALL_GEN = {"counts": {"C": 50, "V": 70, "D": 30, "P": 10, "M": 20, "L": 20, "B": 10, "S": 10},
             "means": {"D": 5, "P": 2, "M": 4, "L": 4, "B": 1, "S": 3}}


def run(tmp_path, cfg, *commands, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    codes = [cli.main([c, "--config", str(path)]) for c in commands]
    return codes if len(codes) > 1 else codes[0]


def small_cfg(out, **extra):
    cfg = {"output": str(out), "synthgen": dict(SMALL_GEN), "metapaths": ["V-D", "V-M", "V-C-V", "D-V-D"],
           "model": {"variant": "sum"}, "train": {"epochs": 20, "learning_rate": 0.05}}
    cfg.update(extra)
    return cfg


def test_generate_writes_dataset_and_stable_manifest(tmp_path):
    cfg = {"output": str(tmp_path / "a")}
    assert run(tmp_path, cfg, "generate") == 0
    d = tmp_path / "a" / "data"
    files = sorted(os.listdir(d))
    assert len([f for f in files if f.startswith("nodes_")]) == 8
    assert any(f.startswith("edges_") for f in files) and "labels.csv" in files
    m1 = json.loads((d / "manifest.json").read_text())
    assert run(tmp_path, cfg, "generate") == 0
    assert json.loads((d / "manifest.json").read_text()) == m1
    assert m1["seed"] == 7 and set(m1["files"]) >= {"labels.csv", "schema.json"}


def test_invalid_mean_names_field(tmp_path, capsys):
    code = run(tmp_path, {"output": str(tmp_path / "x"), "synthgen": {"means": {"D": -2}}}, "generate")
    assert code == cli.EXIT_CONFIG
    assert "means.D" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert run(tmp_path, {"output": str(tmp_path), "model": {"depth": 3}}, "train") == cli.EXIT_CONFIG
    assert "model.depth" in capsys.readouterr().err


def test_unknown_path_type_reports_position(tmp_path, capsys):
    write_graph(oracles.headache_graph(), str(tmp_path / "fig2"))
    cfg = {"output": str(tmp_path / "run"), "data": {"dir": str(tmp_path / "fig2")}, "metapaths": ["V-Q-V"],
           "split": {"enabled": False}}
    assert run(tmp_path, cfg, "preprocess") == cli.EXIT_CONFIG
    assert "position 2" in capsys.readouterr().err


def test_preprocess_fig2_half(tmp_path):
    g = oracles.headache_graph()
    write_graph(g, str(tmp_path / "fig2"))
    cfg = {"output": str(tmp_path / "run"), "data": {"dir": str(tmp_path / "fig2")}, "metapaths": ["V-D-V"],
           "split": {"enabled": False}}
    assert run(tmp_path, cfg, "preprocess") == 0
    lines = (tmp_path / "run" / "subgraphs" / "00_VDV.txt").read_text().splitlines()
    i, j = sorted((g.node_id("V", "v1"), g.node_id("V", "v2")))
    assert f"{i},{j},0.5" in lines


def test_raw_triplets_are_integers(tmp_path):
    cfg = small_cfg(tmp_path / "r", normalization="raw_pathcount")
    assert run(tmp_path, cfg, "generate", "preprocess") == [0, 0]
    for f in (tmp_path / "r" / "subgraphs").iterdir():
        lines = f.read_text().splitlines()
        assert "norm=raw_pathcount" in lines[0] and "scale=" in lines[0]
        assert all(v.split(",")[2].isdigit() for v in lines[1:])


def test_missing_inputs_are_data_errors(tmp_path):
    cfg = small_cfg(tmp_path / "m")
    assert run(tmp_path, cfg, "train") == cli.EXIT_DATA
    assert run(tmp_path, cfg, "generate", "train") == [0, cli.EXIT_DATA]


def test_small_pipeline(tmp_path):
    out = tmp_path / "p"
    cfg = small_cfg(out, embeddings={"layer": "output"})
    assert run(tmp_path, cfg, "generate", "preprocess", "train", "eval", "export-embeddings") == [0] * 5
    plan = evalkit.SplitPlan.from_json((out / "split.json").read_text())
    g = read_graph_dir(str(out / "data"))
    assert evalkit.leaked_edges(g.without_edges(plan.removed), plan) == []
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert {r["level"] for r in rows} == {"visit", "patient"}
    assert "random visit p@5" in (out / "metrics.txt").read_text()
    log = (out / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,loss,val_p@5,val_p@10,seconds" and 1 < len(log) <= 21
    emb = (out / "embeddings.tsv").read_text().splitlines()
    assert len(emb) == g.n_nodes and emb[0].startswith("C:")


def test_infer_empty_and_nonempty(tmp_path):
    out = tmp_path / "i"
    cfg = small_cfg(out)
    assert run(tmp_path, cfg, "generate", "preprocess", "train") == [0, 0, 0]
    cfg["infer"] = {"batch": [], "k": 5}
    assert run(tmp_path, cfg, "infer") == 0
    assert (out / "predictions.csv").read_text() == "node_key,rank,label,logit\n"
    g = read_graph_dir(str(out / "data"))
    b = tmp_path / "batch.csv"
    b.write_text("# V,D\nsrc_key,dst_key\nnewv,%s\nnewv,%s\n" % g.keys("D")[:2])
    cfg["infer"] = {"batch": [str(b)], "k": 5}
    assert run(tmp_path, cfg, "infer") == 0
    lines = (out / "predictions.csv").read_text().splitlines()
    assert len(lines) == 6 and lines[1].startswith("newv,1,")
    b.write_text("# V,D\nsrc_key,dst_key\nnewv,notacode\n")
    assert run(tmp_path, cfg, "infer") == cli.EXIT_DATA


def test_untrained_checkpoint_near_random(tmp_path):
    out = tmp_path / "u"
    cfg = {"output": str(out), "model": {"variant": "sum"}, "train": {"epochs": 0, "bias_init": "zero"},
           "eval": {"ks": [5]}}
    assert run(tmp_path, cfg, "generate", "preprocess", "train", "eval") == [0] * 4
    g = read_graph_dir(str(out / "data"))
    plan = evalkit.SplitPlan.from_json((out / "split.json").read_text())
    tg = evalkit.build_targets(g, read_labels(str(out / "data" / "labels.csv")))
    nodes = evalkit.node_sets(g, plan)[("visit", "test")]
    base = evalkit.random_baseline(tg.Y[nodes], 5)
    sd = evalkit.random_baseline_std(tg.Y[nodes], 5)
    got = [float(r["mean"]) for r in csv.DictReader(open(out / "metrics.csv")) if r["level"] == "visit"][0]
    assert abs(got - base) <= 3 * sd, (got, base, sd)


def test_default_end_to_end_under_five_minutes(tmp_path):
    out = tmp_path / "e2e"
    cfg = {"output": str(out), "model": {"variant": "sum"},
           "train": {"epochs": 300, "learning_rate": 0.05, "patience": 50}}
    t0 = time.perf_counter()
    assert run(tmp_path, cfg, "generate", "preprocess", "train", "eval") == [0] * 4
    assert time.perf_counter() - t0 < 300
    rows = {(r["level"], r["k"]): float(r["mean"]) for r in csv.DictReader(open(out / "metrics.csv"))}
    assert rows[("visit", "10")] > 0.4


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    def leaves(schema, prefix=""):
        for k, v in schema.items():
            if isinstance(v, dict):
                yield from leaves(v, prefix + k + ".")
            else:
                yield prefix + k
    for key in leaves(cli.SCHEMA):
        assert key in text

import json

import pytest

from kgquery.checkpoint import load_checkpoint
from kgquery.cli import main
from kgquery.datasets import read_dataset
from kgquery.graph import graph_paths, load_graph
from kgquery.queries import EXTRA_TYPES, CORE_TYPES, TRAIN_TYPES


@pytest.fixture
def workdir(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(
        f"""
[run]
graph = {tmp_path}/g/graph
data_dir = {tmp_path}/data
out_dir = {tmp_path}/out

[synth]
entities = 40
relations = 4
triples = 240
types = 4

[data]
train_per_type = 12
valid_per_type = 3
test_per_type = 4

[model]
dim = 16
blocks = 1
heads = 2

[train]
epochs = 2
batch_size = 8
temperature = 2.0
"""
    )
    return tmp_path, ["--config", str(config)]


def run(*args):
    return main([str(a) for a in args])


def test_synth_kg_counts_and_determinism(tmp_path):
    prefix = tmp_path / "kg"
    assert run("synth-kg", "--set", f"run.graph={prefix}") == 0
    kg = load_graph(*graph_paths(prefix))
    assert (kg.entity_count(), kg.relation_count(), kg.num_triples) == (200, 8, 1500)
    first = [p.read_bytes() for p in graph_paths(prefix)]
    assert run("synth-kg", "--set", f"run.graph={prefix}") == 0
    assert [p.read_bytes() for p in graph_paths(prefix)] == first


def test_pigeonhole_is_config_error(tmp_path, capsys):
    code = run("synth-kg", "--set", f"run.graph={tmp_path}/kg", "--set", "synth.entities=3", "--set", "synth.relations=1",
               "--set", "synth.triples=10", "--set", "synth.types=1")
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_usage_and_config_errors(tmp_path):
    assert run("bogus") == 1
    assert run("synth-kg", "--set", "nosuch.key=1") == 1
    assert run("synth-kg", "--set", "synth.entities=many") == 1
    assert run("synth-kg", "--config", tmp_path / "missing.ini") == 1
    assert run("train", "--set", f"run.data_dir={tmp_path}/none") == 1


def test_data_error_exit_code(tmp_path):
    bad = tmp_path / "bad"
    for p, text in zip(graph_paths(bad), ["a\tr\tzz\n", "a\n", "r\n"]):
        p.write_text(text)
    assert run("gen", "--set", f"run.graph={bad}", "--set", f"run.data_dir={tmp_path}/d") == 2


def test_gen_protocol(workdir):
    root, cfg = workdir
    assert run("synth-kg", *cfg) == 0
    assert run("gen", *cfg) == 0
    train = read_dataset(root / "data/train.jsonl")
    test = read_dataset(root / "data/test.jsonl")
    assert {r.qtype for r in train} == set(TRAIN_TYPES)
    assert {r.qtype for r in test} == set(CORE_TYPES)
    assert run("gen", *cfg, "--extra-structures") == 0
    assert {r.qtype for r in read_dataset(root / "data/test.jsonl")} == set(CORE_TYPES) | set(EXTRA_TYPES)
    assert {r.qtype for r in read_dataset(root / "data/valid.jsonl")} == set(CORE_TYPES)
    assert {r.qtype for r in read_dataset(root / "data/train.jsonl")} == set(TRAIN_TYPES)


def test_gen_deterministic(workdir):
    root, cfg = workdir
    run("synth-kg", *cfg)
    run("gen", *cfg)
    before = {p.name: p.read_bytes() for p in (root / "data").iterdir()}
    run("gen", *cfg)
    assert {p.name: p.read_bytes() for p in (root / "data").iterdir()} == before


def test_inductive_gen_disjoint(workdir):
    root, cfg = workdir
    run("synth-kg", *cfg)
    assert run("gen", *cfg, "--set", "split.mode=inductive") == 0
    names = lambda recs: {n for r in recs for n in r.anchors + r.answers_full}
    train = read_dataset(root / "data/train.jsonl")
    test = read_dataset(root / "data/test.jsonl")
    assert train and test and not names(train) & names(test)


def test_linearize(workdir, capsys):
    root, cfg = workdir
    run("synth-kg", *cfg)
    run("gen", *cfg)
    capsys.readouterr()
    assert run("linearize", *cfg, root / "data/train.jsonl", "--limit", 3, "--ids") == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all(len(l.split("\t")) == 4 for l in lines)
    assert lines[0].split("\t")[1] == "One step: [proj]"


def test_oracle_command(workdir, capsys):
    root, cfg = workdir
    run("synth-kg", *cfg)
    run("gen", *cfg)
    assert run("oracle", *cfg, "--dataset", root / "data/test.jsonl") == 0
    assert "0 mismatches" in capsys.readouterr().out
    assert run("oracle", *cfg) == 1


def test_train_eval_cycle(workdir, capsys):
    root, cfg = workdir
    run("synth-kg", *cfg)
    run("gen", *cfg)
    assert run("train", *cfg) == 0
    log_lines = (root / "out/train.log").read_text().splitlines()
    assert len(log_lines) == 2 and log_lines[0].startswith("epoch=1 L=")
    assert (root / "out/config.ini").exists() and not (root / "out/.lock").exists()

    _, _, header = load_checkpoint(root / "out/model.ckpt")
    capsys.readouterr()
    assert run("eval", *cfg, "--split", "valid") == 0
    valid = json.loads((root / "out/valid-report.json").read_text())
    assert valid["avg"]["hits@10"] == header["extra"]["valid_hits@10"]
    capsys.readouterr()

    assert run("eval", *cfg) == 0
    table = capsys.readouterr().out.strip().splitlines()
    rows = [l.split()[0] for l in table[1:]]
    assert rows == [t.value for t in CORE_TYPES] + ["Avg"]
    first = (root / "out/test-report.json").read_bytes()
    assert run("eval", *cfg) == 0
    assert (root / "out/test-report.json").read_bytes() == first

    assert run("eval", *cfg, "--oracle") == 0
    oracle = json.loads((root / "out/test-oracle-report.json").read_text())
    assert all(v == 1.0 for row in oracle["per_type"].values() for k, v in row.items() if k != "count")


def test_vocab_mismatch_is_data_error(workdir):
    root, cfg = workdir
    run("synth-kg", *cfg)
    run("gen", *cfg)
    assert run("train", *cfg, "--set", "train.epochs=1") == 0
    run("synth-kg", *cfg, "--seed", 9)
    run("gen", *cfg, "--seed", 9)
    assert run("eval", *cfg) == 2


def test_lambda_outside_transductive(workdir):
    root, cfg = workdir
    run("synth-kg", *cfg)
    run("gen", *cfg, "--set", "split.mode=inductive")
    assert run("train", *cfg, "--set", "train.mode=inductive", "--set", "train.lam=0.3") == 1
    assert run("train", *cfg, "--set", "train.mode=inductive", "--set", "train.lam=0", "--set", "train.epochs=1") == 0
    assert run("eval", *cfg) == 0


def test_lock_file(workdir):
    root, cfg = workdir
    run("synth-kg", *cfg)
    (root / "data").mkdir()
    (root / "data/.lock").write_text("123")
    assert run("gen", *cfg) == 1

"""``kgquery`` command line: synth-kg, gen, linearize, train, eval, oracle.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from kgquery.checkpoint import load_checkpoint, save_checkpoint
from kgquery.config import RunConfig, load_config
from kgquery.datasets import (
    QueryRecord,
    generate_dataset,
    make_inductive_split,
    make_transductive_split,
    read_dataset,
    sample_fewshot,
    synthesize_kg,
    write_dataset,
)
from kgquery.errors import ConfigError, DataError, KGQueryError, NumericError
from kgquery.graph import KnowledgeGraph, graph_paths, load_graph, write_graph
from kgquery.model import ModelConfig, QueryAnswerModel
from kgquery.queries import EXTRA_TYPES, CORE_TYPES, TRAIN_TYPES, QueryType, evaluate
from kgquery.rng import child_seed, substream
from kgquery.text import NamedQuery, Vocabulary, encode_named, linearize_named, parse, structural_prompt
from kgquery.training import (
    CandidateUniverse,
    EvalReport,
    Featurizer,
    evaluate_model,
    oracle_rankings,
    report_from_rankings,
    train,
)

log = logging.getLogger("kgquery")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


@contextlib.contextmanager
def output_lock(directory):
    """Refuse concurrent commands against one output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{directory} is locked by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def _load(prefix) -> KnowledgeGraph:
    paths = graph_paths(prefix)
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"graph files not found: {', '.join(missing)}")
    return load_graph(*paths)


def _write(kg, prefix):
    write_graph(kg, *graph_paths(prefix))


def _torch_seed(config: RunConfig, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(child_seed(substream(config.run.seed, name)))


# -- synth-kg -------------------------------------------------------------------


def cmd_synth_kg(config: RunConfig) -> KnowledgeGraph:
    s = config.synth
    kg = synthesize_kg(s.entities, s.relations, s.triples, config.run.seed, n_types=s.types, noise=s.noise)
    Path(config.run.graph).parent.mkdir(parents=True, exist_ok=True)
    _write(kg, config.run.graph)
    print(f"wrote {kg.entity_count()} entities, {kg.relation_count()} relations, {kg.num_triples} triples to {config.run.graph}.*")
    return kg


# -- gen ------------------------------------------------------------------------


def _eval_types(config: RunConfig):
    return list(CORE_TYPES) + (list(EXTRA_TYPES) if config.data.extra_structures else [])


def cmd_gen(config: RunConfig) -> dict:
    """Write split graphs, train/valid/test records and ``meta.json`` into the data directory."""
    seed, d, mode = config.run.seed, config.data, config.split.mode
    out = Path(config.run.data_dir)
    with output_lock(out):
        kg = _load(config.run.graph)
        if mode == "transductive":
            kg_train, kg_valid, kg_full = make_transductive_split(kg, config.split, seed)
            graphs = {"train": kg_train, "valid": kg_valid, "test": kg_full}
            train = generate_dataset(kg_train, kg_train, TRAIN_TYPES, d.train_per_type, seed, "train")
            valid = generate_dataset(kg_train, kg_valid, CORE_TYPES, d.valid_per_type, seed, "valid")
            test = generate_dataset(kg_train, kg_full, _eval_types(config), d.test_per_type, seed, "test")
            universes = {"valid": "train", "test": "train"}
        elif mode == "inductive":
            kg_train, kg_test = make_inductive_split(kg, config.split, seed)
            graphs = {"train": kg_train, "test": kg_test}
            train = generate_dataset(kg_train, kg_train, TRAIN_TYPES, d.train_per_type, seed, "train")
            valid = generate_dataset(kg_train, kg_train, CORE_TYPES, d.valid_per_type, seed, "valid")
            test = generate_dataset(kg_test, kg_test, _eval_types(config), d.test_per_type, seed, "test")
            universes = {"valid": "train", "test": "test"}
        else:  # cross-kg-fewshot: source graph trains elsewhere; continue on target samples
            if not config.run.target_graph:
                raise ConfigError("cross-kg-fewshot mode needs run.target_graph")
            kg_target = _load(config.run.target_graph)
            graphs = {"train": kg, "test": kg_target}
            train = sample_fewshot(kg_target, TRAIN_TYPES, config.split.fewshot_count, seed)
            valid = generate_dataset(kg_target, kg_target, CORE_TYPES, d.valid_per_type, seed, "valid")
            test = generate_dataset(kg_target, kg_target, _eval_types(config), d.test_per_type, seed, "test")
            universes = {"valid": "test", "test": "test"}
        for name, g in graphs.items():
            _write(g, out / f"{name}-graph")
        for name, records in (("train", train), ("valid", valid), ("test", test)):
            write_dataset(records, out / f"{name}.jsonl")
        meta = {"mode": mode, "seed": seed, "graphs": sorted(graphs), "universe": universes}
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(train)} train, {len(valid)} valid, {len(test)} test records to {out}")
    return meta


def _meta(config: RunConfig) -> dict:
    path = Path(config.run.data_dir) / "meta.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `gen` first")
    return json.loads(path.read_text())


def _records(config: RunConfig, split: str) -> list[QueryRecord]:
    path = Path(config.run.data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `gen` first")
    return read_dataset(path)


def _graph(config: RunConfig, name: str) -> KnowledgeGraph:
    return _load(Path(config.run.data_dir) / f"{name}-graph")


def training_vocabulary(config: RunConfig) -> Vocabulary:
    """Vocabulary over the training graph's entity and relation names."""
    kg = _graph(config, "train")
    return Vocabulary.build(kg.entities, kg.relations)


# -- linearize ------------------------------------------------------------------


def cmd_linearize(config: RunConfig, dataset: str, limit: Optional[int], show_ids: bool) -> list[str]:
    records = read_dataset(dataset)[:limit]
    vocab = training_vocabulary(config) if show_ids else None
    lines = []
    for rec in records:
        named = NamedQuery.from_record_fields(rec.qtype, rec.anchors, rec.relations)
        line = f"{rec.qid}\t{structural_prompt(rec.qtype)}\t{linearize_named(named)}"
        if vocab is not None:
            line += "\t" + " ".join(map(str, encode_named(named, vocab, config.model.max_length).token_ids))
        lines.append(line)
        print(line)
    return lines


# -- train ----------------------------------------------------------------------


def _check_train_config(config: RunConfig) -> None:
    t = config.train
    if t.lam > 0 and t.mode != "transductive":
        raise ConfigError(f"train.lam={t.lam} needs transductive mode (the classification head only exists there)")
    if not t.matching and t.mode != "transductive":
        raise ConfigError("train.matching=false needs transductive mode")


def _universe(config: RunConfig, meta: dict, split: str) -> CandidateUniverse:
    return CandidateUniverse(_graph(config, meta["universe"][split]).entities)


def _build_model(config: RunConfig, vocab_size: int, num_entities: Optional[int]) -> QueryAnswerModel:
    m = config.model
    mc = ModelConfig(
        vocab_size=vocab_size,
        dim=m.dim,
        blocks=m.blocks,
        heads=m.heads,
        max_length=m.max_length,
        maxout_pieces=m.maxout_pieces,
        num_entities=num_entities,
        init_std=m.init_std,
        union_init=m.union_init,
    )
    return QueryAnswerModel(mc, _torch_seed(config, "model-init"))


def _prepare_model(config: RunConfig, train_graph: KnowledgeGraph):
    transductive = config.train.mode == "transductive"
    vocab = Vocabulary.build(train_graph.entities, train_graph.relations)
    if not config.eval.init_checkpoint:
        return _build_model(config, len(vocab), train_graph.entity_count() if transductive else None), vocab
    model, vocab, _ = load_checkpoint(config.eval.init_checkpoint)
    if config.eval.vocab_mode == "extend":
        vocab, _ = vocab.extend(train_graph.entities, train_graph.relations)
        model.extend_vocabulary(len(vocab), vocab.num_fixed)
    return model, vocab


def cmd_train(config: RunConfig) -> dict:
    """Train, keep the epoch with the best validation Hits@10, write the checkpoint and ``train.log``."""
    _check_train_config(config)
    meta = _meta(config)
    records = _records(config, "train")
    valid = _records(config, "valid")
    train_graph = _graph(config, "train")
    out = Path(config.run.out_dir)
    with output_lock(out):
        model, vocab = _prepare_model(config, train_graph)
        tc = config.train
        featurizer = Featurizer(vocab, config.model.max_length)
        entity_index = {n: i for i, n in enumerate(train_graph.entities)} if model.has_classifier else None
        universe = _universe(config, meta, "valid")
        use_matching = tc.mode != "transductive"

        def validate(m):
            return evaluate_model(m, valid, universe, tc, featurizer, use_matching=use_matching).average["hits@10"]

        log_path = out / "train.log"
        with open(log_path, "w", encoding="utf-8") as fh:

            def on_epoch(entry):
                fh.write(entry.line() + "\n")
                fh.flush()
                print(entry.line(), flush=True)

            logs, best_state = train(model, records, tc, featurizer, entity_index, validate if valid else None, on_epoch)
        model.load_state_dict(best_state)
        best = max((e.valid_metric for e in logs if e.valid_metric is not None), default=None)
        save_checkpoint(
            config.checkpoint_path,
            model,
            vocab,
            tc.mode,
            extra={"seed": config.run.seed, "valid_hits@10": best, "train": config.train.__dict__},
        )
        (out / "config.ini").write_text(config.to_ini())
    return {"epochs": len(logs), "best_valid_hits@10": best}


# -- eval -----------------------------------------------------------------------


def _emit_report(config: RunConfig, report: EvalReport, stem: str) -> None:
    out = Path(config.run.out_dir)
    (out / f"{stem}.txt").write_text(report.table() + "\n")
    (out / f"{stem}.json").write_text(report.to_json() + "\n")
    print(report.table())


def cmd_eval(config: RunConfig, oracle: bool = False, split: str = "test") -> EvalReport:
    meta = _meta(config)
    records = _records(config, split)
    universe = _universe(config, meta, split)
    qtypes = list(dict.fromkeys(r.qtype for r in records))
    qtypes = [t for t in list(CORE_TYPES) + list(EXTRA_TYPES) if t in qtypes]
    out = Path(config.run.out_dir)
    with output_lock(out):
        if oracle:
            report = report_from_rankings(records, oracle_rankings(records, universe), config.train, qtypes)
            _emit_report(config, report, f"{split}-oracle-report")
            return report
        if not config.checkpoint_path.exists():
            raise ConfigError(f"checkpoint {config.checkpoint_path} not found; run `train` first")
        expected = None if config.eval.init_checkpoint else training_vocabulary(config).hash()
        model, vocab, header = load_checkpoint(config.checkpoint_path, expected_vocab_hash=expected)
        if config.eval.vocab_mode == "extend":
            names = [n for r in records for n in r.anchors + r.relations] + list(universe.names)
            vocab, new = vocab.extend(names)
            if new:
                model.extend_vocabulary(len(vocab), vocab.num_fixed)
        featurizer = Featurizer(vocab, config.model.max_length)
        use_matching = header["mode"] != "transductive" or not model.has_classifier
        report = evaluate_model(model, records, universe, config.train, featurizer, qtypes, use_matching)
        _emit_report(config, report, f"{split}-report")
    return report


# -- oracle ---------------------------------------------------------------------


def cmd_oracle(config: RunConfig, qtype: Optional[str], structure: Optional[str], dataset: Optional[str]) -> int:
    """Print the symbolic answers of one query, or verify every record of a dataset; returns mismatches."""
    kg = _load(config.run.graph)
    if dataset:
        mismatches = 0
        for rec in read_dataset(dataset):
            got = tuple(kg.entities[i] for i in evaluate(kg, rec.to_query(kg)))
            if set(got) != set(rec.answers_full):
                mismatches += 1
                print(f"{rec.qid}: expected {sorted(rec.answers_full)} got {sorted(got)}")
        print(f"checked records against {config.run.graph}: {mismatches} mismatches")
        return mismatches
    if not (qtype and structure):
        raise ConfigError("oracle needs --qtype and --query, or --dataset")
    named = parse(structure, QueryType.parse(qtype))
    rec = QueryRecord("cli", named.qtype, named.anchors, named.record_relations(), (), ())
    answers = [kg.entities[i] for i in evaluate(kg, rec.to_query(kg))]
    for name in answers:
        print(name)
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")

    parser = _Parser(prog="kgquery", description="Logical query answering over knowledge graphs with a text encoder.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth-kg", parents=[common], help="write a synthetic knowledge graph")
    gen = sub.add_parser("gen", parents=[common], help="split the graph and generate query datasets")
    gen.add_argument("--extra-structures", action="store_true", help="add 4p, 5p, 3ip, i2p to the test set")
    lin = sub.add_parser("linearize", parents=[common], help="print prompts and linearized structures of a dataset")
    lin.add_argument("dataset")
    lin.add_argument("--limit", type=int)
    lin.add_argument("--ids", action="store_true", help="also print token ids (needs the training graph)")
    sub.add_parser("train", parents=[common], help="train and checkpoint the model")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint (or the symbolic oracle)")
    ev.add_argument("--oracle", action="store_true", help="rank by symbolic answer membership")
    ev.add_argument("--split", default="test", choices=("valid", "test"))
    orc = sub.add_parser("oracle", parents=[common], help="answer a query symbolically")
    orc.add_argument("--qtype")
    orc.add_argument("--query", help="linearized structure text")
    orc.add_argument("--dataset", help="verify every record's answers instead")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "extra_structures", False):
        overrides.append("data.extra_structures=true")
    config = load_config(args.config, overrides)
    if args.command == "synth-kg":
        cmd_synth_kg(config)
    elif args.command == "gen":
        cmd_gen(config)
    elif args.command == "linearize":
        cmd_linearize(config, args.dataset, args.limit, args.ids)
    elif args.command == "train":
        cmd_train(config)
    elif args.command == "eval":
        cmd_eval(config, oracle=args.oracle, split=args.split)
    elif args.command == "oracle":
        if cmd_oracle(config, args.qtype, args.query, args.dataset):
            return EXIT_DATA
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KGQueryError as exc:  # pragma: no cover - every family handled above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

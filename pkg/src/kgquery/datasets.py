"""Graph splits, query dataset generation, and the synthetic KG generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from kgquery.errors import ConfigError, ParseError, SamplingExhausted, SplitError, StructureError, UnknownNameError
from kgquery.graph import KnowledgeGraph
from kgquery.queries import TRAIN_TYPES, QueryGraph, QueryType, evaluate, random_query
from kgquery.rng import substream

SPLIT_MODES = ("transductive", "inductive", "cross-kg-fewshot")


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "transductive"
    edge_holdout: float = 0.2
    entity_partition: float = 0.5
    fewshot_count: int = 500

    def __post_init__(self):
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"split mode must be one of {SPLIT_MODES}, got {self.mode!r}")
        for name in ("edge_holdout", "entity_partition"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie strictly between 0 and 1, got {value}")
        if self.fewshot_count < 1:
            raise ConfigError("fewshot_count must be positive")


@dataclass(frozen=True)
class QueryRecord:
    qid: str
    qtype: QueryType
    anchors: tuple[str, ...]
    relations: tuple[str, ...]
    answers_observed: tuple[str, ...]
    answers_full: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "qid": self.qid,
                "qtype": self.qtype.value,
                "anchors": list(self.anchors),
                "relations": list(self.relations),
                "answers_observed": list(self.answers_observed),
                "answers_full": list(self.answers_full),
            },
            ensure_ascii=False,
        )

    def to_query(self, kg: KnowledgeGraph) -> QueryGraph:
        return QueryGraph(
            self.qtype,
            [kg.entity_id(a) for a in self.anchors],
            [kg.relation_id(r) for r in self.relations],
        )


_RECORD_KEYS = ("qid", "qtype", "anchors", "relations", "answers_observed", "answers_full")


def _record_from_obj(obj, lineno):
    if not isinstance(obj, dict):
        raise ParseError("record is not an object", lineno)
    missing = [k for k in _RECORD_KEYS if k not in obj]
    if missing:
        raise ParseError(f"record lacks keys {missing}", lineno)
    try:
        qtype = QueryType.parse(obj["qtype"])
    except StructureError as exc:
        raise ParseError(str(exc), lineno) from None
    for key in _RECORD_KEYS[2:]:
        if not isinstance(obj[key], list) or not all(isinstance(x, str) for x in obj[key]):
            raise ParseError(f"{key} must be a list of names", lineno)
    return QueryRecord(
        str(obj["qid"]),
        qtype,
        tuple(obj["anchors"]),
        tuple(obj["relations"]),
        tuple(obj["answers_observed"]),
        tuple(obj["answers_full"]),
    )


def write_dataset(records: Iterable[QueryRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_dataset(path) -> list[QueryRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            records.append(_record_from_obj(obj, lineno))
    return records


# -- splits -----------------------------------------------------------------


def make_transductive_split(kg_full: KnowledgeGraph, spec: SplitSpec, seed) -> tuple[KnowledgeGraph, KnowledgeGraph, KnowledgeGraph]:
    """Hold out a fraction of edges: ``train ⊂ valid ⊂ test = full``.

    Half the held-out edges (rounded down) are added back for validation.
    Edges whose removal would leave an entity without any training edge are
    skipped; if too few removable edges remain the split fails.
    """
    if spec.mode != "transductive":
        raise ConfigError(f"transductive split requested with mode {spec.mode!r}")
    rng = substream(seed, "transductive-split")
    triples = list(kg_full.triples)
    n_hold = int(round(spec.edge_holdout * len(triples)))
    degree = np.zeros(kg_full.entity_count(), dtype=np.int64)
    for h, _, t in triples:
        degree[h] += 1
        degree[t] += 1

    held = []
    for idx in rng.permutation(len(triples)):
        if len(held) == n_hold:
            break
        h, _, t = triples[idx]
        # a self-loop contributes 2 to its entity's degree
        ok = degree[h] > 2 if h == t else degree[h] > 1 and degree[t] > 1
        if ok:
            degree[h] -= 1
            degree[t] -= 1
            held.append(triples[idx])
    if len(held) < n_hold:
        raise SplitError(
            f"only {len(held)} of {n_hold} edges can be held out without isolating an entity"
        )
    n_valid = n_hold // 2
    valid_extra = held[:n_valid]
    held_set = set(held)
    train = [t for t in triples if t not in held_set]
    kg_train = kg_full.with_triples(train)
    kg_valid = kg_full.with_triples(train + valid_extra)
    return kg_train, kg_valid, kg_full


def _subgraph(kg, keep):
    keep = sorted(keep)
    remap = {old: new for new, old in enumerate(keep)}
    triples = [(remap[h], r, remap[t]) for h, r, t in kg.triples if h in remap and t in remap]
    return KnowledgeGraph([kg.entities[i] for i in keep], kg.relations, triples)


def make_inductive_split(kg_full: KnowledgeGraph, spec: SplitSpec, seed) -> tuple[KnowledgeGraph, KnowledgeGraph]:
    """Partition entities; each side keeps only the triples inside it. Relations are shared."""
    if spec.mode != "inductive":
        raise ConfigError(f"inductive split requested with mode {spec.mode!r}")
    rng = substream(seed, "inductive-split")
    perm = rng.permutation(kg_full.entity_count())
    n_train = int(round(spec.entity_partition * kg_full.entity_count()))
    kg_train = _subgraph(kg_full, perm[:n_train].tolist())
    kg_test = _subgraph(kg_full, perm[n_train:].tolist())
    for side, g in (("training", kg_train), ("test", kg_test)):
        if g.num_triples == 0:
            raise SplitError(f"{side} side of the entity partition has no triples")
    return kg_train, kg_test


# -- query generation ---------------------------------------------------------


def _answers_on(kg: KnowledgeGraph, record_query: tuple, source: KnowledgeGraph) -> tuple[str, ...]:
    qtype, anchors, relations = record_query
    if kg is source or (kg.entities == source.entities and kg.relations == source.relations):
        query = QueryGraph(qtype, anchors, relations)
        return tuple(kg.entities[i] for i in evaluate(kg, query))
    try:
        query = QueryGraph(
            qtype,
            [kg.entity_id(source.entities[a]) for a in anchors],
            [kg.relation_id(source.relations[r]) for r in relations],
        )
    except UnknownNameError:
        return ()
    return tuple(kg.entities[i] for i in evaluate(kg, query))


def generate_dataset(
    kg_observed: KnowledgeGraph,
    kg_answer: KnowledgeGraph,
    qtypes: Sequence,
    per_type_count: int,
    seed,
    split: str = "test",
) -> list[QueryRecord]:
    """Sample ``per_type_count`` queries per type on ``kg_answer``.

    ``answers_full`` is evaluated on ``kg_answer`` and ``answers_observed`` on
    ``kg_observed``. With ``split="train"`` only the five training types are
    accepted.
    """
    qtypes = [QueryType.parse(t) for t in qtypes]
    if split == "train":
        bad = [t.value for t in qtypes if t not in TRAIN_TYPES]
        if bad:
            raise ConfigError(f"training records are restricted to {[t.value for t in TRAIN_TYPES]}, got {bad}")
    records = []
    for qtype in qtypes:
        rng = substream(seed, split, qtype.value)
        for i in range(per_type_count):
            try:
                q = random_query(kg_answer, qtype, rng)
            except SamplingExhausted as exc:
                raise SamplingExhausted(f"{split} split, query type {qtype}: {exc}") from None
            full = evaluate(kg_answer, q)
            observed = _answers_on(kg_observed, (qtype, q.anchors, q.relations), kg_answer)
            records.append(
                QueryRecord(
                    qid=f"{split}-{qtype.value}-{i:05d}",
                    qtype=qtype,
                    anchors=tuple(kg_answer.entities[a] for a in q.anchors),
                    relations=tuple(kg_answer.relations[r] for r in q.relations),
                    answers_observed=observed,
                    answers_full=tuple(kg_answer.entities[e] for e in full),
                )
            )
    return records


def sample_fewshot(kg_target: KnowledgeGraph, qtypes: Sequence, count: int, seed) -> list[QueryRecord]:
    """``count`` records from the target graph, spread evenly over ``qtypes``, for continued training."""
    qtypes = [QueryType.parse(t) for t in qtypes]
    base, extra = divmod(count, len(qtypes))
    out = []
    for i, qtype in enumerate(qtypes):
        n = base + (1 if i < extra else 0)
        if n:
            out.extend(generate_dataset(kg_target, kg_target, [qtype], n, seed, split="fewshot"))
    return out


# -- synthetic graphs ---------------------------------------------------------

TYPE_WORDS = (
    "city", "person", "film", "team", "river", "company", "album", "disease", "language", "award",
    "country", "school", "book", "instrument", "genre", "ship", "planet", "food", "sport", "tool",
)
FAMILY_WORDS = (
    "amber", "birch", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "ivory", "jade",
    "kestrel", "lumen", "maple", "nectar", "onyx", "pebble", "quartz", "russet", "saffron", "tundra",
    "umber", "velvet", "willow", "xenon", "yarrow", "zephyr", "alder", "basalt", "cedar", "delta",
)


def _words(pool, n, prefix):
    return pool[:n] if n <= len(pool) else tuple(f"{prefix}{i}" for i in range(n))


def synthesize_kg(
    n_entities: int,
    n_relations: int,
    n_triples: int,
    seed,
    n_types: int = 10,
    noise: float = 0.2,
) -> KnowledgeGraph:
    """Random graph whose edges follow word-level rules of the entity names.

    Every entity is a distinct (family, type) pair named ``"<family> <type>"``.
    Each relation permutes types and, independently, families; the entity
    obtained by applying both permutations is the *canonical* tail. A
    ``1 - noise`` share of the triples is drawn from canonical edges and the
    rest uniformly among tails of the right type, so types stay consistent
    while held-out edges remain only partly predictable.
    """
    if min(n_entities, n_relations) < 1 or n_triples < 0:
        raise ConfigError("need at least one entity and one relation, and a non-negative triple count")
    if not 1 <= n_types <= n_entities:
        raise ConfigError(f"n_types must lie in [1, {n_entities}]")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("noise must lie in [0, 1]")
    if n_triples > n_entities * n_entities * n_relations:
        raise ConfigError(f"{n_triples} triples exceed |E|^2*|R| = {n_entities * n_entities * n_relations}")
    rng = substream(seed, "synthetic-kg")
    n_fam = -(-n_entities // n_types)
    cells = rng.permutation(n_types * n_fam)[:n_entities]
    etype, efam = cells % n_types, cells // n_types
    lookup = {(int(k), int(f)): i for i, (k, f) in enumerate(zip(etype, efam))}
    members = [np.flatnonzero(etype == k) for k in range(n_types)]
    tail_type = np.stack([rng.permutation(n_types) for _ in range(n_relations)])
    tail_fam = np.stack([rng.permutation(n_fam) for _ in range(n_relations)])

    capacity = sum(len(members[tail_type[r, etype[h]]]) for r in range(n_relations) for h in range(n_entities))
    if n_triples > capacity:
        raise ConfigError(f"{n_triples} triples exceed the {capacity} allowed by the type map")

    types, fams = _words(TYPE_WORDS, n_types, "kind"), _words(FAMILY_WORDS, n_fam, "fam")
    entities = [f"{fams[efam[i]]} {types[etype[i]]}" for i in range(n_entities)]
    relations = [f"rel{r:0{len(str(n_relations - 1))}d}" for r in range(n_relations)]

    canonical = []
    for h in range(n_entities):
        for r in range(n_relations):
            t = lookup.get((int(tail_type[r, etype[h]]), int(tail_fam[r, efam[h]])))
            if t is not None:
                canonical.append((h, r, t))
    n_canon = min(len(canonical), int(round((1.0 - noise) * n_triples)))
    pick = rng.choice(len(canonical), size=n_canon, replace=False)
    chosen = {canonical[i] for i in sorted(pick)}

    remaining = n_triples - len(chosen)
    if remaining > (capacity - len(chosen)) // 2:
        allowed = [
            (h, r, int(t))
            for h in range(n_entities)
            for r in range(n_relations)
            for t in members[tail_type[r, etype[h]]]
            if (h, r, int(t)) not in chosen
        ]
        chosen.update(allowed[i] for i in rng.choice(len(allowed), size=remaining, replace=False))
    else:
        while len(chosen) < n_triples:
            h = int(rng.integers(n_entities))
            r = int(rng.integers(n_relations))
            pool = members[tail_type[r, etype[h]]]
            chosen.add((h, r, int(pool[rng.integers(len(pool))])))
    return KnowledgeGraph(entities, relations, chosen)

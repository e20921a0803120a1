"""The thirteen EPFO query structures, their exact set semantics, and sampling.

Every structure is a fixed DAG over anchors, relation projections,
intersections and unions. The DAG (a *plan*) is looked up from the query
type, so a :class:`QueryGraph` only carries the type, the anchor ids and the
relation ids in formula reading order.

``ip`` and ``up`` also have a *distributed* form in which the final
projection is repeated on every branch, moving the intersection/union to the
last step::

    up:  (r1(e1,v) or r2(e2,v)) and r3(v,?)  ==  (r1(e1,v) and r3(v,?)) or (r2(e2,v) and r3(v,?))

Its relation list is ``(r1, r3, r2, r3)``. In the distributed ``ip`` the two
branches keep sharing the bound variable ``v``; only then is the rewrite an
equivalence (with a fresh variable per branch it over-approximates).
"""

from __future__ import annotations

import enum
import weakref
from dataclasses import dataclass
from typing import Union

import numpy as np

from kgquery.errors import SamplingExhausted, StructureError
from kgquery.graph import KnowledgeGraph
from kgquery.rng import as_generator


class QueryType(str, enum.Enum):
    P1 = "1p"
    P2 = "2p"
    P3 = "3p"
    I2 = "2i"
    I3 = "3i"
    PI = "pi"
    IP = "ip"
    U2 = "2u"
    UP = "up"
    P4 = "4p"
    P5 = "5p"
    IP3 = "3ip"
    I2P = "i2p"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, tag) -> "QueryType":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(tag)
        except ValueError:
            raise StructureError(f"unknown query type {tag!r}") from None


ALL_TYPES = tuple(QueryType)
CORE_TYPES = ALL_TYPES[:9]
TRAIN_TYPES = ALL_TYPES[:5]
UNSEEN_TYPES = (QueryType.PI, QueryType.IP, QueryType.U2, QueryType.UP)
EXTRA_TYPES = ALL_TYPES[9:]
DISTRIBUTABLE = (QueryType.IP, QueryType.UP)

# (anchors, relations)
ARITY = {
    QueryType.P1: (1, 1),
    QueryType.P2: (1, 2),
    QueryType.P3: (1, 3),
    QueryType.I2: (2, 2),
    QueryType.I3: (3, 3),
    QueryType.PI: (2, 3),
    QueryType.IP: (2, 3),
    QueryType.U2: (2, 2),
    QueryType.UP: (2, 3),
    QueryType.P4: (1, 4),
    QueryType.P5: (1, 5),
    QueryType.IP3: (3, 4),
    QueryType.I2P: (2, 4),
}
DISTRIBUTED_ARITY = (2, 4)


# Plan nodes: ("anchor", i) | ("proj", child, relation_slot) | ("inter", *children) | ("union", *children)
Node = tuple


def _a(i):
    return ("anchor", i)


def _p(child, slot):
    return ("proj", child, slot)


def _chain(length):
    node = _a(0)
    for slot in range(length):
        node = _p(node, slot)
    return node


_shared_v = ("inter", _p(_a(0), 0), _p(_a(1), 2))

PLANS: dict[tuple[QueryType, bool], Node] = {
    (QueryType.P1, False): _chain(1),
    (QueryType.P2, False): _chain(2),
    (QueryType.P3, False): _chain(3),
    (QueryType.P4, False): _chain(4),
    (QueryType.P5, False): _chain(5),
    (QueryType.I2, False): ("inter", _p(_a(0), 0), _p(_a(1), 1)),
    (QueryType.I3, False): ("inter", _p(_a(0), 0), _p(_a(1), 1), _p(_a(2), 2)),
    (QueryType.PI, False): ("inter", _p(_p(_a(0), 0), 1), _p(_a(1), 2)),
    (QueryType.IP, False): _p(("inter", _p(_a(0), 0), _p(_a(1), 1)), 2),
    (QueryType.U2, False): ("union", _p(_a(0), 0), _p(_a(1), 1)),
    (QueryType.UP, False): _p(("union", _p(_a(0), 0), _p(_a(1), 1)), 2),
    (QueryType.IP3, False): _p(("inter", _p(_a(0), 0), _p(_a(1), 1), _p(_a(2), 2)), 3),
    (QueryType.I2P, False): _p(_p(("inter", _p(_a(0), 0), _p(_a(1), 1)), 2), 3),
    (QueryType.IP, True): ("inter", _p(_shared_v, 1), _p(_shared_v, 3)),
    (QueryType.UP, True): ("union", _p(_p(_a(0), 0), 1), _p(_p(_a(1), 2), 3)),
}


@dataclass(frozen=True)
class QueryGraph:
    qtype: QueryType
    anchors: tuple[int, ...]
    relations: tuple[int, ...]
    distributed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "qtype", QueryType.parse(self.qtype))
        object.__setattr__(self, "anchors", tuple(int(a) for a in self.anchors))
        object.__setattr__(self, "relations", tuple(int(r) for r in self.relations))
        object.__setattr__(self, "distributed", bool(self.distributed))

    @property
    def plan(self) -> Node:
        return PLANS[(self.qtype, self.distributed)]

    def expected_arity(self) -> tuple[int, int]:
        return DISTRIBUTED_ARITY if self.distributed else ARITY[self.qtype]


def check_arity(query: QueryGraph) -> None:
    if query.distributed and query.qtype not in DISTRIBUTABLE:
        raise StructureError(f"{query.qtype} has no distributed form")
    n_a, n_r = query.expected_arity()
    if len(query.anchors) != n_a or len(query.relations) != n_r:
        raise StructureError(
            f"{query.qtype}{' (distributed)' if query.distributed else ''} expects {n_a} anchors and "
            f"{n_r} relations, got {len(query.anchors)} and {len(query.relations)}"
        )
    if query.distributed and query.relations[1] != query.relations[3]:
        raise StructureError("distributed form must repeat the same final relation on both branches")


def validate(query: QueryGraph, kg: KnowledgeGraph) -> None:
    """Raise :class:`StructureError` unless arity and every id are valid for ``kg``."""
    check_arity(query)
    for a in query.anchors:
        if not 0 <= a < kg.entity_count():
            raise StructureError(f"anchor id {a} outside entity table of size {kg.entity_count()}")
    for r in query.relations:
        if not 0 <= r < kg.relation_count():
            raise StructureError(f"relation id {r} outside relation table of size {kg.relation_count()}")


def _eval_node(kg, query, node, memo):
    key = id(node)
    if key in memo:
        return memo[key]
    kind = node[0]
    if kind == "anchor":
        out = frozenset((query.anchors[node[1]],))
    elif kind == "proj":
        rel = query.relations[node[2]]
        out = set()
        for e in _eval_node(kg, query, node[1], memo):
            out.update(kg.tails(e, rel))
        out = frozenset(out)
    elif kind == "inter":
        parts = [_eval_node(kg, query, c, memo) for c in node[1:]]
        out = frozenset.intersection(*parts)
    elif kind == "union":
        parts = [_eval_node(kg, query, c, memo) for c in node[1:]]
        out = frozenset.union(*parts)
    else:  # pragma: no cover
        raise AssertionError(kind)
    memo[key] = out
    return out


def evaluate(kg: KnowledgeGraph, query: QueryGraph) -> tuple[int, ...]:
    """Exact answer set of ``query`` on ``kg``, sorted by entity id."""
    validate(query, kg)
    return tuple(sorted(_eval_node(kg, query, query.plan, {})))


def intermediate_sets(kg: KnowledgeGraph, query: QueryGraph) -> dict:
    """Entity set of every plan node, keyed by node identity."""
    validate(query, kg)
    memo: dict = {}
    _eval_node(kg, query, query.plan, memo)
    return memo


def transform_union_projection(query: QueryGraph) -> QueryGraph:
    """Rewrite ``ip``/``up`` into the distributed form; other queries pass through."""
    if query.qtype not in DISTRIBUTABLE or query.distributed:
        return query
    check_arity(query)
    r1, r2, r3 = query.relations
    return QueryGraph(query.qtype, query.anchors, (r1, r3, r2, r3), distributed=True)


def undistribute(query: QueryGraph) -> QueryGraph:
    if not query.distributed:
        return query
    check_arity(query)
    r1, r3, r2, _ = query.relations
    return QueryGraph(query.qtype, query.anchors, (r1, r2, r3), distributed=False)


# Reverse adjacency is only needed for sampling; built lazily per graph.
_incoming_cache: "weakref.WeakKeyDictionary[KnowledgeGraph, list]" = weakref.WeakKeyDictionary()


def _incoming(kg: KnowledgeGraph) -> list[tuple[tuple[int, int], ...]]:
    cached = _incoming_cache.get(kg)
    if cached is None:
        lists: list[list[tuple[int, int]]] = [[] for _ in range(kg.entity_count())]
        for h, r, t in kg.triples:
            lists[t].append((r, h))
        cached = [tuple(sorted(x)) for x in lists]
        _incoming_cache[kg] = cached
    return cached


class _DeadEnd(Exception):
    pass


def _leaves(node, out):
    kind = node[0]
    if kind == "anchor":
        out.append(("a", node[1]))
    elif kind == "proj":
        _leaves(node[1], out)
        out.append(("r", node[2]))
    else:
        for c in node[1:]:
            _leaves(c, out)
    return out


def _sample_backward(node, entity, incoming, rng, anchors, relations):
    kind = node[0]
    if kind == "anchor":
        anchors[node[1]] = entity
    elif kind == "proj":
        choices = incoming[entity]
        if not choices:
            raise _DeadEnd
        r, h = choices[int(rng.integers(len(choices)))]
        relations[node[2]] = r
        _sample_backward(node[1], h, incoming, rng, anchors, relations)
    else:
        for child in node[1:]:
            _sample_backward(child, entity, incoming, rng, anchors, relations)


def _has_duplicate_branches(node, anchors, relations):
    kind = node[0]
    if kind == "anchor":
        return False
    if kind == "proj":
        return _has_duplicate_branches(node[1], anchors, relations)
    sigs = set()
    for child in node[1:]:
        sig = tuple((anchors if k == "a" else relations)[i] for k, i in _leaves(child, []))
        if sig in sigs:
            return True
        sigs.add(sig)
        if _has_duplicate_branches(child, anchors, relations):
            return True
    return False


def random_query(
    kg: KnowledgeGraph,
    qtype: Union[QueryType, str],
    seed: Union[int, np.random.Generator],
    max_rejections: int = 100,
) -> QueryGraph:
    """Sample a query with a non-empty answer set by walking backward from an answer.

    An answer entity is drawn uniformly, then each projection picks a random
    incoming edge. Attempts that hit an entity without incoming edges, or
    whose intersection/union branches come out identical, are rejected.
    """
    qtype = QueryType.parse(qtype)
    if kg.entity_count() == 0 or kg.num_triples == 0:
        raise SamplingExhausted(f"cannot sample {qtype}: graph has no triples")
    rng = as_generator(seed)
    plan = PLANS[(qtype, False)]
    n_a, n_r = ARITY[qtype]
    incoming = _incoming(kg)
    for _ in range(max_rejections):
        answer = int(rng.integers(kg.entity_count()))
        anchors = [-1] * n_a
        relations = [-1] * n_r
        try:
            _sample_backward(plan, answer, incoming, rng, anchors, relations)
        except _DeadEnd:
            continue
        if _has_duplicate_branches(plan, anchors, relations):
            continue
        query = QueryGraph(qtype, anchors, relations)
        sets = intermediate_sets(kg, query)
        if any(len(s) == 0 for s in sets.values()):
            continue
        return query
    raise SamplingExhausted(f"no valid {qtype} query after {max_rejections} attempts")

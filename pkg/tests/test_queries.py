import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from naive_oracle import adjacency, naive_answers

from kgquery.errors import SamplingExhausted, StructureError
from kgquery.graph import KnowledgeGraph, project
from kgquery.queries import (
    ALL_TYPES,
    ARITY,
    QueryGraph,
    QueryType,
    evaluate,
    random_query,
    transform_union_projection,
    undistribute,
    validate,
)


def names(kg, ids):
    return {kg.entities[i] for i in ids}


def q(kg, qtype, anchors, relations):
    return QueryGraph(qtype, [kg.entity_id(a) for a in anchors], [kg.relation_id(r) for r in relations])


def test_thirteen_types_in_order():
    assert [t.value for t in ALL_TYPES] == ["1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up", "4p", "5p", "3ip", "i2p"]
    assert ARITY[QueryType.IP3] == (3, 4) and ARITY[QueryType.I2P] == (2, 4)


def test_worked_example(example_kg):
    kg = example_kg
    assert names(kg, evaluate(kg, q(kg, "1p", "A", "r"))) == {"B", "C"}
    assert names(kg, evaluate(kg, q(kg, "2i", "BC", "ss"))) == {"D"}
    assert names(kg, evaluate(kg, q(kg, "up", "BC", "ssr"))) == {"D"}
    assert names(kg, evaluate(kg, q(kg, "2u", "BC", "ss"))) == {"D", "E"}


def test_up_transform_example(example_kg):
    kg = example_kg
    up = q(kg, "up", "BC", "ssr")
    t = transform_union_projection(up)
    assert t.distributed and t.relations == (1, 0, 1, 0)
    assert names(kg, evaluate(kg, t)) == {"D"}
    assert undistribute(t) == up


def test_transform_identity_on_other_types(example_kg):
    p2 = q(example_kg, "2p", "A", "rs")
    assert transform_union_projection(p2) is p2


def test_validate():
    kg = KnowledgeGraph(["a", "b"], ["r"], [(0, 0, 1)])
    validate(QueryGraph("2i", [0, 1], [0, 0]), kg)
    with pytest.raises(StructureError):
        validate(QueryGraph("2i", [0, 1, 0], [0, 0]), kg)
    with pytest.raises(StructureError):
        validate(QueryGraph("2i", [0, 1], [0, 3]), kg)
    with pytest.raises(StructureError):
        QueryType.parse("3u")


def test_distributed_form_requires_repeated_relation():
    kg = KnowledgeGraph(["a", "b"], ["r", "s"], [(0, 0, 1)])
    with pytest.raises(StructureError):
        evaluate(kg, QueryGraph("up", [0, 1], [0, 1, 1, 0], distributed=True))


def test_ip_fresh_variable_reading_is_not_equivalent():
    # e1 -r1-> v1 -r3-> a and e2 -r2-> v2 -r3-> a: no shared v, so ip is empty,
    # while distributing with a separate variable per branch would give {a}.
    kg = KnowledgeGraph(["e1", "e2", "v1", "v2", "a"], ["r1", "r2", "r3"], [(0, 0, 2), (1, 1, 3), (2, 2, 4), (3, 2, 4)])
    ip = QueryGraph("ip", [0, 1], [0, 1, 2])
    assert evaluate(kg, ip) == ()
    adj = adjacency(5, 3, kg.triples)
    fresh = set(naive_answers(adj, "2p", [0], [0, 2])) & set(naive_answers(adj, "2p", [1], [1, 2]))
    assert fresh == {4}
    assert evaluate(kg, transform_union_projection(ip)) == ()


def random_graph(rng, n, n_rel, n_triples):
    triples = {(int(rng.integers(n)), int(rng.integers(n_rel)), int(rng.integers(n))) for _ in range(n_triples)}
    return KnowledgeGraph([f"e{i}" for i in range(n)], [f"r{i}" for i in range(n_rel)], triples)


def random_ids(rng, kg, qtype):
    n_a, n_r = ARITY[QueryType.parse(qtype)]
    return (
        [int(x) for x in rng.integers(kg.entity_count(), size=n_a)],
        [int(x) for x in rng.integers(kg.relation_count(), size=n_r)],
    )


def test_against_naive_enumerator_small():
    rng = np.random.default_rng(7)
    for _ in range(300):
        kg = random_graph(rng, 6, 2, 14)
        adj = adjacency(6, 2, kg.triples)
        for qtype in ALL_TYPES:
            anchors, rels = random_ids(rng, kg, qtype)
            assert evaluate(kg, QueryGraph(qtype, anchors, rels)) == naive_answers(adj, qtype.value, anchors, rels)


def test_distributed_forms_against_naive_enumerator():
    rng = np.random.default_rng(8)
    for _ in range(300):
        kg = random_graph(rng, 7, 3, 18)
        adj = adjacency(7, 3, kg.triples)
        for qtype in ("ip", "up"):
            anchors, rels = random_ids(rng, kg, qtype)
            t = transform_union_projection(QueryGraph(qtype, anchors, rels))
            assert evaluate(kg, t) == naive_answers(adj, qtype, anchors, list(t.relations), distributed=True)


def test_decomposition_identities():
    rng = np.random.default_rng(3)
    for _ in range(200):
        kg = random_graph(rng, 8, 2, 20)
        a, rels = random_ids(rng, kg, "5p")
        prefix = (a[0],)
        for k in range(1, 5):
            prefix = project(kg, prefix, rels[k - 1])
            chain = QueryGraph(f"{k + 1}p", a, rels[: k + 1])
            assert evaluate(kg, chain) == project(kg, prefix, rels[k])
        anchors, rels = random_ids(rng, kg, "i2p")
        inter = evaluate(kg, QueryGraph("2i", anchors, rels[:2]))
        assert evaluate(kg, QueryGraph("i2p", anchors, rels)) == project(kg, project(kg, inter, rels[2]), rels[3])


def test_containment():
    rng = np.random.default_rng(5)
    for _ in range(300):
        kg = random_graph(rng, 6, 2, 16)
        anchors, rels = random_ids(rng, kg, "3i")
        three = set(evaluate(kg, QueryGraph("3i", anchors, rels)))
        two = set(evaluate(kg, QueryGraph("2i", anchors[:2], rels[:2])))
        one = set(evaluate(kg, QueryGraph("1p", anchors[:1], rels[:1])))
        assert three <= two <= one
        union = set(evaluate(kg, QueryGraph("2u", anchors[:2], rels[:2])))
        assert one <= union
        assert set(evaluate(kg, QueryGraph("1p", anchors[1:2], rels[1:2]))) <= union


graphs = st.sets(st.tuples(st.integers(0, 5), st.integers(0, 1), st.integers(0, 5)), max_size=20)


@settings(max_examples=150, deadline=None)
@given(graphs, graphs, st.sampled_from(ALL_TYPES), st.integers(0, 2**32 - 1))
def test_monotone_under_triple_addition(t1, t2, qtype, seed):
    ents, rels = [f"e{i}" for i in range(6)], ["r", "s"]
    small, big = KnowledgeGraph(ents, rels, t1), KnowledgeGraph(ents, rels, t1 | t2)
    anchors, relations = random_ids(np.random.default_rng(seed), small, qtype)
    query = QueryGraph(qtype, anchors, relations)
    assert set(evaluate(small, query)) <= set(evaluate(big, query))


@settings(max_examples=150, deadline=None)
@given(graphs, st.sampled_from(["ip", "up"]), st.integers(0, 2**32 - 1))
def test_transform_equivalence_property(triples, qtype, seed):
    kg = KnowledgeGraph([f"e{i}" for i in range(6)], ["r", "s"], triples)
    anchors, relations = random_ids(np.random.default_rng(seed), kg, qtype)
    query = QueryGraph(qtype, anchors, relations)
    assert evaluate(kg, query) == evaluate(kg, transform_union_projection(query))


def test_random_query_nonempty_and_deterministic(example_kg):
    rng = np.random.default_rng(0)
    kg = random_graph(rng, 30, 3, 120)
    for qtype in ALL_TYPES:
        for seed in range(5):
            a = random_query(kg, qtype, seed)
            assert a == random_query(kg, qtype, seed)
            assert evaluate(kg, a)
    one = random_query(example_kg, "1p", 11)
    assert project(example_kg, one.anchors, one.relations[0])


def test_random_query_exhausted():
    # longest path has two edges, so no 3-chain exists
    kg = KnowledgeGraph(["a", "b", "c"], ["r"], [(0, 0, 1), (1, 0, 2)])
    with pytest.raises(SamplingExhausted):
        random_query(kg, "3p", 0)
    with pytest.raises(SamplingExhausted):
        random_query(KnowledgeGraph(["a"], ["r"], []), "1p", 0)

import itertools

import pytest
import torch

from gradcheck import OPERATORS, gradient_check

from kgquery.datasets import generate_dataset, synthesize_kg
from kgquery.errors import DataError, ModeError, TruncationError
from kgquery.model import ModelConfig, QueryAnswerModel, pool_path
from kgquery.queries import ALL_TYPES, CORE_TYPES
from kgquery.text import Vocabulary
from kgquery.training import Featurizer


def make_model(vocab_size=40, dim=16, blocks=1, heads=2, num_entities=None, seed=0, dtype=torch.float64, **kw):
    cfg = ModelConfig(vocab_size, dim=dim, blocks=blocks, heads=heads, num_entities=num_entities, **kw)
    return QueryAnswerModel(cfg, torch.Generator().manual_seed(seed)).to(dtype)


@pytest.fixture(scope="module")
def small():
    kg = synthesize_kg(24, 3, 90, seed=2, n_types=3)
    records = generate_dataset(kg, kg, ALL_TYPES, 3, seed=1)
    vocab = Vocabulary.build(kg.entities, kg.relations)
    return kg, records, vocab, Featurizer(vocab)


def test_encode_shapes(small):
    kg, records, vocab, fz = small
    model = make_model(len(vocab), num_entities=kg.entity_count())
    h = model.encode_queries([fz.query(r) for r in records])
    assert h.shape == (len(records), 16)
    c = model.encode_candidates([fz.entity(n) for n in kg.entities])
    assert c.shape == (kg.entity_count(), 16)
    assert model.classify(h).shape == (len(records), kg.entity_count())


def test_zero_blocks_is_embedding_sum():
    model = make_model(blocks=0)
    ids = torch.tensor([3, 5, 7])
    expected = model.token_embedding(ids) + model.position_embedding.weight[:3]
    assert torch.equal(model.encode_sequence(ids), expected)


def test_batch_independence(small):
    _, records, vocab, fz = small
    model = make_model(len(vocab))
    queries = [fz.query(r) for r in records]
    together = model.encode_queries(queries)
    alone = torch.stack([model.encode_query(q) for q in queries])
    assert torch.allclose(together, alone, atol=1e-10)


def test_truncation():
    model = make_model(max_length=4)
    with pytest.raises(TruncationError):
        model.encode_sequence(torch.arange(5))


def test_pool_path():
    hidden = torch.arange(12, dtype=torch.float64).view(4, 3)
    assert pool_path(hidden, (1, 3)).tolist() == [4.5, 5.5, 6.5]
    for bad in [(2, 2), (-1, 2), (1, 5)]:
        with pytest.raises(DataError):
            pool_path(hidden, bad)


def test_intersection_of_equal_branches():
    model = make_model()
    v = torch.randn(16, dtype=torch.float64)
    out = model.intersect(torch.stack([v, v, v]))
    assert torch.allclose(out, v, atol=1e-12)


def test_operator_needs_two_branches():
    model = make_model()
    one = torch.zeros(1, 16, dtype=torch.float64)
    with pytest.raises(DataError):
        model.intersect(one)
    with pytest.raises(DataError):
        model.union(one)


@pytest.mark.parametrize("n", [2, 3])
def test_operators_permutation_invariant(n):
    model = make_model(union_init="normal")
    branches = torch.randn(n, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(n))
    ref_i, ref_u = model.intersect(branches), model.union(branches)
    for perm in itertools.permutations(range(n)):
        assert (model.intersect(branches[list(perm)]) - ref_i).abs().max() <= 1e-12
        assert (model.union(branches[list(perm)]) - ref_u).abs().max() <= 1e-12


def test_attention_weights_sum_to_one():
    model = make_model(dtype=torch.float32)
    for n in (2, 3, 5):
        w = model.attention_weights(torch.randn(7, n, 16))
        assert torch.allclose(w.sum(-1), torch.ones(7), atol=1e-6)
        assert (w > 0).all()


def test_maxout_example():
    model = make_model(dim=2, heads=1, maxout_pieces=1)
    with torch.no_grad():
        model.union_weight.copy_(torch.eye(2)[None])
        model.union_bias.zero_()
    out = model.union(torch.tensor([[1.0, -2.0], [0.0, 3.0]], dtype=torch.float64))
    assert out.tolist() == [1.0, 3.0]


def test_union_identity_init_dominates_inputs():
    model = make_model()
    branches = torch.randn(3, 16, dtype=torch.float64)
    # identity piece plus a small random piece: the max is never far below the elementwise max
    assert (model.union(branches) >= branches.amax(0) - 0.5).all()


def test_classify_distribution():
    model = make_model(num_entities=6)
    h = torch.randn(4, 16, dtype=torch.float64)
    p = model.classify(h)
    assert torch.allclose(p.sum(-1), torch.ones(4, dtype=torch.float64), atol=1e-12)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.zero_()
    assert torch.allclose(model.classify(h), torch.full((4, 6), 1 / 6, dtype=torch.float64))


def test_matching_only_model_has_no_head():
    model = make_model()
    assert not model.has_classifier
    with pytest.raises(ModeError):
        model.classify(torch.zeros(1, 16, dtype=torch.float64))


def test_query_and_entity_share_encoder(small):
    kg, records, vocab, fz = small
    model = make_model(len(vocab))
    c0 = model.encode_candidate(fz.entity(kg.entities[0]))
    with torch.no_grad():
        model.blocks[0].ff2.weight.mul_(3.0)
    assert not torch.allclose(model.encode_candidate(fz.entity(kg.entities[0])), c0)
    names = {n for n, _ in model.named_parameters()}
    assert not any("candidate" in n or "entity_encoder" in n for n in names)


def test_extend_vocabulary():
    model = make_model(vocab_size=10)
    word_mean = model.token_embedding.weight[4:].mean(0).detach().clone()
    model.extend_vocabulary(13, word_start=4)
    assert model.config.vocab_size == 13
    assert torch.allclose(model.token_embedding.weight[12], word_mean)


# -- gradient check --------------------------------------------------------------


def test_gradient_check():
    worst, per_tensor, operators = gradient_check()
    assert operators == set(OPERATORS)
    assert len(per_tensor) == len(list(make_model(num_entities=3).parameters()))
    assert worst < 1e-4, max(per_tensor.items(), key=lambda kv: kv[1])

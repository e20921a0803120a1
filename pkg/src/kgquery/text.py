"""Linearized query text, structural prompts, and a whitespace tokenizer.

A query becomes ``[CLS] [qtype:T] <prompt> [SEP] <structure>`` where the
structure text follows one template per type, e.g. for 2i::

    [intersection] [projection] [anchor] e1 [relation] r1 [projection] [anchor] e2 [relation] r2

``ip`` and ``up`` are always written in their distributed form (the last
relation repeated on each branch). Chains 4p/5p extend the 2p/3p pattern;
3ip and i2p write the intersection template and append the post-intersection
projections after the branch list.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from kgquery.errors import ParseError, TruncationError
from kgquery.queries import ALL_TYPES, DISTRIBUTABLE, QueryGraph, QueryType, check_arity, transform_union_projection

CLS, SEP, PAD = "[CLS]", "[SEP]", "[PAD]"
ANCHOR, RELATION, PROJECTION = "[anchor]", "[relation]", "[projection]"
INTERSECTION, UNION, TARGET = "[intersection]", "[union]", "[target]"
UNK = "[UNK]"

SPECIAL_TOKENS = (CLS, SEP, PAD, ANCHOR, RELATION, PROJECTION, INTERSECTION, UNION, TARGET, UNK)
QTYPE_TOKENS = tuple(f"[qtype:{t.value}]" for t in ALL_TYPES)
NUMBER_WORDS = ("One", "Two", "Three", "Four", "Five", "Six", "Seven", "Eight", "Nine")
PROMPT_WORDS = NUMBER_WORDS + ("step", "steps", ":", ",", "then", "and", "[proj]", "[inter]")

_TOKEN_RE = re.compile(r"\[[^\[\]\s]+\]|[^\s,:\[\]]+|[,:]|\S")

# operator, branches as (anchor index, relation slots), post-combination relation slots.
# ip/up slots refer to the distributed relation list (r1, r3, r2, r3).
LAYOUTS = {
    QueryType.P1: (None, ((0, (0,)),), ()),
    QueryType.P2: (None, ((0, (0, 1)),), ()),
    QueryType.P3: (None, ((0, (0, 1, 2)),), ()),
    QueryType.P4: (None, ((0, (0, 1, 2, 3)),), ()),
    QueryType.P5: (None, ((0, (0, 1, 2, 3, 4)),), ()),
    QueryType.I2: ("intersection", ((0, (0,)), (1, (1,))), ()),
    QueryType.I3: ("intersection", ((0, (0,)), (1, (1,)), (2, (2,))), ()),
    QueryType.PI: ("intersection", ((0, (0, 1)), (1, (2,))), ()),
    QueryType.IP: ("intersection", ((0, (0, 1)), (1, (2, 3))), ()),
    QueryType.U2: ("union", ((0, (0,)), (1, (1,))), ()),
    QueryType.UP: ("union", ((0, (0, 1)), (1, (2, 3))), ()),
    QueryType.IP3: ("intersection", ((0, (0,)), (1, (1,)), (2, (2,))), (3,)),
    QueryType.I2P: ("intersection", ((0, (0,)), (1, (1,))), (2, 3)),
}

_OP_TOKEN = {"intersection": INTERSECTION, "union": UNION}
_OP_PROMPT = {"intersection": "[inter]", "union": "[union]"}


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Iterable[str]) -> str:
    return re.sub(r" ([,:])", r"\1", " ".join(tokens))


class Vocabulary:
    """Token table: special tokens, one token per query type, prompt words, then name words.

    Ids are dense and depend only on the name tables the vocabulary was
    built from (first-appearance order of words).
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        fixed = SPECIAL_TOKENS + QTYPE_TOKENS
        if self.tokens[: len(fixed)] != fixed:
            raise ValueError("vocabulary must start with the fixed special tokens")

    @classmethod
    def build(cls, *name_tables: Iterable[str]) -> "Vocabulary":
        tokens = list(SPECIAL_TOKENS + QTYPE_TOKENS + PROMPT_WORDS)
        seen = set(tokens)
        for table in name_tables:
            for name in table:
                for word in tokenize(name):
                    if word not in seen:
                        seen.add(word)
                        tokens.append(word)
        return cls(tokens)

    def extend(self, *name_tables: Iterable[str]) -> tuple["Vocabulary", list[int]]:
        """Vocabulary with the unseen words of ``name_tables`` appended, plus their new ids."""
        tokens = list(self.tokens)
        new_ids = []
        seen = set(tokens)
        for table in name_tables:
            for name in table:
                for word in tokenize(name):
                    if word not in seen:
                        seen.add(word)
                        new_ids.append(len(tokens))
                        tokens.append(word)
        return Vocabulary(tokens), new_ids

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def num_fixed(self) -> int:
        """Ids below this are special, query-type and prompt tokens."""
        return len(SPECIAL_TOKENS) + len(QTYPE_TOKENS) + len(PROMPT_WORDS)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        return "".join(f"{i}\t{tok}\n" for i, tok in enumerate(self.tokens))

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        tokens = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line:
                continue
            idx, _, tok = line.partition("\t")
            if not idx.isdigit() or int(idx) != len(tokens) or not tok:
                raise ParseError(f"bad vocabulary entry {line!r}", lineno)
            tokens.append(tok)
        return cls(tokens)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def _number_word(n):
    return NUMBER_WORDS[n - 1]


def structural_prompt(qtype) -> str:
    """Stepwise instruction: step count, then the operation order."""
    qtype = QueryType.parse(qtype)
    op, branches, trailing = LAYOUTS[qtype]
    body = ", and ".join(", then ".join(["[proj]"] * len(slots)) for _, slots in branches)
    steps = sum(len(slots) for _, slots in branches) + len(trailing)
    if op is not None:
        body += ", " + _OP_PROMPT[op]
        steps += 1
    body += ", then [proj]" * len(trailing)
    return f"{_number_word(steps)} {'step' if steps == 1 else 'steps'}: {body}"


@dataclass(frozen=True)
class NamedQuery:
    """A query in name space; ``ip``/``up`` carry the distributed relation list."""

    qtype: QueryType
    anchors: tuple[str, ...]
    relations: tuple[str, ...]
    distributed: bool = False

    @classmethod
    def from_query(cls, query: QueryGraph, names) -> "NamedQuery":
        q = transform_union_projection(query)
        check_arity(q)
        return cls(
            q.qtype,
            tuple(names.entity_name(a) for a in q.anchors),
            tuple(names.relation_name(r) for r in q.relations),
            q.distributed,
        )

    @classmethod
    def from_record_fields(cls, qtype, anchors, relations) -> "NamedQuery":
        """From Eq.-1-order names (as stored in dataset records)."""
        qtype = QueryType.parse(qtype)
        relations = tuple(relations)
        if qtype in DISTRIBUTABLE:
            r1, r2, r3 = relations
            return cls(qtype, tuple(anchors), (r1, r3, r2, r3), True)
        return cls(qtype, tuple(anchors), relations, False)

    def record_relations(self) -> tuple[str, ...]:
        if self.distributed:
            r1, r3, r2, _ = self.relations
            return (r1, r2, r3)
        return self.relations


def _structure_pieces(named: NamedQuery):
    """Yield ``(kind, text)`` pieces: kind is 'op', ('branch', i) or 'trailing'."""
    op, branches, trailing = LAYOUTS[named.qtype]
    if op is not None:
        yield "op", _OP_TOKEN[op]
    for b, (anchor_idx, slots) in enumerate(branches):
        text = f"{PROJECTION} {ANCHOR} {named.anchors[anchor_idx]} {RELATION} {named.relations[slots[0]]}"
        for slot in slots[1:]:
            text += f" {PROJECTION} {RELATION} {named.relations[slot]}"
        yield ("branch", b), text
    for slot in trailing:
        yield "trailing", f"{PROJECTION} {RELATION} {named.relations[slot]}"


def linearize_named(named: NamedQuery) -> str:
    return " ".join(text for _, text in _structure_pieces(named))


def linearize(query: QueryGraph, names) -> str:
    """Structure text of ``query``; ``names`` resolves ids (a KnowledgeGraph)."""
    return linearize_named(NamedQuery.from_query(query, names))


@dataclass(frozen=True)
class LinearizedQuery:
    qtype: QueryType
    prompt_text: str
    structure_text: str
    token_ids: tuple[int, ...]
    path_spans: tuple[tuple[int, int], ...]
    operator: Optional[str]
    shared_span: Optional[tuple[int, int]] = None
    unknown_words: tuple[str, ...] = field(default=())

    @property
    def structure_start(self) -> int:
        """Index of the first structure token (just past ``[SEP]``)."""
        return 3 + len(tokenize(self.prompt_text))


def _ids(tokens, vocab, unknown):
    out = []
    for tok in tokens:
        if tok in vocab.index:
            out.append(vocab.index[tok])
        else:
            out.append(vocab.index[UNK])
            unknown.append(tok)
    return out


def encode_named(named: NamedQuery, vocab: Vocabulary, max_length: int = 128) -> LinearizedQuery:
    unknown: list[str] = []
    prompt = structural_prompt(named.qtype)
    ids = [vocab.index[CLS], vocab.index[f"[qtype:{named.qtype.value}]"]]
    ids += _ids(tokenize(prompt), vocab, unknown)
    ids.append(vocab.index[SEP])

    spans = []
    shared_start = None
    for kind, text in _structure_pieces(named):
        start = len(ids)
        ids += _ids(tokenize(text), vocab, unknown)
        if kind == "trailing" and shared_start is None:
            shared_start = start
        elif isinstance(kind, tuple):
            spans.append((start, len(ids)))
    if len(ids) > max_length:
        raise TruncationError(f"{named.qtype} query needs {len(ids)} tokens, max length is {max_length}")
    op = LAYOUTS[named.qtype][0]
    return LinearizedQuery(
        qtype=named.qtype,
        prompt_text=prompt,
        structure_text=linearize_named(named),
        token_ids=tuple(ids),
        path_spans=tuple(spans),
        operator=op,
        shared_span=(shared_start, len(ids)) if shared_start is not None else None,
        unknown_words=tuple(unknown),
    )


def encode_query(query: QueryGraph, names, vocab: Vocabulary, max_length: int = 128) -> LinearizedQuery:
    """Full model input for ``query``: token ids, per-branch spans, and the combining operator."""
    return encode_named(NamedQuery.from_query(query, names), vocab, max_length)


@dataclass(frozen=True)
class EntityTokens:
    ids: tuple[int, ...]
    unknown_words: tuple[str, ...] = ()


def encode_entity(name: str, vocab: Vocabulary, max_length: int = 128) -> EntityTokens:
    """``[CLS] [target] <name words>``; unseen words become ``[UNK]`` and are reported."""
    unknown: list[str] = []
    ids = [vocab.index[CLS], vocab.index[TARGET]] + _ids(tokenize(name), vocab, unknown)
    if len(ids) > max_length:
        raise TruncationError(f"entity {name!r} needs {len(ids)} tokens, max length is {max_length}")
    return EntityTokens(tuple(ids), tuple(unknown))


class _Cursor:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def expect(self, token):
        if self.pos >= len(self.tokens) or self.tokens[self.pos] != token:
            got = self.tokens[self.pos] if self.pos < len(self.tokens) else "end of text"
            raise ParseError(f"expected {token} at token {self.pos}, got {got!r}")
        self.pos += 1

    def name(self):
        start = self.pos
        while self.pos < len(self.tokens) and not _is_marker(self.tokens[self.pos]):
            self.pos += 1
        if self.pos == start:
            raise ParseError(f"expected a name at token {start}")
        return detokenize(self.tokens[start : self.pos])

    def at_end(self):
        return self.pos >= len(self.tokens)


_MARKERS = {ANCHOR, RELATION, PROJECTION, INTERSECTION, UNION}


def _is_marker(tok):
    return tok in _MARKERS


def parse(structure_text: str, qtype) -> NamedQuery:
    """Inverse of :func:`linearize` for a known query type."""
    qtype = QueryType.parse(qtype)
    op, branches, trailing = LAYOUTS[qtype]
    cur = _Cursor(tokenize(structure_text))
    n_rel = max([s for _, slots in branches for s in slots] + list(trailing)) + 1
    anchors: list[Optional[str]] = [None] * len(branches)
    relations: list[Optional[str]] = [None] * n_rel
    if op is not None:
        cur.expect(_OP_TOKEN[op])
    for anchor_idx, slots in branches:
        cur.expect(PROJECTION)
        cur.expect(ANCHOR)
        anchors[anchor_idx] = cur.name()
        cur.expect(RELATION)
        relations[slots[0]] = cur.name()
        for slot in slots[1:]:
            cur.expect(PROJECTION)
            cur.expect(RELATION)
            relations[slot] = cur.name()
    for slot in trailing:
        cur.expect(PROJECTION)
        cur.expect(RELATION)
        relations[slot] = cur.name()
    if not cur.at_end():
        raise ParseError(f"unexpected trailing token {cur.tokens[cur.pos]!r} at token {cur.pos}")
    distributed = qtype in DISTRIBUTABLE
    if distributed and relations[1] != relations[3]:
        raise ParseError("distributed form repeats different final relations")
    return NamedQuery(qtype, tuple(anchors), tuple(relations), distributed)


def parse_path(text: str) -> tuple[str, tuple[str, ...]]:
    """Parse one branch ``[projection] [anchor] e [relation] r ([projection] [relation] r)*``."""
    cur = _Cursor(tokenize(text))
    cur.expect(PROJECTION)
    cur.expect(ANCHOR)
    anchor = cur.name()
    cur.expect(RELATION)
    rels = [cur.name()]
    while not cur.at_end():
        cur.expect(PROJECTION)
        cur.expect(RELATION)
        rels.append(cur.name())
    return anchor, tuple(rels)

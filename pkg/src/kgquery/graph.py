"""Immutable knowledge graphs of named triples with a forward adjacency index."""

from __future__ import annotations

import operator
import warnings
from pathlib import Path
from typing import Iterable, Sequence

from kgquery.errors import DomainError, ParseError, UnknownNameError


class DuplicateTripleWarning(UserWarning):
    pass


class KnowledgeGraph:
    """A set of ``(head, relation, tail)`` id triples over two name tables.

    Ids are dense integers assigned in table order. The graph never changes
    after construction, so it can be shared freely between threads.
    """

    __slots__ = ("_entities", "_relations", "_entity_ids", "_relation_ids", "_triples", "_forward", "__weakref__")

    def __init__(self, entities: Sequence[str], relations: Sequence[str], triples: Iterable[tuple[int, int, int]]):
        self._entities = tuple(entities)
        self._relations = tuple(relations)
        self._entity_ids = _index_names(self._entities, "entity")
        self._relation_ids = _index_names(self._relations, "relation")

        n_e, n_r = len(self._entities), len(self._relations)
        forward: dict[tuple[int, int], set[int]] = {}
        seen = set()
        for h, r, t in triples:
            h, r, t = int(h), int(r), int(t)
            if not (0 <= h < n_e and 0 <= t < n_e and 0 <= r < n_r):
                raise DomainError(f"triple ({h}, {r}, {t}) references an id outside the tables")
            seen.add((h, r, t))
            forward.setdefault((h, r), set()).add(t)
        self._triples = tuple(sorted(seen))
        self._forward = {key: tuple(sorted(tails)) for key, tails in forward.items()}

    @classmethod
    def from_named_triples(cls, entities, relations, named_triples):
        e_ids = {n: i for i, n in enumerate(entities)}
        r_ids = {n: i for i, n in enumerate(relations)}
        triples = []
        for h, r, t in named_triples:
            for name, table, kind in ((h, e_ids, "entity"), (r, r_ids, "relation"), (t, e_ids, "entity")):
                if name not in table:
                    raise UnknownNameError(name, kind)
            triples.append((e_ids[h], r_ids[r], e_ids[t]))
        return cls(entities, relations, triples)

    @property
    def entities(self) -> tuple[str, ...]:
        return self._entities

    @property
    def relations(self) -> tuple[str, ...]:
        return self._relations

    @property
    def triples(self) -> tuple[tuple[int, int, int], ...]:
        """All triples, sorted."""
        return self._triples

    @property
    def num_triples(self) -> int:
        return len(self._triples)

    def entity_count(self) -> int:
        return len(self._entities)

    def relation_count(self) -> int:
        return len(self._relations)

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_ids[name]
        except KeyError:
            raise UnknownNameError(name, "entity") from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_ids[name]
        except KeyError:
            raise UnknownNameError(name, "relation") from None

    def entity_name(self, eid: int) -> str:
        self.check_entity(eid)
        return self._entities[eid]

    def relation_name(self, rid: int) -> str:
        self.check_relation(rid)
        return self._relations[rid]

    def has_entity(self, name: str) -> bool:
        return name in self._entity_ids

    def check_entity(self, eid) -> None:
        if not _valid_id(eid, len(self._entities)):
            raise DomainError(f"invalid entity id {eid!r}")

    def check_relation(self, rid) -> None:
        if not _valid_id(rid, len(self._relations)):
            raise DomainError(f"invalid relation id {rid!r}")

    def tails(self, head: int, relation: int) -> tuple[int, ...]:
        """Sorted tails of ``(head, relation)``; no validation, for hot loops."""
        return self._forward.get((head, relation), ())

    def neighbors(self, eid: int) -> tuple[tuple[int, int], ...]:
        """Outgoing ``(relation, tail)`` pairs of ``eid``, sorted."""
        self.check_entity(eid)
        out = []
        for r in range(len(self._relations)):
            out.extend((r, t) for t in self._forward.get((eid, r), ()))
        return tuple(out)

    def with_triples(self, triples) -> "KnowledgeGraph":
        """A new graph over the same name tables with a different triple set."""
        return KnowledgeGraph(self._entities, self._relations, triples)

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self._entities == other._entities
            and self._relations == other._relations
            and self._triples == other._triples
        )

    def __hash__(self):
        return hash((self._entities, self._relations, self._triples))

    def __repr__(self):
        return f"KnowledgeGraph(|E|={len(self._entities)}, |R|={len(self._relations)}, |T|={len(self._triples)})"


def _valid_id(value, size):
    if isinstance(value, bool):
        return False
    try:
        i = operator.index(value)
    except TypeError:
        return False
    return 0 <= i < size


def _index_names(names, kind):
    index = {}
    for i, name in enumerate(names):
        if not isinstance(name, str) or not name.strip():
            raise ParseError(f"empty {kind} name at position {i}")
        if name in index:
            raise ParseError(f"duplicate {kind} name {name!r}")
        index[name] = i
    return index


def project(kg: KnowledgeGraph, sources: Iterable[int], relation: int) -> tuple[int, ...]:
    """Union of the ``relation``-tails of every entity in ``sources``, sorted by id."""
    kg.check_relation(relation)
    out: set[int] = set()
    for e in sources:
        kg.check_entity(e)
        out.update(kg.tails(e, relation))
    return tuple(sorted(out))


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def read_names(path) -> list[str]:
    names = []
    seen = {}
    for lineno, line in _content_lines(path):
        name = line.strip()
        if "\t" in name:
            raise ParseError(f"name contains a tab: {name!r}", lineno)
        if name in seen:
            raise ParseError(f"duplicate name {name!r} (first on line {seen[name]})", lineno)
        seen[name] = lineno
        names.append(name)
    return names


def load_graph(triples_file, entity_names_file, relation_names_file) -> KnowledgeGraph:
    """Read a graph from a tab-separated triples file and two name files.

    Duplicate triples are dropped with a :class:`DuplicateTripleWarning`.
    """
    entities = read_names(entity_names_file)
    relations = read_names(relation_names_file)
    e_ids = {n: i for i, n in enumerate(entities)}
    r_ids = {n: i for i, n in enumerate(relations)}

    triples = []
    seen = set()
    for lineno, line in _content_lines(triples_file):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        h, r, t = (p.strip() for p in parts)
        if h not in e_ids:
            raise UnknownNameError(h, "entity", lineno)
        if r not in r_ids:
            raise UnknownNameError(r, "relation", lineno)
        if t not in e_ids:
            raise UnknownNameError(t, "entity", lineno)
        triple = (e_ids[h], r_ids[r], e_ids[t])
        if triple in seen:
            warnings.warn(f"{triples_file}: line {lineno}: duplicate triple {h}\t{r}\t{t}", DuplicateTripleWarning)
            continue
        seen.add(triple)
        triples.append(triple)
    return KnowledgeGraph(entities, relations, triples)


def write_graph(kg: KnowledgeGraph, triples_file, entity_names_file, relation_names_file) -> None:
    for path in (triples_file, entity_names_file, relation_names_file):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(entity_names_file, "w", encoding="utf-8") as fh:
        fh.writelines(f"{n}\n" for n in kg.entities)
    with open(relation_names_file, "w", encoding="utf-8") as fh:
        fh.writelines(f"{n}\n" for n in kg.relations)
    with open(triples_file, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples:
            fh.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")


def graph_paths(prefix) -> tuple[Path, Path, Path]:
    """Conventional ``(triples, entities, relations)`` file names for a graph prefix."""
    prefix = Path(prefix)
    return (
        prefix.with_name(prefix.name + ".triples.tsv"),
        prefix.with_name(prefix.name + ".entities.txt"),
        prefix.with_name(prefix.name + ".relations.txt"),
    )

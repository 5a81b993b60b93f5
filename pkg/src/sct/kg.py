"""Knowledge graph loading and local topology queries.

Splits are tab-separated ``head<TAB>relation<TAB>tail`` with an optional
fourth 0/1 label column for classification splits. Vocabulary ids are
assigned in first-appearance order and shared across splits by passing
the vocabs back in. Edge ids are triple indices in file order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class LabeledTriple:
    triple: Triple
    label: int


class Vocab:
    """Ordered name <-> id mapping, append-only."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for n in names:
            self.intern(n)

    def intern(self, name: str) -> int:
        if name in self._index:
            return self._index[name]
        i = len(self._names)
        self._names.append(name)
        self._index[name] = i
        return i

    def id(self, name: str) -> int:
        return self._index[name]

    def name(self, i: int) -> str:
        return self._names[i]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self._names)

    def names(self) -> list[str]:
        return list(self._names)


class KnowledgeGraph:
    """Immutable triple store with a per-entity incidence index."""

    def __init__(self, entities: Vocab, relations: Vocab,
                 triples: Sequence[Triple]):
        self.entities = entities
        self.relations = relations
        self.triples: tuple[Triple, ...] = tuple(triples)
        if len(set(self.triples)) != len(self.triples):
            raise ValueError("duplicate triples in graph")
        incidence: list[list[int]] = [[] for _ in range(len(entities))]
        for e, t in enumerate(self.triples):
            incidence[t.head].append(e)
            if t.tail != t.head:
                incidence[t.tail].append(e)
        # file order is already ascending, so lists are sorted
        self._incidence = tuple(np.asarray(lst, dtype=np.int64)
                                for lst in incidence)
        self._triple_set = frozenset(self.triples)

    def __len__(self) -> int:
        return len(self.triples)

    def incident(self, entity: int) -> np.ndarray:
        return self._incidence[entity]

    def has_triple(self, t: Triple) -> bool:
        return t in self._triple_set

    def relation_of(self, edge: int) -> int:
        return self.triples[edge].relation

    def edge_ids_equal_to(self, t: Triple) -> list[int]:
        return [e for e in self.incident(t.head)
                if self.triples[e] == t]


def entity_edges(g: KnowledgeGraph, entity: int,
                 exclude: Iterable[int] = ()) -> list[int]:
    """Sorted edge ids incident to ``entity``, minus ``exclude``."""
    ex = set(exclude)
    return [int(e) for e in g.incident(entity) if e not in ex]


def neighbors_of_edge(g: KnowledgeGraph, edge: int,
                      exclude: Iterable[int] = ()) -> list[int]:
    """Sorted edge ids sharing an endpoint with ``edge``; never includes
    ``edge`` itself."""
    t = g.triples[edge]
    ex = set(exclude)
    ex.add(edge)
    merged = np.union1d(g.incident(t.head), g.incident(t.tail))
    return [int(e) for e in merged if e not in ex]


class SplitFormatError(ValueError):
    pass


def _parse_lines(path: str):
    rows = []
    ncols = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise SplitFormatError(
                    f"{path}:{lineno}: expected 3 or 4 tab-separated fields, "
                    f"got {len(parts)}")
            if ncols is None:
                ncols = len(parts)
            elif len(parts) != ncols:
                raise SplitFormatError(
                    f"{path}:{lineno}: inconsistent column count")
            if len(parts) == 4 and parts[3] not in ("0", "1"):
                raise SplitFormatError(
                    f"{path}:{lineno}: label must be 0 or 1, got {parts[3]!r}")
            rows.append((lineno, parts))
    return rows, ncols


def load_split(path: str, entities: Vocab | None = None,
               relations: Vocab | None = None):
    """Read one split file.

    Returns ``(graph, entities, relations)`` for 3-column files and
    ``(labeled_list, entities, relations)`` for 4-column files. Vocabs
    grow in first-appearance order; duplicate triples within one file
    are an error.
    """
    entities = entities if entities is not None else Vocab()
    relations = relations if relations is not None else Vocab()
    rows, ncols = _parse_lines(path)
    seen: dict[Triple, int] = {}
    triples: list[Triple] = []
    labels: list[int] = []
    for lineno, parts in rows:
        t = Triple(entities.intern(parts[0]), relations.intern(parts[1]),
                   entities.intern(parts[2]))
        if t in seen:
            raise SplitFormatError(
                f"{path}:{lineno}: duplicate triple "
                f"({parts[0]}, {parts[1]}, {parts[2]}) first seen on line "
                f"{seen[t]}")
        seen[t] = lineno
        triples.append(t)
        if ncols == 4:
            labels.append(int(parts[3]))
    if ncols == 4:
        out = [LabeledTriple(t, l) for t, l in zip(triples, labels)]
        return out, entities, relations
    return KnowledgeGraph(entities, relations, triples), entities, relations


def write_split(path: str, g_or_list, entities: Vocab, relations: Vocab):
    """Inverse of load_split; labeled lists get the fourth column."""
    with open(path, "w", encoding="utf-8") as f:
        if isinstance(g_or_list, KnowledgeGraph):
            items = [(t, None) for t in g_or_list.triples]
        else:
            items = [(lt.triple, lt.label) for lt in g_or_list]
        for t, label in items:
            cols = [entities.name(t.head), relations.name(t.relation),
                    entities.name(t.tail)]
            if label is not None:
                cols.append(str(label))
            f.write("\t".join(cols) + "\n")


def dump_vocab(path: str, entities: Vocab, relations: Vocab):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"entities": entities.names(),
                   "relations": relations.names()}, f, indent=1)


def make_labeled_split(positives: Sequence[Triple], known: frozenset[Triple],
                       n_entities: int, rng: np.random.Generator
                       ) -> list[LabeledTriple]:
    """One filtered corruption per positive, interleaved 1/0.

    Each negative flips head or tail (fair coin) to a uniform different
    entity and is resampled while it collides with any known true
    triple. Deterministic given the generator state.
    """
    out: list[LabeledTriple] = []
    for t in positives:
        out.append(LabeledTriple(t, 1))
        for _ in range(1000):
            side = rng.integers(0, 2)
            orig = t.head if side == 0 else t.tail
            repl = int(rng.integers(0, n_entities - 1))
            if repl >= orig:
                repl += 1
            cand = (Triple(repl, t.relation, t.tail) if side == 0
                    else Triple(t.head, t.relation, repl))
            if cand not in known:
                out.append(LabeledTriple(cand, 0))
                break
        else:
            raise RuntimeError(
                f"could not corrupt {t}; graph too dense for filtering")
    return out

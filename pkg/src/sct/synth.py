"""Deterministic toy graphs and the bundled demo dataset.

The bundled dataset (8 entities, 4 relations, 30 triples split
22/4/4) is generated once with a fixed seed and committed; regenerating
it reproduces the files byte for byte. Holdout selection never removes
the last occurrence of an entity or relation from train, so valid and
test rows always resolve against the train vocabulary.
"""
from __future__ import annotations

import json
import os
from typing import Sequence

import numpy as np

from .kg import (
    KnowledgeGraph, LabeledTriple, Triple, Vocab, dump_vocab, load_split,
    make_labeled_split, write_split,
)

ENTITY_POOL = (
    "argon", "boron", "carbon", "dysprosium", "erbium", "fluorine",
    "gallium", "helium", "iodine", "krypton", "lithium", "mercury",
    "neon", "osmium", "platinum", "radon", "sodium", "tungsten",
    "uranium", "xenon",
)

RELATION_POOL = (
    "bonds_with", "heavier_than", "same_group_as", "reacts_with",
    "decays_into", "alloys_with", "displaces", "catalyzes",
)


def entity_names(n: int) -> list[str]:
    if n <= len(ENTITY_POOL):
        return list(ENTITY_POOL[:n])
    return list(ENTITY_POOL) + [f"element_{i}"
                                for i in range(len(ENTITY_POOL), n)]


def relation_names(n: int) -> list[str]:
    if n <= len(RELATION_POOL):
        return list(RELATION_POOL[:n])
    return list(RELATION_POOL) + [f"relation_{i}"
                                  for i in range(len(RELATION_POOL), n)]


def random_graph(n_entities: int, n_relations: int, n_triples: int,
                 rng: np.random.Generator) -> KnowledgeGraph:
    """Uniform random distinct triples with head != tail."""
    cap = n_entities * (n_entities - 1) * n_relations
    if n_triples > cap:
        raise ValueError(f"{n_triples} triples exceed the {cap} possible")
    seen: set[Triple] = set()
    triples: list[Triple] = []
    while len(triples) < n_triples:
        h = int(rng.integers(n_entities))
        t = int(rng.integers(n_entities))
        if h == t:
            continue
        r = int(rng.integers(n_relations))
        trip = Triple(h, r, t)
        if trip in seen:
            continue
        seen.add(trip)
        triples.append(trip)
    return KnowledgeGraph(Vocab(entity_names(n_entities)),
                          Vocab(relation_names(n_relations)), triples)


def coverage_split(g: KnowledgeGraph, n_holdout: int,
                   rng: np.random.Generator
                   ) -> tuple[list[Triple], list[Triple]]:
    """(train, holdout) where train still mentions every entity and
    relation of g. Raises if that many triples cannot be spared."""
    ent_uses = np.zeros(len(g.entities), dtype=np.int64)
    rel_uses = np.zeros(len(g.relations), dtype=np.int64)
    for t in g.triples:
        ent_uses[t.head] += 1
        ent_uses[t.tail] += 1
        rel_uses[t.relation] += 1
    held: list[Triple] = []
    remaining = list(g.triples)
    for i in rng.permutation(len(remaining)):
        if len(held) == n_holdout:
            break
        t = remaining[i]
        if t is None:
            continue
        if t.head == t.tail:
            # a self-loop holds two of its entity's uses
            ok = ent_uses[t.head] >= 3 and rel_uses[t.relation] >= 2
        else:
            ok = (ent_uses[t.head] >= 2 and ent_uses[t.tail] >= 2
                  and rel_uses[t.relation] >= 2)
        if ok:
            ent_uses[t.head] -= 1
            ent_uses[t.tail] -= 1
            rel_uses[t.relation] -= 1
            held.append(t)
            remaining[i] = None
    if len(held) < n_holdout:
        raise ValueError(
            f"only {len(held)} of {n_holdout} triples can be held out "
            "without dropping an entity or relation from train")
    return [t for t in remaining if t is not None], held


def make_dataset(out_dir: str, n_entities: int = 8, n_relations: int = 4,
                 n_triples: int = 30, n_valid: int = 4, n_test: int = 4,
                 seed: int = 20) -> dict[str, str]:
    """Write train/valid/test TSVs plus the vocab; returns the paths."""
    rng = np.random.default_rng(seed)
    g = random_graph(n_entities, n_relations, n_triples, rng)
    train, held = coverage_split(g, n_valid + n_test, rng)
    valid, test = held[:n_valid], held[n_valid:]
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, f"{name}.tsv")
             for name in ("train", "valid", "test")}
    paths["vocab"] = os.path.join(out_dir, "vocab.json")
    write_split(paths["train"], KnowledgeGraph(g.entities, g.relations, train),
                g.entities, g.relations)
    write_split(paths["valid"], KnowledgeGraph(g.entities, g.relations, valid),
                g.entities, g.relations)
    write_split(paths["test"], KnowledgeGraph(g.entities, g.relations, test),
                g.entities, g.relations)
    dump_vocab(paths["vocab"], g.entities, g.relations)
    return paths


def load_dataset(data_dir: str) -> tuple[KnowledgeGraph,
                                         KnowledgeGraph | None,
                                         KnowledgeGraph | None,
                                         Vocab, Vocab]:
    """(train graph, valid, test, entities, relations). A vocab.json in
    the directory fixes id order; splits then only reference it."""
    vocab_path = os.path.join(data_dir, "vocab.json")
    if os.path.exists(vocab_path):
        with open(vocab_path, "r", encoding="utf-8") as f:
            blob = json.load(f)
        ents, rels = Vocab(blob["entities"]), Vocab(blob["relations"])
    else:
        ents, rels = Vocab(), Vocab()
    train_path = os.path.join(data_dir, "train.tsv")
    if not os.path.exists(train_path):
        raise FileNotFoundError(f"no train.tsv under {data_dir}")
    g, ents, rels = load_split(train_path, ents, rels)
    out = [g]
    for name in ("valid", "test"):
        p = os.path.join(data_dir, f"{name}.tsv")
        if os.path.exists(p):
            split, ents, rels = load_split(p, ents, rels)
            out.append(split)
        else:
            out.append(None)
    return out[0], out[1], out[2], ents, rels


def classification_rows(g: KnowledgeGraph,
                        labeled: Sequence[LabeledTriple]) -> list[dict]:
    """Prompt-corpus rows (names, not ids) for labeled triples."""
    return [{"task": "classify",
             "head": g.entities.name(lt.triple.head),
             "relation": g.relations.name(lt.triple.relation),
             "tail": g.entities.name(lt.triple.tail),
             "label": lt.label}
            for lt in labeled]


def labeled_classification_rows(g: KnowledgeGraph, triples: Sequence[Triple],
                                known: frozenset[Triple],
                                rng: np.random.Generator) -> list[dict]:
    """One positive and one filtered-corruption negative per triple."""
    labeled = make_labeled_split(triples, known, len(g.entities), rng)
    return classification_rows(g, labeled)


def link_rows(g: KnowledgeGraph, triples: Sequence[Triple],
              candidates_of, n_candidates: int = 20) -> list[dict]:
    """Link-prediction prompt rows; ``candidates_of(triple)`` supplies
    ranked entity ids. The gold tail replaces the last slot when the
    generator misses it, since a training answer must appear among the
    listed options."""
    rows = []
    for t in triples:
        cands = list(candidates_of(t))[:n_candidates]
        if t.tail not in cands:
            cands[-1:] = [t.tail]
        rows.append({"task": "link",
                     "head": g.entities.name(t.head),
                     "relation": g.relations.name(t.relation),
                     "tail": g.entities.name(t.tail),
                     "candidates": [g.entities.name(e) for e in cands]})
    return rows

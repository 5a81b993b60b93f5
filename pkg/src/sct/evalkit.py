"""Ranking and classification evaluation for KG completion."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


@dataclass
class RankingResult:
    ranks: list[int]
    mrr: float
    hits: dict[int, float] = field(default_factory=dict)


@dataclass
class ClassificationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    acc: float
    precision: float
    recall: float
    f1: float
    threshold: float


def mrr_hits(ranks: Sequence[int], ns: Sequence[int] = (1, 3, 10)
             ) -> RankingResult:
    """MRR = mean(1/rank); Hits@N = fraction(rank <= N)."""
    if not ranks:
        raise ValueError("mrr_hits of empty rank list")
    if any(r < 1 for r in ranks):
        raise ValueError("ranks are 1-based; got a rank < 1")
    n = len(ranks)
    mrr = sum(1.0 / r for r in ranks) / n
    hits = {int(k): sum(1 for r in ranks if r <= k) / n for k in sorted(ns)}
    return RankingResult(list(ranks), mrr, hits)


def rank_gold(scores: Mapping, gold) -> int:
    """Pessimistic 1-based rank of the gold candidate.

    rank = 1 + #(strictly greater) + #(equal among non-gold); a gold
    absent from the candidate map ranks |candidates| + 1.
    """
    if not scores:
        raise ValueError("rank_gold with no candidates")
    if gold not in scores:
        return len(scores) + 1
    gs = scores[gold]
    greater = sum(1 for c, s in scores.items() if s > gs)
    equal_other = sum(1 for c, s in scores.items() if s == gs and c != gold)
    return 1 + greater + equal_other


def _report_at(pairs: Sequence[tuple[float, int]], thr: float
               ) -> ClassificationReport:
    tp = sum(1 for s, y in pairs if s >= thr and y == 1)
    fp = sum(1 for s, y in pairs if s >= thr and y == 0)
    fn = sum(1 for s, y in pairs if s < thr and y == 1)
    tn = sum(1 for s, y in pairs if s < thr and y == 0)
    total = len(pairs)
    acc = (tp + tn) / total if total else 0.0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return ClassificationReport(tp, fp, fn, tn, acc, p, r, f1, thr)


def threshold_candidates(scores: Sequence[float]) -> list[float]:
    """All decision boundaries worth trying: midpoints between adjacent
    distinct scores, plus one below the minimum (predict everything
    true) and one above the maximum (predict everything false)."""
    uniq = sorted(set(scores))
    cands = [uniq[0] - 1.0]
    cands += [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
    cands.append(uniq[-1] + 1.0)
    return cands


def classify_report(pairs: Sequence[tuple[float, int]],
                    threshold) -> ClassificationReport:
    """Score-threshold classification: predict true iff score >= t.

    ``threshold`` is a float, or "tune" to pick the accuracy-maximizing
    boundary over the given pairs (ties resolved to the smallest
    threshold). Tuning requires both classes to be present.
    """
    if not pairs:
        raise ValueError("classify_report with no scored pairs")
    if threshold == "tune":
        labels = {y for _, y in pairs}
        if labels != {0, 1}:
            raise ValueError(
                "threshold tuning needs both positive and negative examples")
        best = None
        for t in threshold_candidates([s for s, _ in pairs]):
            rep = _report_at(pairs, t)
            if best is None or rep.acc > best.acc:
                best = rep
        return best
    return _report_at(pairs, float(threshold))


def generate_candidates(conditioner, scorer, query, n: int) -> list[int]:
    """Top-n entities by stage-1 tail score for (h, r, ?), descending,
    ties by ascending entity id; n beyond the vocabulary returns all."""
    from .kg import Triple
    from .pretrain import row_chunks, score_triples

    n_ent = len(conditioner.g.entities)
    triples = [Triple(query.head, query.relation, e) for e in range(n_ent)]
    scores = np.empty(n_ent, dtype=np.float64)
    for lo, part in row_chunks(conditioner.g, triples):
        scores[lo:lo + len(part)] = \
            score_triples(conditioner, scorer, part).data[:, 0]
    order = sorted(range(n_ent), key=lambda e: (-scores[e], e))
    return order[:min(n, n_ent)]


def write_metrics_json(path: str, metrics: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=1, sort_keys=True)
        f.write("\n")


def write_metrics_csv(path: str, rows: Sequence[dict], fields: Sequence[str]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)

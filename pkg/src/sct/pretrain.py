"""Stage-1 training: graph conditioner + plausibility scorer.

Each positive triple is scored against k corrupted negatives with a
binary contrastive loss; entity representations mix a base embedding
with a projection of the side-restricted condition vector, so the
conditioner learns to summarize neighborhoods that make true triples
score high. Everything trains jointly under AdamW.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diff import (
    AdamW, ModelBundle, Tensor, broadcast_rows, concat, cos, embedding_gather,
    gelu, l2_norm, matmul, mean, sin, softplus, sum_,
)
from .evalkit import classify_report
from .kg import KnowledgeGraph, LabeledTriple, Triple
from .semantics import RelationSemanticTable
from .sgm import Conditioner, SgmConfig, init_sgm_params

log = logging.getLogger(__name__)

SCORING_KINDS = ("trilinear", "transe", "distmult", "complex", "rotate", "mlp")

# cap on summed scope rows forwarded at once; keeps peak activation
# memory bounded when hub entities make classify scopes very wide
CHUNK_ROWS = 32768


@dataclass
class PretrainConfig:
    epochs: int = 20
    scoring: str = "rotate"
    negatives: int = 16
    margin: float = 12.0          # rotate / distance-family offset
    d_e: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 32
    seed: int = 0


def init_scorer_params(bundle: ModelBundle, rng: np.random.Generator,
                       cfg: PretrainConfig, n_entities: int, n_relations: int,
                       d_s: int, d_c: int, prefix: str = "score."):
    if cfg.scoring not in SCORING_KINDS:
        raise ValueError(f"unknown scoring kind {cfg.scoring!r}")
    d_e = cfg.d_e
    if cfg.scoring in ("complex", "rotate") and d_e % 2:
        raise ValueError(f"{cfg.scoring} needs an even d_e, got {d_e}")
    span = (cfg.margin + 2.0) / d_e
    bundle.add(prefix + "entity",
               rng.uniform(-span, span, size=(n_entities, d_e)))
    bundle.add(prefix + "ctx_proj.w",
               rng.normal(0, 0.02, size=(d_c, d_e)).astype(np.float32))
    if cfg.scoring == "rotate":
        bundle.add(prefix + "phase",
                   rng.uniform(-np.pi, np.pi, size=(n_relations, d_e // 2)))
    else:
        bundle.add(prefix + "rel_proj.w",
                   rng.normal(0, d_s ** -0.5, size=(d_s, d_e)))
        bundle.add(prefix + "rel_proj.b", np.zeros(d_e))
    if cfg.scoring == "mlp":
        hid = 2 * d_e
        bundle.add(prefix + "mlp.w1",
                   rng.normal(0, (3 * d_e) ** -0.5, size=(3 * d_e, hid)))
        bundle.add(prefix + "mlp.b1", np.zeros(hid))
        bundle.add(prefix + "mlp.w2", rng.normal(0, hid ** -0.5, size=(hid, 1)))
        bundle.add(prefix + "mlp.b2", np.zeros(1))


class Scorer:
    """Batched triple scoring over contextualized entity embeddings."""

    def __init__(self, bundle: ModelBundle, sem: RelationSemanticTable,
                 cfg: PretrainConfig, prefix: str = "score."):
        self.bundle = bundle
        self.sem = sem
        self.cfg = cfg
        self.prefix = prefix
        self._sem_t = Tensor(sem.vectors)

    def _p(self, name: str) -> Tensor:
        return self.bundle[self.prefix + name]

    def entity_repr(self, ent_ids: np.ndarray, cond: Tensor) -> Tensor:
        """e_x = base(x) + ctx_proj(c_side); cond is (B, d_c)."""
        base = embedding_gather(self._p("entity"), ent_ids)
        return base + matmul(cond, self._p("ctx_proj.w"))

    def relation_vec(self, rel_ids: np.ndarray) -> Tensor:
        s = embedding_gather(self._sem_t, rel_ids)
        h = matmul(s, self._p("rel_proj.w"))
        return h + broadcast_rows(self._p("rel_proj.b"), h.shape[0])

    def score(self, h: Tensor, rel_ids: np.ndarray, t: Tensor) -> Tensor:
        """(B, 1) plausibility scores, higher = more plausible."""
        kind = self.cfg.scoring
        if kind == "trilinear" or kind == "distmult":
            # distmult differs only in owning a separate projection head;
            # both reduce to sum_i h_i r_i t_i
            r = self.relation_vec(rel_ids)
            return sum_(h * r * t, axis=1, keepdims=True)
        if kind == "transe":
            r = self.relation_vec(rel_ids)
            return -l2_norm(h + r - t, axis=1, keepdims=True)
        if kind == "complex":
            r = self.relation_vec(rel_ids)
            d2 = self.cfg.d_e // 2
            hr, hi = h[:, :d2], h[:, d2:]
            rr, ri = r[:, :d2], r[:, d2:]
            tr, ti = t[:, :d2], t[:, d2:]
            real = (hr * rr - hi * ri) * tr + (hr * ri + hi * rr) * ti
            return sum_(real, axis=1, keepdims=True)
        if kind == "rotate":
            rotated = self.rotate_apply(h, rel_ids)
            diff = rotated - t
            return -(l2_norm(diff, axis=1, keepdims=True)) + self.cfg.margin
        if kind == "mlp":
            r = self.relation_vec(rel_ids)
            x = concat([h, r, t], axis=1)
            hid = gelu(matmul(x, self._p("mlp.w1"))
                       + broadcast_rows(self._p("mlp.b1"), x.shape[0]))
            return matmul(hid, self._p("mlp.w2")) \
                + broadcast_rows(self._p("mlp.b2"), x.shape[0])
        raise ValueError(f"unknown scoring kind {kind!r}")

    def rotate_apply(self, h: Tensor, rel_ids: np.ndarray) -> Tensor:
        """Complex Hadamard rotation of h by per-relation unit phases.

        Layout: first d_e/2 columns real, last d_e/2 imaginary.
        """
        d2 = self.cfg.d_e // 2
        theta = embedding_gather(self._p("phase"), rel_ids)
        c, s = cos(theta), sin(theta)
        hr, hi = h[:, :d2], h[:, d2:]
        return concat([hr * c - hi * s, hr * s + hi * c], axis=1)


def corrupt(triple: Triple, n_entities: int, k: int,
            rng: np.random.Generator) -> list[Triple]:
    """k corruptions, each replacing head or tail (fair coin) with a
    uniform different entity; not filtered against known triples."""
    if n_entities < 2:
        raise ValueError("cannot corrupt triples over a single-entity graph")
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    for _ in range(k):
        side = int(rng.integers(0, 2))
        orig = triple.head if side == 0 else triple.tail
        repl = int(rng.integers(0, n_entities - 1))
        if repl >= orig:
            repl += 1
        out.append(Triple(repl, triple.relation, triple.tail) if side == 0
                   else Triple(triple.head, triple.relation, repl))
    return out


def pretrain_loss(pos: Tensor, neg: Tensor) -> Tensor:
    """Mean over the batch of -log sigma(pos) - sum log(1 - sigma(neg)).

    Uses the softplus identities -log sigma(x) = softplus(-x) and
    -log(1 - sigma(x)) = softplus(x), which are exact and need no
    epsilon clamp. ``neg`` may be (B, k) or the flattened (B*k, 1);
    only the per-batch sum enters the formula either way.
    """
    b = pos.shape[0]
    total = sum_(softplus(-pos)) + sum_(softplus(neg))
    return total * (1.0 / b)


def row_chunks(g: KnowledgeGraph, triples: Sequence[Triple],
               budget: int = CHUNK_ROWS):
    """Consecutive sublists whose summed scope-row estimates stay under
    ``budget`` (every chunk takes at least one triple)."""
    sizes = [len(g.incident(t.head)) + len(g.incident(t.tail)) + 1
             for t in triples]
    lo = 0
    while lo < len(triples):
        hi, rows = lo + 1, sizes[lo]
        while hi < len(triples) and rows + sizes[hi] <= budget:
            rows += sizes[hi]
            hi += 1
        yield lo, list(triples[lo:hi])
        lo = hi


def side_conditions(conditioner: Conditioner,
                    triples: Sequence[Triple]) -> tuple[Tensor, Tensor]:
    """(head_conds, tail_conds), each (B, d_c), classify-mode scoping
    with the query edge excluded."""
    reqs = []
    for t in triples:
        reqs.append((t, "classify", "head"))
        reqs.append((t, "classify", "tail"))
    both = conditioner.condition_batch(reqs)
    n = len(triples)
    rows = np.arange(2 * n, dtype=np.int64)
    return (embedding_gather(both, rows[0::2]),
            embedding_gather(both, rows[1::2]))


def score_triples(conditioner: Conditioner, scorer: Scorer,
                  triples: Sequence[Triple]) -> Tensor:
    """(B, 1) stage-1 scores with fresh side conditions."""
    ch, ct = side_conditions(conditioner, triples)
    h_ids = np.asarray([t.head for t in triples], dtype=np.int64)
    t_ids = np.asarray([t.tail for t in triples], dtype=np.int64)
    rel = np.asarray([t.relation for t in triples], dtype=np.int64)
    return scorer.score(scorer.entity_repr(h_ids, ch), rel,
                        scorer.entity_repr(t_ids, ct))


def labeled_scores(conditioner: Conditioner, scorer: Scorer,
                   labeled: Sequence[LabeledTriple]) -> np.ndarray:
    out = np.empty(len(labeled), dtype=np.float64)
    triples = [lt.triple for lt in labeled]
    for lo, part in row_chunks(conditioner.g, triples):
        s = score_triples(conditioner, scorer, part)
        out[lo:lo + len(part)] = s.data[:, 0]
    return out


def validation_accuracy(conditioner: Conditioner, scorer: Scorer,
                        labeled: Sequence[LabeledTriple]) -> float:
    scores = labeled_scores(conditioner, scorer, labeled)
    pairs = [(float(s), lt.label) for s, lt in zip(scores, labeled)]
    return classify_report(pairs, threshold="tune").acc


def pretrain(g: KnowledgeGraph, sem: RelationSemanticTable,
             sgm_cfg: SgmConfig, cfg: PretrainConfig,
             valid: Sequence[LabeledTriple] | None = None,
             log_path: str | None = None,
             bundle: ModelBundle | None = None
             ) -> tuple[ModelBundle, list[dict]]:
    """Full stage-1 loop; returns the trained bundle and per-epoch
    metrics [{epoch, mean_loss, val_accuracy, wall_ms}]."""
    rng = np.random.default_rng(cfg.seed)
    if bundle is None:
        bundle = ModelBundle()
        init_sgm_params(bundle, rng, sem.dim, sgm_cfg)
        init_scorer_params(bundle, rng, cfg, len(g.entities),
                           len(g.relations), sem.dim, sgm_cfg.d_c)
    conditioner = Conditioner(g, sem, bundle, sgm_cfg)
    scorer = Scorer(bundle, sem, cfg)
    opt = AdamW(bundle.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    n = len(g.triples)
    history: list[dict] = []
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            order = rng.permutation(n)
            losses = []
            for lo in range(0, n, cfg.batch_size):
                batch = [g.triples[i] for i in order[lo:lo + cfg.batch_size]]
                negs = []
                for t in batch:
                    negs.extend(corrupt(t, len(g.entities), cfg.negatives, rng))
                b = len(batch)
                # sign flips positives inside softplus: loss terms are
                # softplus(-pos) and softplus(neg)
                tagged = batch + negs
                signs = np.concatenate([np.full(b, -1.0, np.float32),
                                        np.ones(len(negs), np.float32)])
                opt.zero_grad()
                total = 0.0
                # micro-chunks bound live activations; grads accumulate
                # across backward calls, so the step is unchanged
                for at, part in row_chunks(g, tagged):
                    s = score_triples(conditioner, scorer, part)
                    signed = s * Tensor(signs[at:at + len(part)].reshape(-1, 1))
                    partial = sum_(softplus(signed)) * (1.0 / b)
                    partial.backward()
                    total += partial.item()
                opt.step()
                losses.append(total)
            entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                     "val_accuracy": None,
                     "wall_ms": int((time.monotonic() - t0) * 1000)}
            if valid:
                entry["val_accuracy"] = validation_accuracy(
                    conditioner, scorer, valid)
            history.append(entry)
            log.info("epoch %d mean_loss %.4f val_acc %s wall_ms %d",
                     epoch, entry["mean_loss"], entry["val_accuracy"],
                     entry["wall_ms"])
            if logf:
                logf.write(json.dumps(entry) + "\n")
                logf.flush()
    finally:
        if logf:
            logf.close()
    return bundle, history

"""Small decoder LM with LoRA adapters and condition-modulated prompts.

Prompt sequences follow the instruction + query + answer decomposition:
the instruction carries every fixed template sentence, the query span
is the textualized triple and is the only part whose embeddings get
feature-modulated, and the answer is the gold entity name or
"true"/"false". Stage-2 training freezes the graph conditioner and the
base LM and fits only the fusion projectors and the rank-r adapters on
the attention query/value projections.
"""
from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .diff import (
    AdamW, ModelBundle, ShapeError, Tensor, broadcast_rows, concat,
    embedding_gather, gelu, layer_norm, log_softmax, matmul, softmax, sum_,
    transpose,
)
from .fusion import compute_film, modulate
from .kg import Triple
from .sgm import Conditioner

log = logging.getLogger(__name__)

TASKS = ("link", "classify")

_PUNCT = re.compile(r"[^\w\s]")


def words(text: str) -> list[str]:
    """Lowercase, isolate punctuation, split on whitespace. Underscores
    count as word characters so snake_case names stay single tokens."""
    return _PUNCT.sub(lambda m: f" {m.group(0)} ", text.lower()).split()


class Tokenizer:
    """Word-level vocabulary with fixed reserved ids."""

    PAD, BOS, EOS, UNK = 0, 1, 2, 3
    RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, texts: Iterable[str] = ()):
        self._names: list[str] = list(self.RESERVED)
        self._index = {n: i for i, n in enumerate(self._names)}
        for t in texts:
            for w in words(t):
                if w not in self._index:
                    self._index[w] = len(self._names)
                    self._names.append(w)

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "Tokenizer":
        if tuple(names[:4]) != cls.RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        tok = cls()
        for n in names[4:]:
            tok._index[n] = len(tok._names)
            tok._names.append(n)
        return tok

    def names(self) -> list[str]:
        return list(self._names)

    def encode(self, text: str) -> list[int]:
        return [self._index.get(w, self.UNK) for w in words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self._names[int(i)] for i in ids)

    def __len__(self) -> int:
        return len(self._names)


# --- prompt templates ---

LINK_HEADER = (
    "Instruction: This is a knowledge graph completion task. Your goal is "
    "to predict the tail entity for an incomplete query triplet. "
    "Response Specification: Analyze the provided candidates and return a "
    "ranked list of the top three most likely answers, from most to least "
    "probable. Problem Definition: Candidate Entities: ")

CLASSIFY_INSTRUCTION = (
    "Instruction: This is a triple classification task in knowledge graph. "
    "Your goal is to determine the correctness of the given triple. "
    "Output: Please response True or False. Input: The triple is:")


@dataclass(frozen=True)
class PromptInstance:
    task: str
    instruction: str
    query: str
    answer: str


def render_prompt(task: str, head: str, relation: str, tail: str,
                  candidates: Sequence[str] | None = None,
                  label: int | None = None) -> PromptInstance:
    """Deterministic template rendering; the query text is kept separate
    so its token span can be modulated on its own."""
    if task == "link":
        if not candidates:
            raise ValueError("link prompts require a candidate list")
        instr = LINK_HEADER + "{" + ", ".join(candidates) + "}. Query:"
        return PromptInstance("link", instr, f"({head}, {relation}, ?)", tail)
    if task == "classify":
        if label not in (0, 1):
            raise ValueError("classify prompts require a 0/1 label")
        return PromptInstance("classify", CLASSIFY_INSTRUCTION,
                              f"({head}, {relation}, {tail})",
                              "true" if label else "false")
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def save_prompts(path: str, rows: Sequence[dict]):
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def load_prompts(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(json.loads(line))
    return out


@dataclass
class EncodedPrompt:
    ids: np.ndarray                # <bos> instruction query answer <eos>
    query_span: tuple[int, int]    # [lo, hi) token positions of the query
    answer_start: int              # first answer token position


def encode_instance(tok: Tokenizer, inst: PromptInstance) -> EncodedPrompt:
    i_ids = tok.encode(inst.instruction)
    q_ids = tok.encode(inst.query)
    a_ids = tok.encode(inst.answer)
    ids = np.asarray([tok.BOS] + i_ids + q_ids + a_ids + [tok.EOS],
                     dtype=np.int64)
    lo = 1 + len(i_ids)
    hi = lo + len(q_ids)
    return EncodedPrompt(ids, (lo, hi), hi)


# --- model ---

@dataclass
class LmConfig:
    n_layers: int = 2
    d_llm: int = 128
    n_heads: int = 4
    context: int = 256
    ffn_mult: int = 4
    lora_rank: int = 8


def init_lm_params(bundle: ModelBundle, rng: np.random.Generator,
                   vocab_size: int, cfg: LmConfig, prefix: str = "lm."):
    if cfg.d_llm % cfg.n_heads:
        raise ValueError(
            f"d_llm={cfg.d_llm} not divisible by n_heads={cfg.n_heads}")
    d, f = cfg.d_llm, cfg.ffn_mult * cfg.d_llm

    def norm(shape, scale):
        return rng.normal(0.0, scale, size=shape).astype(np.float32)

    # unit-norm-ish rows: the head is tied to this table, and with the
    # base frozen during adaptation the achievable logit range scales
    # with the embedding norm, so 0.02-style init would cap it
    bundle.add(prefix + "tok_emb", norm((vocab_size, d), d ** -0.5))
    bundle.add(prefix + "pos_emb", norm((cfg.context, d), d ** -0.5))
    for i in range(cfg.n_layers):
        p = f"{prefix}layer{i}."
        bundle.add(p + "ln1.g", np.ones(d))
        bundle.add(p + "ln1.b", np.zeros(d))
        for w in ("wq", "wk", "wv", "wo"):
            bundle.add(p + "attn." + w, norm((d, d), d ** -0.5))
        bundle.add(p + "ln2.g", np.ones(d))
        bundle.add(p + "ln2.b", np.zeros(d))
        bundle.add(p + "ffn.w1", norm((d, f), d ** -0.5))
        bundle.add(p + "ffn.b1", np.zeros(f))
        bundle.add(p + "ffn.w2", norm((f, d), f ** -0.5))
        bundle.add(p + "ffn.b2", np.zeros(d))
    bundle.add(prefix + "ln_f.g", np.ones(d))
    bundle.add(prefix + "ln_f.b", np.zeros(d))


def init_lora_params(bundle: ModelBundle, rng: np.random.Generator,
                     cfg: LmConfig, prefix: str = "lora."):
    # B starts at zero so the adapted weight equals the base weight
    d, r = cfg.d_llm, cfg.lora_rank
    for i in range(cfg.n_layers):
        for proj in ("q", "k", "v", "o"):
            p = f"{prefix}layer{i}.{proj}."
            bundle.add(p + "a",
                       rng.normal(0, 0.02, size=(d, r)).astype(np.float32))
            bundle.add(p + "b", np.zeros((r, d)))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    h = matmul(x, w)
    return h + broadcast_rows(b, h.shape[0])


def _block(bundle: ModelBundle, p: str, lp: str, x: Tensor, causal: Tensor,
           cfg: LmConfig, lora: bool) -> Tensor:
    h = layer_norm(x, bundle[p + "ln1.g"], bundle[p + "ln1.b"])

    def proj(name):
        out = matmul(h, bundle[p + "attn.w" + name])
        if lora:
            out = out + matmul(matmul(h, bundle[lp + name + ".a"]),
                               bundle[lp + name + ".b"])
        return out

    q, k, v = proj("q"), proj("k"), proj("v")
    dk = cfg.d_llm // cfg.n_heads
    heads = []
    for i in range(cfg.n_heads):
        sl = (slice(None), slice(i * dk, (i + 1) * dk))
        att = softmax(matmul(q[sl], transpose(k[sl])) * (dk ** -0.5) + causal,
                      axis=1)
        heads.append(matmul(att, v[sl]))
    merged = heads[0] if len(heads) == 1 else concat(heads, axis=1)
    o = matmul(merged, bundle[p + "attn.wo"])
    if lora:
        o = o + matmul(matmul(merged, bundle[lp + "o.a"]), bundle[lp + "o.b"])
    x = x + o
    h2 = layer_norm(x, bundle[p + "ln2.g"], bundle[p + "ln2.b"])
    f = gelu(_affine(h2, bundle[p + "ffn.w1"], bundle[p + "ffn.b1"]))
    return x + _affine(f, bundle[p + "ffn.w2"], bundle[p + "ffn.b2"])


def lm_forward(bundle: ModelBundle, ids, cfg: LmConfig,
               modulation: tuple[Tensor, Tensor, tuple[int, int]] | None = None,
               lora: bool = True, prefix: str = "lm.",
               lora_prefix: str = "lora.") -> Tensor:
    """(n, vocab) causal logits; the head is tied to the embedding.

    ``modulation`` is (gamma, beta, (lo, hi)): the token embeddings in
    [lo, hi) are gated before the first block, all others pass through.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("lm_forward", ids.shape)
    n = ids.size
    if n > cfg.context:
        raise ValueError(f"sequence length {n} exceeds context {cfg.context}")
    x = embedding_gather(bundle[prefix + "tok_emb"], ids) \
        + embedding_gather(bundle[prefix + "pos_emb"], np.arange(n))
    if modulation is not None:
        gamma, beta, (lo, hi) = modulation
        if not 0 <= lo <= hi <= n:
            raise ValueError(f"modulation span ({lo}, {hi}) outside 0..{n}")
        if hi > lo:
            parts = []
            if lo:
                parts.append(x[:lo])
            parts.append(modulate(x[lo:hi], gamma, beta))
            if hi < n:
                parts.append(x[hi:])
            x = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    causal = Tensor(np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1))
    for i in range(cfg.n_layers):
        x = _block(bundle, f"{prefix}layer{i}.", f"{lora_prefix}layer{i}.",
                   x, causal, cfg, lora)
    xf = layer_norm(x, bundle[prefix + "ln_f.g"], bundle[prefix + "ln_f.b"])
    return matmul(xf, transpose(bundle[prefix + "tok_emb"]))


def next_token_loss(logits: Tensor, targets, mask_mode: str = "all",
                    answer_start: int | None = None) -> Tensor:
    """Mean cross-entropy over unmasked target positions.

    ``targets`` is the input sequence shifted left by one; positions are
    target-indexed, so ``answer_start`` (required for ``answer_only``)
    is the first target position holding an answer token.
    """
    t = np.asarray(targets, dtype=np.int64)
    n, vocab = logits.shape
    if t.shape != (n,):
        raise ShapeError("next_token_loss", logits.shape, t.shape)
    if mask_mode == "all":
        m = np.ones(n, dtype=bool)
    elif mask_mode == "answer_only":
        if answer_start is None:
            raise ValueError("answer_only masking needs answer_start")
        m = np.arange(n) >= answer_start
    else:
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    if not m.any():
        raise ValueError("every position is masked out of the loss")
    lp = log_softmax(logits, axis=1)
    sel = np.zeros((n, vocab), dtype=np.float32)
    sel[m, t[m]] = -1.0 / float(m.sum())
    return sum_(lp * Tensor(sel))


# --- stage 2 ---

@dataclass
class FinetuneConfig:
    epochs: int = 4
    lr: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 12
    mask_mode: str = "all"
    seed: int = 0
    # False pins gamma=1, beta=0 (the no-fusion ablation): embeddings
    # pass to the blocks unmodulated
    fusion: bool = True


@dataclass
class _Prepared:
    enc: EncodedPrompt
    triple: Triple
    mode: str
    inst: PromptInstance


def prepare_rows(conditioner: Conditioner, tok: Tokenizer,
                 rows: Sequence[dict]) -> list[_Prepared]:
    g = conditioner.g
    out = []
    for r in rows:
        inst = render_prompt(r["task"], r["head"], r["relation"], r["tail"],
                             candidates=r.get("candidates"),
                             label=r.get("label"))
        enc = encode_instance(tok, inst)
        triple = Triple(g.entities.id(r["head"]), g.relations.id(r["relation"]),
                        g.entities.id(r["tail"]))
        mode = "predict_tail" if r["task"] == "link" else "classify"
        out.append(_Prepared(enc, triple, mode, inst))
    return out


def _frozen_with_grad(bundle: ModelBundle) -> list[str]:
    return [k for k, t in bundle.items()
            if not t.requires_grad and t.grad is not None]


def _batch_modulations(conditioner: Conditioner, bundle: ModelBundle,
                       batch: Sequence[_Prepared]):
    conds = conditioner.condition_batch([(p.triple, p.mode) for p in batch])
    gamma, beta = compute_film(conds, bundle)
    return [(gamma[i:i + 1], beta[i:i + 1], p.enc.query_span)
            for i, p in enumerate(batch)]


def finetune(bundle: ModelBundle, conditioner: Conditioner, lm_cfg: LmConfig,
             tok: Tokenizer, rows: Sequence[dict], cfg: FinetuneConfig,
             valid: Sequence[dict] | None = None,
             log_path: str | None = None) -> tuple[ModelBundle, list[dict]]:
    """Adapter/fusion fine-tuning with the conditioner and base LM frozen.

    Returns the bundle and per-epoch metrics
    [{epoch, mean_loss, val_accuracy, wall_ms}].
    """
    rng = np.random.default_rng(cfg.seed)
    prepared = prepare_rows(conditioner, tok, rows)
    keep = ("fusion.", "lora.") if cfg.fusion else ("lora.",)
    for name in bundle.names():
        if not name.startswith(keep):
            bundle.freeze(name)
    opt = AdamW(bundle.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    history: list[dict] = []
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            order = rng.permutation(len(prepared))
            losses = []
            for lo in range(0, len(prepared), cfg.batch_size):
                batch = [prepared[i] for i in order[lo:lo + cfg.batch_size]]
                opt.zero_grad()
                if cfg.fusion:
                    mods = _batch_modulations(conditioner, bundle, batch)
                else:
                    mods = [None] * len(batch)
                total = None
                for p, mod in zip(batch, mods):
                    logits = lm_forward(bundle, p.enc.ids[:-1], lm_cfg,
                                        modulation=mod)
                    loss = next_token_loss(
                        logits, p.enc.ids[1:], cfg.mask_mode,
                        answer_start=p.enc.answer_start - 1)
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(batch))
                total.backward()
                bad = _frozen_with_grad(bundle)
                if bad:
                    raise RuntimeError(
                        f"gradient reached frozen parameters: {bad}")
                opt.step()
                losses.append(total.item())
            entry = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                     "val_accuracy": None,
                     "wall_ms": int((time.monotonic() - t0) * 1000)}
            if valid:
                entry["val_accuracy"] = prompt_accuracy(
                    bundle, conditioner, lm_cfg, tok, valid,
                    fusion=cfg.fusion)
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


# --- inference ---

def _answer_logprob(bundle: ModelBundle, lm_cfg: LmConfig, tok: Tokenizer,
                    inst: PromptInstance, modulation) -> float:
    enc = encode_instance(tok, inst)
    logits = lm_forward(bundle, enc.ids[:-1], lm_cfg, modulation=modulation)
    lp = log_softmax(logits, axis=1).data
    t = enc.ids[1:]
    pos = np.arange(t.size) >= enc.answer_start - 1
    return float(lp[pos, t[pos]].sum())


def score_answer(bundle: ModelBundle, lm_cfg: LmConfig, tok: Tokenizer,
                 inst: PromptInstance, candidates: Sequence[str],
                 modulation=None) -> list[tuple[str, float]]:
    """Teacher-forced answer log-likelihoods, best first; ties keep the
    earlier candidate first."""
    if not candidates:
        raise ValueError("score_answer needs at least one candidate")
    scores = []
    for cand in candidates:
        probe = PromptInstance(inst.task, inst.instruction, inst.query, cand)
        scores.append(_answer_logprob(bundle, lm_cfg, tok, probe, modulation))
    order = sorted(range(len(candidates)), key=lambda j: (-scores[j], j))
    return [(candidates[j], scores[j]) for j in order]


def generate(bundle: ModelBundle, lm_cfg: LmConfig, tok: Tokenizer,
             inst: PromptInstance, modulation=None, max_new: int = 16) -> str:
    """Greedy decoding of the answer span."""
    prefix = [tok.BOS] + tok.encode(inst.instruction) + tok.encode(inst.query)
    ids = list(prefix)
    for _ in range(max_new):
        if len(ids) >= lm_cfg.context:
            break
        logits = lm_forward(bundle, ids, lm_cfg, modulation=modulation)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == tok.EOS:
            break
        ids.append(nxt)
    return tok.decode(ids[len(prefix):])


def query_condition_mode(task: str) -> str:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return "predict_tail" if task == "link" else "classify"


def prompt_modulation(bundle: ModelBundle, conditioner: Conditioner,
                      tok: Tokenizer, row: dict):
    """(gamma, beta, span) for one prompt row, or the pieces needed to
    score it: returns (inst, modulation)."""
    g = conditioner.g
    inst = render_prompt(row["task"], row["head"], row["relation"],
                         row["tail"], candidates=row.get("candidates"),
                         label=row.get("label"))
    enc = encode_instance(tok, inst)
    triple = Triple(g.entities.id(row["head"]),
                    g.relations.id(row["relation"]),
                    g.entities.id(row["tail"]))
    cond = conditioner.condition(triple, query_condition_mode(row["task"]))
    gamma, beta = compute_film(cond, bundle)
    return inst, (gamma, beta, enc.query_span)


def prompt_accuracy(bundle: ModelBundle, conditioner: Conditioner,
                    lm_cfg: LmConfig, tok: Tokenizer, rows: Sequence[dict],
                    fusion: bool = True) -> float:
    """Fraction of rows whose gold answer outranks the alternatives:
    true/false for classification, the candidate list for link rows."""
    hits = 0
    for row in rows:
        inst, mod = prompt_modulation(bundle, conditioner, tok, row)
        if not fusion:
            mod = None
        cands = (["true", "false"] if row["task"] == "classify"
                 else list(row["candidates"]))
        best = score_answer(bundle, lm_cfg, tok, inst, cands, modulation=mod)
        hits += best[0][0] == inst.answer
    return hits / len(rows)

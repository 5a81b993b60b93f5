"""Pipeline entry point.

Subcommands cover the full two-stage flow: enhance relation
descriptions, embed them, pretrain the graph conditioner, fine-tune
adapters and fusion projectors, then evaluate, predict, or inspect.
Exit codes: 0 success, 1 usage error, 2 runtime error. Artifacts land
under the configured output directory; each producing subcommand
writes an atomic manifest there.
"""
from __future__ import annotations

import argparse
import importlib.resources
import json
import os
import sys
import time

import numpy as np

from .config import (
    ConfigError, RunConfig, RunManifest, config_to_dict, load_config,
    version_string, write_manifest,
)
from .diff import ModelBundle
from .evalkit import (
    classify_report, generate_candidates, mrr_hits, rank_gold,
    write_metrics_csv, write_metrics_json,
)
from .fusion import FusionConfig, init_fusion_params
from .kg import KnowledgeGraph, SplitFormatError, Triple, make_labeled_split
from .lm import (
    Tokenizer, finetune, generate, init_lm_params, init_lora_params,
    load_prompts, prompt_modulation, render_prompt, save_prompts,
    score_answer,
)
from .pretrain import Scorer, labeled_scores, pretrain, score_triples
from .semantics import (
    DescriptionCache, ProviderError, RelationSemanticTable, RemoteProvider,
    build_semantic_table, enhance_relations, fallback_description,
    naturalize,
)
from .sgm import Conditioner
from .synth import (
    classification_rows, labeled_classification_rows, link_rows, load_dataset,
)


class CliError(RuntimeError):
    pass


# --- artifact plumbing ---

def _paths(cfg: RunConfig) -> dict[str, str]:
    out = cfg.out_dir
    return {
        "descriptions": os.path.join(out, "descriptions.jsonl"),
        "semantics": os.path.join(out, "semantics.npy"),
        "stage1": os.path.join(out, "stage1.bin"),
        "stage2": os.path.join(out, "stage2.bin"),
        "tokenizer": os.path.join(out, "tokenizer.json"),
        "prompts": os.path.join(out, "prompts.jsonl"),
        "pretrain_log": os.path.join(out, "pretrain_log.jsonl"),
        "finetune_log": os.path.join(out, "finetune_log.jsonl"),
        "ranking_json": os.path.join(out, "metrics_ranking.json"),
        "ranking_csv": os.path.join(out, "metrics_ranking.csv"),
        "classification_json": os.path.join(out,
                                            "metrics_classification.json"),
        "report": os.path.join(out, "report.json"),
    }


def _data_dir(cfg: RunConfig) -> str:
    if os.path.isdir(cfg.dataset):
        return cfg.dataset
    bundled = importlib.resources.files("sct") / "data" / cfg.dataset
    if bundled.is_dir():
        return str(bundled)
    raise CliError(f"dataset {cfg.dataset!r} is neither a directory nor a "
                   "bundled dataset name")


def _require(path: str, producer: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"missing {path}; run `sct {producer}` first")
    return path


def _provider(cfg: RunConfig) -> RemoteProvider | None:
    return RemoteProvider() if cfg.provider == "remote" else None


def _semantics(cfg: RunConfig, paths: dict) -> RelationSemanticTable:
    return RelationSemanticTable.load(_require(paths["semantics"], "embed"))


def _all_triples(splits) -> frozenset[Triple]:
    out = set()
    for g in splits:
        if g is not None:
            out.update(g.triples)
    return frozenset(out)


def _labeled(split: KnowledgeGraph, known: frozenset, n_entities: int,
             seed: int):
    return make_labeled_split(split.triples, known, n_entities,
                              np.random.default_rng(seed))


# --- subcommands; each returns (artifacts, metrics) ---

def cmd_enhance(cfg: RunConfig, args) -> tuple[dict, dict]:
    _, _, _, _, rels = load_dataset(_data_dir(cfg))
    paths = _paths(cfg)
    cache = DescriptionCache(paths["descriptions"])
    recs = enhance_relations(rels.names(), cache, _provider(cfg))
    sources = sorted({r.source for r in recs})
    print(f"described {len(recs)} relations ({', '.join(sources)}) "
          f"-> {paths['descriptions']}")
    return ({"descriptions": paths["descriptions"]},
            {"relations": len(recs), "sources": sources})


def _relation_texts(cfg: RunConfig, rel_names, paths: dict) -> list[str]:
    if not cfg.use_descriptions:
        return [naturalize(n) for n in rel_names]
    cache = (DescriptionCache(paths["descriptions"])
             if os.path.exists(paths["descriptions"]) else None)
    texts = []
    for name in rel_names:
        rec = cache.get(name) if cache else None
        texts.append(rec.description if rec else fallback_description(name))
    return texts


def cmd_embed(cfg: RunConfig, args) -> tuple[dict, dict]:
    _, _, _, _, rels = load_dataset(_data_dir(cfg))
    paths = _paths(cfg)
    texts = _relation_texts(cfg, rels.names(), paths)
    sem = build_semantic_table(texts, cfg.embed_dim, _provider(cfg))
    sem.save(paths["semantics"])
    print(f"embedded {len(sem)} relations at dim {sem.dim} "
          f"-> {paths['semantics']}")
    return ({"semantics": paths["semantics"]},
            {"relations": len(sem), "dim": sem.dim})


def cmd_pretrain(cfg: RunConfig, args) -> tuple[dict, dict]:
    train, valid, test, ents, rels = load_dataset(_data_dir(cfg))
    paths = _paths(cfg)
    sem = _semantics(cfg, paths)
    labeled_valid = None
    if valid is not None:
        known = _all_triples((train, valid, test))
        labeled_valid = _labeled(valid, known, len(ents), cfg.seed + 101)
    bundle, history = pretrain(train, sem, cfg.sgm, cfg.pretrain,
                               valid=labeled_valid,
                               log_path=paths["pretrain_log"])
    bundle.save(paths["stage1"])
    last = history[-1] if history else {}
    print(f"stage 1 done: {len(history)} epochs, "
          f"final loss {last.get('mean_loss', float('nan')):.4f}, "
          f"val acc {last.get('val_accuracy')}")
    return ({"stage1": paths["stage1"], "log": paths["pretrain_log"]},
            {"epochs": len(history), "final": last})


def _conditioner(cfg: RunConfig, bundle: ModelBundle, train, sem):
    return Conditioner(train, sem, bundle, cfg.sgm)


def cmd_finetune(cfg: RunConfig, args) -> tuple[dict, dict]:
    train, valid, test, ents, rels = load_dataset(_data_dir(cfg))
    paths = _paths(cfg)
    sem = _semantics(cfg, paths)
    bundle = ModelBundle.load(_require(paths["stage1"], "pretrain"))
    conditioner = _conditioner(cfg, bundle, train, sem)
    scorer = Scorer(bundle, sem, cfg.pretrain)

    known = _all_triples((train, valid, test))
    rows = labeled_classification_rows(
        train, train.triples, known, np.random.default_rng(cfg.seed + 303))
    rows += link_rows(
        train, train.triples,
        lambda t: generate_candidates(conditioner, scorer, t,
                                      cfg.n_candidates),
        cfg.n_candidates)
    valid_rows = None
    if valid is not None:
        valid_rows = classification_rows(
            train, _labeled(valid, known, len(ents), cfg.seed + 101))

    texts = []
    for r in rows + (valid_rows or []):
        inst = render_prompt(r["task"], r["head"], r["relation"], r["tail"],
                             candidates=r.get("candidates"),
                             label=r.get("label"))
        texts += [inst.instruction, inst.query, inst.answer]
    tok = Tokenizer(texts)

    rng = np.random.default_rng(cfg.seed)
    init_lm_params(bundle, rng, len(tok), cfg.lm)
    init_lora_params(bundle, rng, cfg.lm)
    init_fusion_params(bundle, rng,
                       FusionConfig(d_c=cfg.sgm.d_c, d_llm=cfg.lm.d_llm))

    _, history = finetune(bundle, conditioner, cfg.lm, tok, rows,
                          cfg.finetune, valid=valid_rows,
                          log_path=paths["finetune_log"])
    bundle.save(paths["stage2"])
    save_prompts(paths["prompts"], rows)
    with open(paths["tokenizer"], "w", encoding="utf-8") as f:
        json.dump({"names": tok.names()}, f)
    last = history[-1] if history else {}
    print(f"stage 2 done: {len(history)} epochs over {len(rows)} prompts, "
          f"final loss {last.get('mean_loss', float('nan')):.4f}, "
          f"val acc {last.get('val_accuracy')}")
    return ({"stage2": paths["stage2"], "tokenizer": paths["tokenizer"],
             "prompts": paths["prompts"], "log": paths["finetune_log"]},
            {"epochs": len(history), "prompts": len(rows), "final": last})


def cmd_eval(cfg: RunConfig, args) -> tuple[dict, dict]:
    train, valid, test, ents, rels = load_dataset(_data_dir(cfg))
    paths = _paths(cfg)
    sem = _semantics(cfg, paths)
    bundle = ModelBundle.load(_require(paths["stage1"], "pretrain"))
    conditioner = _conditioner(cfg, bundle, train, sem)
    scorer = Scorer(bundle, sem, cfg.pretrain)
    artifacts, metrics = {}, {}

    if test is not None:
        ranks = []
        for q in test.triples:
            cands = generate_candidates(conditioner, scorer, q,
                                        cfg.n_candidates)
            scores = score_triples(
                conditioner, scorer,
                [Triple(q.head, q.relation, e) for e in cands]).data[:, 0]
            ranks.append(rank_gold(
                {e: float(s) for e, s in zip(cands, scores)}, q.tail))
        rr = mrr_hits(ranks)
        row = {"dataset": cfg.dataset, "task": "link", "split": "test",
               "top_k": cfg.sgm.top_k, "MRR": rr.mrr, "hits1": rr.hits[1],
               "hits3": rr.hits[3], "hits10": rr.hits[10]}
        write_metrics_json(paths["ranking_json"], row)
        write_metrics_csv(paths["ranking_csv"], [row], list(row))
        artifacts["ranking"] = paths["ranking_json"]
        metrics["ranking"] = row
        print(f"link test: MRR {rr.mrr:.4f} hits@1 {rr.hits[1]:.4f} "
              f"hits@10 {rr.hits[10]:.4f} (top_k={cfg.sgm.top_k})")

    if valid is not None and test is not None:
        known = _all_triples((train, valid, test))

        def scored_pairs(split, seed):
            labeled = _labeled(split, known, len(ents), seed)
            scores = labeled_scores(conditioner, scorer, labeled)
            return [(float(s), lt.label) for s, lt in zip(scores, labeled)]

        pairs_valid = scored_pairs(valid, cfg.seed + 101)
        pairs_test = scored_pairs(test, cfg.seed + 202)
        tuned = classify_report(pairs_valid, "tune")
        rep = classify_report(pairs_test, tuned.threshold)
        blob = {"dataset": cfg.dataset, "task": "classify", "split": "test",
                "Acc": rep.acc, "P": rep.precision, "R": rep.recall,
                "F1": rep.f1, "threshold": rep.threshold}
        write_metrics_json(paths["classification_json"], blob)
        artifacts["classification"] = paths["classification_json"]
        metrics["classification"] = blob
        print(f"classify test: acc {rep.acc:.4f} F1 {rep.f1:.4f} "
              f"(threshold {rep.threshold:.4f})")

    if not metrics:
        raise CliError("nothing to evaluate: dataset has no valid/test split")
    return artifacts, metrics


def _load_stage2(cfg: RunConfig, paths: dict):
    train, valid, test, ents, rels = load_dataset(_data_dir(cfg))
    sem = _semantics(cfg, paths)
    bundle = ModelBundle.load(_require(paths["stage2"], "finetune"))
    with open(_require(paths["tokenizer"], "finetune"), encoding="utf-8") as f:
        tok = Tokenizer.from_names(json.load(f)["names"])
    return train, ents, rels, sem, bundle, tok


def cmd_predict(cfg: RunConfig, args) -> tuple[dict, dict]:
    paths = _paths(cfg)
    train, ents, rels, sem, bundle, tok = _load_stage2(cfg, paths)
    conditioner = _conditioner(cfg, bundle, train, sem)
    if args.head not in ents or args.relation not in rels:
        raise CliError(f"unknown head or relation; entities are "
                       f"{', '.join(ents.names())} and relations are "
                       f"{', '.join(rels.names())}")
    if args.task == "classify":
        if args.tail is None:
            raise CliError("classify prediction needs --tail")
        row = {"task": "classify", "head": args.head,
               "relation": args.relation, "tail": args.tail, "label": 1}
        candidates = ["true", "false"]
    else:
        scorer = Scorer(bundle, sem, cfg.pretrain)
        query = Triple(ents.id(args.head), rels.id(args.relation),
                       ents.id(args.tail if args.tail else args.head))
        cand_ids = generate_candidates(conditioner, scorer, query,
                                       cfg.n_candidates)
        candidates = [ents.name(e) for e in cand_ids]
        row = {"task": "link", "head": args.head, "relation": args.relation,
               "tail": args.tail if args.tail else args.head,
               "candidates": candidates}
    inst, mod = prompt_modulation(bundle, conditioner, tok, row)
    ranked = score_answer(bundle, cfg.lm, tok, inst, candidates,
                          modulation=mod)
    answer = generate(bundle, cfg.lm, tok, inst, modulation=mod)
    print(json.dumps({"task": args.task, "query": inst.query,
                      "generated": answer,
                      "ranked": [[c, s] for c, s in ranked]}, indent=1))
    return {}, {}


def cmd_inspect_neighbors(cfg: RunConfig, args) -> tuple[dict, dict]:
    _, _, _, _, rels = load_dataset(_data_dir(cfg))
    paths = _paths(cfg)
    if args.relation not in rels:
        raise CliError(f"unknown relation {args.relation!r}; have "
                       + ", ".join(rels.names()))
    names = rels.names()
    name_tab = build_semantic_table([naturalize(n) for n in names],
                                    cfg.embed_dim)
    desc_tab = build_semantic_table(_relation_texts(cfg, names, paths),
                                    cfg.embed_dim)
    rid = rels.id(args.relation)
    from .semantics import cosine

    def ranked(tab):
        others = [r for r in range(len(names)) if r != rid]
        scored = [(cosine(tab.vector(rid), tab.vector(r)), r) for r in others]
        scored.sort(key=lambda p: (-p[0], p[1]))
        return scored[:args.k]

    left, right = ranked(name_tab), ranked(desc_tab)
    print(f"top-{args.k} neighbors of {args.relation!r} "
          "(name embedding | description embedding)")
    for i in range(max(len(left), len(right))):
        ln = (f"{names[left[i][1]]} ({left[i][0]:+.3f})"
              if i < len(left) else "")
        rn = (f"{names[right[i][1]]} ({right[i][0]:+.3f})"
              if i < len(right) else "")
        print(f"  {i + 1}. {ln:<40} | {rn}")
    return {}, {}


def cmd_report(cfg: RunConfig, args) -> tuple[dict, dict]:
    paths = _paths(cfg)
    combined = {}
    for key, path in (("ranking", paths["ranking_json"]),
                      ("classification", paths["classification_json"])):
        if os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                combined[key] = json.load(f)
    for key, path in (("pretrain", paths["pretrain_log"]),
                      ("finetune", paths["finetune_log"])):
        if os.path.exists(path):
            lines = [json.loads(x) for x in open(path, encoding="utf-8")
                     if x.strip()]
            if lines:
                combined[key] = lines[-1]
    if not combined:
        raise CliError(f"no artifacts under {cfg.out_dir} to report on")
    write_metrics_json(paths["report"], combined)
    for key, blob in combined.items():
        print(f"{key}: " + json.dumps(blob, sort_keys=True))
    return {"report": paths["report"]}, combined


# --- wiring ---

_MANIFEST_COMMANDS = ("enhance", "embed", "pretrain", "finetune", "eval")

_FLAG_TARGETS = {
    "seed": "seed",
    "out": "out_dir",
    "dataset": "dataset",
    "scoring": "pretrain.scoring",
    "topk": "sgm.top_k",
    "mask_mode": "finetune.mask_mode",
    "provider": "provider",
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--dataset", metavar="NAME")
    common.add_argument("--scoring", choices=(
        "trilinear", "transe", "distmult", "complex", "rotate", "mlp"))
    common.add_argument("--topk", type=int)
    common.add_argument("--mask-mode", dest="mask_mode",
                        choices=("all", "answer-only"))
    common.add_argument("--provider", choices=("remote", "fallback"))

    p = argparse.ArgumentParser(
        prog="sct",
        description="Two-stage semantic-condition tuning pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (("enhance", cmd_enhance), ("embed", cmd_embed),
                     ("pretrain", cmd_pretrain), ("finetune", cmd_finetune),
                     ("eval", cmd_eval), ("report", cmd_report)):
        sub.add_parser(name, parents=[common]).set_defaults(func=fn)
    pp = sub.add_parser("predict", parents=[common])
    pp.add_argument("--task", choices=("link", "classify"), default="link")
    pp.add_argument("--head", required=True)
    pp.add_argument("--relation", required=True)
    pp.add_argument("--tail")
    pp.set_defaults(func=cmd_predict)
    ip = sub.add_parser("inspect-neighbors", parents=[common])
    ip.add_argument("--relation", required=True)
    ip.add_argument("--k", type=int, default=5)
    ip.set_defaults(func=cmd_inspect_neighbors)
    return p


def _config_of(args) -> RunConfig:
    overrides = {}
    for flag, dotted in _FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is not None:
            if flag == "mask_mode":
                value = value.replace("-", "_")
            overrides[dotted] = value
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = _config_of(args)
        os.makedirs(cfg.out_dir, exist_ok=True)
        started = time.time()
        artifacts, metrics = args.func(cfg, args)
        if args.command in _MANIFEST_COMMANDS:
            manifest = RunManifest(
                command=args.command, config=config_to_dict(cfg),
                version=version_string(), seed=cfg.seed, started=started,
                finished=time.time(), artifacts=artifacts, metrics=metrics)
            write_manifest(os.path.join(
                cfg.out_dir, f"manifest_{args.command}.json"), manifest)
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

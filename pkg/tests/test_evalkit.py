import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sct.evalkit import (
    classify_report, mrr_hits, rank_gold, threshold_candidates,
    write_metrics_csv, write_metrics_json,
)


def test_mrr_hits_known_values():
    r = mrr_hits([1, 2, 4], ns=(1, 3, 10))
    assert r.mrr == pytest.approx(7 / 12)
    assert r.hits[1] == pytest.approx(1 / 3)
    assert r.hits[3] == pytest.approx(2 / 3)
    assert r.hits[10] == 1.0


def test_mrr_all_ones():
    r = mrr_hits([1] * 7)
    assert r.mrr == 1.0
    assert all(v == 1.0 for v in r.hits.values())


def test_mrr_constant_rank_is_reciprocal():
    assert mrr_hits([4, 4, 4, 4]).mrr == pytest.approx(0.25)


def test_mrr_errors():
    with pytest.raises(ValueError):
        mrr_hits([])
    with pytest.raises(ValueError):
        mrr_hits([1, 0])


def _mrr_oracle(ranks, ns):
    # independent implementation: numpy reductions
    a = np.asarray(ranks, dtype=np.float64)
    return float((1.0 / a).mean()), {n: float((a <= n).mean()) for n in ns}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40),
       st.integers(0, 10 ** 6))
def test_mrr_matches_independent_oracle(ranks, _seed):
    got = mrr_hits(ranks, ns=(1, 3, 10))
    mrr, hits = _mrr_oracle(ranks, (1, 3, 10))
    assert got.mrr == pytest.approx(mrr, abs=1e-12)
    for n in (1, 3, 10):
        assert got.hits[n] == pytest.approx(hits[n], abs=1e-12)


def test_rank_gold_basics():
    assert rank_gold({"a": 3.0, "b": 2.0, "c": 1.0}, "a") == 1
    # pessimistic: tie with one other -> 2
    assert rank_gold({"a": 2.0, "b": 2.0, "c": 1.0}, "a") == 2
    assert rank_gold({chr(97 + i): float(i) for i in range(20)}, "zz") == 21
    with pytest.raises(ValueError):
        rank_gold({}, "a")


def test_rank_gold_monotone_in_gold_score():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        scores = {i: float(rng.normal()) for i in range(n)}
        gold = int(rng.integers(n))
        r1 = rank_gold(scores, gold)
        scores[gold] += float(rng.uniform(0, 2))
        assert rank_gold(scores, gold) <= r1


def _rank_oracle(scores, gold):
    if gold not in scores:
        return len(scores) + 1
    # pessimistic tie handling: gold goes after every tied competitor
    gs = scores[gold]
    return 1 + sum(1 for c, s in scores.items() if c != gold and s >= gs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_rank_gold_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 15))
    # quantized scores force ties regularly
    scores = {i: float(np.round(rng.normal(), 1)) for i in range(n)}
    gold = int(rng.integers(n))
    assert rank_gold(scores, gold) == _rank_oracle(scores, gold)


def test_classify_report_fixed_counts():
    pairs = ([(0.9, 1)] * 3 + [(0.8, 0)] + [(0.2, 1)] + [(0.1, 0)] * 5)
    rep = classify_report(pairs, threshold=0.5)
    assert (rep.tp, rep.fp, rep.fn, rep.tn) == (3, 1, 1, 5)
    assert rep.acc == pytest.approx(0.8)
    assert rep.precision == pytest.approx(0.75)
    assert rep.recall == pytest.approx(0.75)
    assert rep.f1 == pytest.approx(0.75)


def test_classify_report_perfect_separation_tunes_to_acc_1():
    pairs = [(1.0 + i, 1) for i in range(5)] + [(-1.0 - i, 0) for i in range(5)]
    rep = classify_report(pairs, threshold="tune")
    assert rep.acc == 1.0
    assert -1.0 < rep.threshold <= 1.0


def test_classify_report_tuning_needs_both_classes():
    with pytest.raises(ValueError, match="both"):
        classify_report([(0.5, 1), (0.4, 1)], threshold="tune")
    # fixed threshold is fine on one class
    rep = classify_report([(0.5, 1), (0.4, 1)], threshold=0.45)
    assert rep.tp == 1 and rep.fn == 1


def test_classify_report_empty_errors():
    with pytest.raises(ValueError):
        classify_report([], threshold=0.0)


def _sweep_oracle(pairs):
    best_acc, best_t = -1.0, None
    for t in threshold_candidates([s for s, _ in pairs]):
        acc = sum(1 for s, y in pairs if (s >= t) == bool(y)) / len(pairs)
        if acc > best_acc or (acc == best_acc and t < best_t):
            best_acc, best_t = acc, t
    return best_acc, best_t


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_tuned_threshold_matches_sweep_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 50))
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = np.round(rng.normal(labels.astype(float), 1.0), 2)
    pairs = [(float(s), int(y)) for s, y in zip(scores, labels)]
    rep = classify_report(pairs, threshold="tune")
    acc, t = _sweep_oracle(pairs)
    assert rep.acc == pytest.approx(acc, abs=1e-12)
    assert rep.threshold == pytest.approx(t, abs=1e-12)
    # tuned accuracy dominates every candidate threshold
    for cand in threshold_candidates([s for s, _ in pairs]):
        assert rep.acc >= classify_report(pairs, threshold=cand).acc


def test_metrics_json_byte_stable(tmp_path):
    m = {"MRR": 0.5, "hits1": 0.25, "dataset": "synthetic"}
    p1, p2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    write_metrics_json(p1, m)
    write_metrics_json(p2, dict(reversed(list(m.items()))))
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_metrics_csv_layout(tmp_path):
    p = str(tmp_path / "m.csv")
    write_metrics_csv(p, [{"K": 4, "MRR": 0.5}, {"K": 10, "MRR": 0.75}],
                      fields=["K", "MRR"])
    assert open(p, "rb").read() == b"K,MRR\n4,0.5\n10,0.75\n"


# --- candidate generation ---

def _stage1_setup(seed, n_ent=9, n_rel=3, n_edges=16):
    from sct.diff import ModelBundle
    from sct.kg import KnowledgeGraph, Triple, Vocab
    from sct.pretrain import PretrainConfig, Scorer, init_scorer_params
    from sct.semantics import RelationSemanticTable
    from sct.sgm import Conditioner, SgmConfig, init_sgm_params

    rng = np.random.default_rng(seed)
    seen, triples = set(), []
    while len(triples) < n_edges:
        t = (int(rng.integers(n_ent)), int(rng.integers(n_rel)),
             int(rng.integers(n_ent)))
        if t in seen or t[0] == t[2]:
            continue
        seen.add(t)
        triples.append(Triple(*t))
    g = KnowledgeGraph(Vocab(f"e{i}" for i in range(n_ent)),
                       Vocab(f"r{i}" for i in range(n_rel)), triples)
    sem = RelationSemanticTable(rng.normal(size=(n_rel, 5)).astype(np.float32))
    scfg = SgmConfig(layers=1, top_k=4, d_h=8, n_heads=2, d_c=4, ffn_mult=2)
    pcfg = PretrainConfig(d_e=8, scoring="distmult")
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, 5, scfg)
    init_scorer_params(bundle, rng, pcfg, n_ent, n_rel, 5, scfg.d_c)
    return Conditioner(g, sem, bundle, scfg), Scorer(bundle, sem, pcfg), g


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_generate_candidates_matches_per_entity_oracle(seed):
    from sct.evalkit import generate_candidates
    from sct.kg import Triple
    from sct.pretrain import score_triples

    conditioner, scorer, g = _stage1_setup(seed)
    n_ent = len(g.entities)
    rng = np.random.default_rng(seed + 50)
    for _ in range(4):
        q = g.triples[int(rng.integers(len(g.triples)))]
        got = generate_candidates(conditioner, scorer, q, 5)
        # oracle: score every entity one query at a time
        scores = [float(score_triples(conditioner, scorer,
                                      [Triple(q.head, q.relation, e)]
                                      ).data[0, 0])
                  for e in range(n_ent)]
        want = sorted(range(n_ent), key=lambda e: (-scores[e], e))[:5]
        assert got == want


def test_generate_candidates_full_vocab_is_permutation():
    from sct.evalkit import generate_candidates

    conditioner, scorer, g = _stage1_setup(7)
    got = generate_candidates(conditioner, scorer, g.triples[0],
                              len(g.entities) + 40)
    assert sorted(got) == list(range(len(g.entities)))
    again = generate_candidates(conditioner, scorer, g.triples[0],
                                len(g.entities) + 40)
    assert got == again

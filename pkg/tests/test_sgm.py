import numpy as np
import pytest

from sct.diff import ModelBundle, Tensor, grad_check, sum_
from sct.kg import KnowledgeGraph, Triple, Vocab, neighbors_of_edge
from sct.semantics import RelationSemanticTable, build_semantic_table, cosine
from sct.sgm import (
    Conditioner, SgmConfig, condition_vector, init_sgm_params, query_scope,
    topk_neighbors,
)


def graph_from(triple_ids, n_ent, n_rel):
    ents = Vocab(f"e{i}" for i in range(n_ent))
    rels = Vocab(f"r{i}" for i in range(n_rel))
    return KnowledgeGraph(ents, rels, [Triple(*t) for t in triple_ids])


def random_setup(seed=0, n_ent=10, n_rel=5, n_edges=24, d_s=24, cfg=None):
    rng = np.random.default_rng(seed)
    seen, triples = set(), []
    while len(triples) < n_edges:
        t = (int(rng.integers(n_ent)), int(rng.integers(n_rel)),
             int(rng.integers(n_ent)))
        if t in seen or t[0] == t[2]:
            continue
        seen.add(t)
        triples.append(t)
    g = graph_from(triples, n_ent, n_rel)
    sem = RelationSemanticTable(
        rng.normal(size=(n_rel, d_s)).astype(np.float32))
    cfg = cfg or SgmConfig(layers=2, top_k=4, d_h=16, n_heads=2, d_c=8)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, d_s, cfg)
    return g, sem, bundle, cfg


# --- scoping and masking ---

FAN = [
    (0, 0, 1),  # 0
    (0, 1, 2),  # 1
    (3, 2, 0),  # 2
    (1, 1, 2),  # 3  not incident to 0
    (4, 0, 3),  # 4  not incident to 0
]


def test_query_scope_modes():
    g = graph_from(FAN, 5, 3)
    q = Triple(0, 2, 4)  # not an edge of g
    assert query_scope(g, q, "predict_tail") == [0, 1, 2]   # edges at head 0
    assert query_scope(g, q, "predict_head") == [4]         # edges at tail 4
    assert query_scope(g, q, "classify") == [0, 1, 2, 4]    # union


def test_query_scope_masks_the_query_edge_itself():
    g = graph_from(FAN, 5, 3)
    q = Triple(0, 0, 1)  # this is edge 0
    for mode in ("predict_tail", "predict_head", "classify"):
        assert 0 not in query_scope(g, q, mode)
    # but a different relation between the same endpoints stays visible
    q2 = Triple(0, 1, 1)
    assert 0 in query_scope(g, q2, "predict_tail")


def test_query_scope_rejects_unknown_mode():
    g = graph_from(FAN, 5, 3)
    with pytest.raises(ValueError, match="mode"):
        query_scope(g, Triple(0, 0, 1), "rank")


# --- top-k selection ---

def test_topk_matches_full_sort_oracle():
    rng = np.random.default_rng(3)
    g, sem, bundle, cfg = random_setup(seed=3)
    for center in range(len(g)):
        cands = [e for e in range(len(g)) if e != center]
        for k in (1, 3, 7, 100):
            got = topk_neighbors(g, center, cands, sem, k)
            scored = sorted(
                ((-cosine(sem.vector(g.relation_of(center)),
                          sem.vector(g.relation_of(e))), e) for e in cands))
            want = [e for _, e in scored[:k]]
            assert got == want
            assert len(got) == min(k, len(cands))


def test_topk_breaks_ties_by_edge_id():
    # all relations share one semantic vector: every score ties at 1.0
    g = graph_from([(0, 0, 1), (0, 1, 2), (0, 2, 3), (0, 0, 4)], 5, 3)
    sem = RelationSemanticTable(np.tile(
        np.array([[1.0, 2.0, 0.5]], dtype=np.float32), (3, 1)))
    assert topk_neighbors(g, 3, [2, 0, 1], sem, 2) == [0, 1]


def test_topk_of_empty_candidates():
    g, sem, _, _ = random_setup()
    assert topk_neighbors(g, 0, [], sem, 5) == []


# --- condition vector semantics ---

def test_degenerate_query_uses_projected_relation_vector():
    g0, sem, bundle, cfg = random_setup()
    # rebuild with one extra, isolated entity
    ents = Vocab(list(g0.entities.names()) + ["isolated"])
    g = KnowledgeGraph(ents, g0.relations, g0.triples)
    iso = ents.id("isolated")
    q = Triple(iso, 2, iso)
    assert query_scope(g, q, "predict_tail") == []
    got = condition_vector(g, sem, bundle, cfg, q, "predict_tail").data
    s0 = sem.vector(2) @ bundle["sgm.in_proj.w"].data + bundle["sgm.in_proj.b"].data
    want = s0 @ bundle["sgm.cond_proj.w"].data + bundle["sgm.cond_proj.b"].data
    assert np.allclose(got[0], want, atol=1e-5)


def _reference_scope(cond, visible, k):
    """Brute force: per row, intersect full adjacency with the scope and
    rank with the public selector."""
    g, vis = cond.g, list(visible)
    vis_set = set(vis)
    m = len(vis)
    nbr_idx = np.zeros((m, k), np.int64)
    nbr_w = np.zeros((m, k), np.float32)
    counts = np.zeros(m, np.int64)
    for i, c in enumerate(vis):
        cands = [e for e in neighbors_of_edge(g, c) if e in vis_set]
        take = topk_neighbors(g, c, cands, cond.sem, k,
                              _pair_cos=cond._pair_cos)
        if take:
            counts[i] = len(take)
            nbr_idx[i, :len(take)] = [vis.index(e) for e in take]
            nbr_w[i, :len(take)] = 1.0 / len(take)
        else:
            nbr_idx[i, 0] = i
            nbr_w[i, 0] = 1.0
    return nbr_idx, nbr_w, counts


@pytest.mark.parametrize("seed", range(6))
def test_scope_structure_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_ent, n_rel = 8, 4
    # dense multigraph with self-loops and repeated endpoint pairs
    triples = [(int(rng.integers(n_ent)), int(rng.integers(n_rel)),
                int(rng.integers(n_ent))) for _ in range(40)]
    triples = list(dict.fromkeys(triples))
    g = graph_from(triples, n_ent, n_rel)
    sem = RelationSemanticTable(rng.normal(size=(n_rel, 6)).astype(np.float32))
    cfg = SgmConfig(layers=1, top_k=3, d_h=4, n_heads=1, d_c=4)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, 6, cfg)
    cond = Conditioner(g, sem, bundle, cfg)
    for _ in range(12):
        q = Triple(int(rng.integers(n_ent)), int(rng.integers(n_rel)),
                   int(rng.integers(n_ent)))
        for mode in ("predict_tail", "predict_head", "classify"):
            visible = query_scope(g, q, mode)
            if not visible:
                continue
            masked = tuple(e for e, t in enumerate(g.triples)
                           if t == q)
            ctx = {"predict_tail": (q.head, -1, masked),
                   "predict_head": (q.tail, -1, masked),
                   "classify": (q.head, q.tail, masked)}[mode]
            got = cond._scope(tuple(visible), ctx)
            want_idx, want_w, want_counts = _reference_scope(
                cond, visible, cfg.top_k)
            assert np.array_equal(got.counts, want_counts), (q, mode)
            assert np.array_equal(got.nbr_idx, want_idx), (q, mode)
            assert np.array_equal(got.nbr_w, want_w), (q, mode)


def test_single_edge_scope_pools_itself():
    # head 4 has exactly one edge; its neighborhood within scope is empty
    g = graph_from(FAN, 5, 3)
    rng = np.random.default_rng(1)
    sem = RelationSemanticTable(rng.normal(size=(3, 12)).astype(np.float32))
    cfg = SgmConfig(layers=1, top_k=3, d_h=8, n_heads=1, d_c=4)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, 12, cfg)
    cond = Conditioner(g, sem, bundle, cfg)
    out = cond.condition(Triple(4, 1, 2), "predict_tail")
    assert out.shape == (1, 4)
    scope = cond._scope(tuple(query_scope(g, Triple(4, 1, 2), "predict_tail")),
                        (4, -1, ()))
    assert scope.counts.tolist() == [0]
    assert scope.nbr_idx[0, 0] == 0 and scope.nbr_w[0, 0] == 1.0


def test_masked_equals_physically_removed_bitwise():
    rng = np.random.default_rng(9)
    g, sem, bundle, cfg = random_setup(seed=9, n_edges=30)
    removed = 7
    gold = g.triples[removed]
    rest = [t for i, t in enumerate(g.triples) if i != removed]
    g_minus = KnowledgeGraph(g.entities, g.relations, rest)
    for mode in ("predict_tail", "predict_head", "classify"):
        a = Conditioner(g, sem, bundle, cfg).condition(gold, mode).data
        b = Conditioner(g_minus, sem, bundle, cfg).condition(gold, mode).data
        assert np.array_equal(a, b), mode


def test_condition_independent_of_storage_order():
    g, sem, bundle, cfg = random_setup(seed=5)
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(g.triples))
    g2 = KnowledgeGraph(g.entities, g.relations,
                        [g.triples[i] for i in perm])
    q = Triple(g.triples[0].head, 4, g.triples[0].tail)
    for mode in ("predict_tail", "classify"):
        a = Conditioner(g, sem, bundle, cfg).condition(q, mode).data
        b = Conditioner(g2, sem, bundle, cfg).condition(q, mode).data
        assert np.allclose(a, b, atol=1e-5), mode


def test_batch_matches_singles():
    g, sem, bundle, cfg = random_setup(seed=11)
    cond = Conditioner(g, sem, bundle, cfg)
    reqs = []
    for t in g.triples[:6]:
        reqs.append((t, "predict_tail"))
        reqs.append((t, "predict_head"))
        reqs.append((t, "classify"))
    reqs.append((Triple(g.triples[0].head, 1, g.triples[0].tail), "predict_tail"))
    batch = cond.condition_batch(reqs).data
    assert batch.shape == (len(reqs), cfg.d_c)
    for i, (q, mode) in enumerate(reqs):
        single = cond.condition(q, mode).data[0]
        assert np.allclose(batch[i], single, atol=2e-5), (i, mode)


def _count_scope_builds(cond):
    calls = []
    inner = cond._scope_batch

    def spy(items):
        calls.extend(tuple(v) for v, _ in items)
        return inner(items)

    cond._scope_batch = spy
    return calls


def test_batch_deduplicates_shared_scopes():
    g, sem, bundle, cfg = random_setup(seed=2)
    cond = Conditioner(g, sem, bundle, cfg)
    calls = _count_scope_builds(cond)
    h = g.triples[0].head
    # same head + same exclusions = one scope, whatever the relation/tail
    reqs = [(Triple(h, 0, 9), "predict_tail"), (Triple(h, 1, 8), "predict_tail")]
    out = cond.condition_batch(reqs).data
    assert np.array_equal(out[0], out[1])
    assert len(calls) == 1


def test_classify_scope_uses_real_adjacency():
    # edge 0 touches only head-side entity 0; edge 2 touches only entity 9.
    # they are not adjacent, so neither may select the other even though
    # both sit in the classify scope of (0, r, 9).
    g = graph_from([(0, 0, 1), (0, 1, 2), (9, 2, 8), (9, 0, 1)], 10, 3)
    rng = np.random.default_rng(4)
    sem = RelationSemanticTable(rng.normal(size=(3, 16)).astype(np.float32))
    cfg = SgmConfig(layers=1, top_k=4, d_h=8, n_heads=1, d_c=4)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, 16, cfg)
    cond = Conditioner(g, sem, bundle, cfg)
    info = cond.explain(Triple(0, 1, 9), "classify")
    assert info["visible"] == [0, 1, 2, 3]
    by_edge = {e["edge"]: [s[0] for s in e["selected"]] for e in info["edges"]}
    assert by_edge[1] == [0]          # only other edge at entity 0
    assert by_edge[2] == [3]          # shares entity 9 with edge 3
    assert 2 not in by_edge[0] and 0 not in by_edge[2]
    # edges 0 and 3 share entities 0/9? no: edge0=(0,1), edge3=(9,1): share 1
    assert set(by_edge[0]) == {1, 3}


def test_deterministic_across_fresh_conditioners():
    g, sem, bundle, cfg = random_setup(seed=13)
    q = (g.triples[3], "classify")
    a = Conditioner(g, sem, bundle, cfg).condition(*q).data
    b = Conditioner(g, sem, bundle, cfg).condition(*q).data
    assert np.array_equal(a, b)


# --- side-restricted pooling ---

def test_side_pool_all_edges_on_head_side_matches_full_pool():
    # tail entity 9 is isolated, so the classify scope is exactly the
    # head's edges and head-side pooling covers every row
    g = graph_from(FAN, 10, 3)
    rng = np.random.default_rng(6)
    sem = RelationSemanticTable(rng.normal(size=(3, 12)).astype(np.float32))
    cfg = SgmConfig(layers=1, top_k=2, d_h=8, n_heads=1, d_c=4)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, 12, cfg)
    cond = Conditioner(g, sem, bundle, cfg)
    q = Triple(0, 1, 9)
    a = cond.condition(q, "classify", pool="all").data
    b = cond.condition(q, "classify", pool="head").data
    assert np.array_equal(a, b)


def test_side_pools_differ_and_share_one_scope_forward():
    g, sem, bundle, cfg = random_setup(seed=29)
    cond = Conditioner(g, sem, bundle, cfg)
    calls = _count_scope_builds(cond)
    t = g.triples[0]
    out = cond.condition_batch([(t, "classify", "head"),
                                (t, "classify", "tail"),
                                (t, "classify", "head")])
    assert len(calls) == 1     # one union scope, two pools
    assert np.array_equal(out.data[0], out.data[2])
    assert not np.array_equal(out.data[0], out.data[1])


def test_side_pool_restricts_to_incident_rows():
    g = graph_from(FAN, 10, 3)
    rng = np.random.default_rng(8)
    sem = RelationSemanticTable(rng.normal(size=(3, 10)).astype(np.float32))
    cfg = SgmConfig(layers=1, top_k=3, d_h=6, n_heads=1, d_c=5)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, 10, cfg)
    cond = Conditioner(g, sem, bundle, cfg)
    # classify scope of (0, r, 3): edges at 0 = {0,1,2}, at 3 = {2,4}
    q = Triple(0, 0, 3)
    scope = query_scope(g, q, "classify")
    assert scope == [0, 1, 2, 4]
    # tail side of the union should equal pooling rows {2, 4} only;
    # check against predict_head scoping on the same visible set is not
    # possible directly, so verify via the unit rows bookkeeping
    reqs = [(q, "classify", "tail")]
    out = cond.condition_batch(reqs)
    key = ("u", tuple(scope), 3)
    rows = cond_rows = None
    # recompute expected rows: positions of edges incident to entity 3
    expect = [i for i, e in enumerate(scope)
              if 3 in (g.triples[e].head, g.triples[e].tail)]
    assert expect == [2, 3]
    assert out.shape == (1, 5)


def test_side_pool_empty_side_takes_degenerate_path():
    g = graph_from(FAN, 10, 3)
    rng = np.random.default_rng(10)
    sem = RelationSemanticTable(rng.normal(size=(3, 10)).astype(np.float32))
    cfg = SgmConfig(layers=2, top_k=2, d_h=6, n_heads=2, d_c=5)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, 10, cfg)
    cond = Conditioner(g, sem, bundle, cfg)
    q = Triple(0, 2, 9)  # entity 9 isolated: tail side empty
    got = cond.condition(q, "classify", pool="tail").data
    s0 = sem.vector(2) @ bundle["sgm.in_proj.w"].data + bundle["sgm.in_proj.b"].data
    want = s0 @ bundle["sgm.cond_proj.w"].data + bundle["sgm.cond_proj.b"].data
    assert np.allclose(got[0], want, atol=1e-5)


# --- straight-line oracle for one small pooled configuration ---

def _layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    v = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(v + eps) * g + b


def _gelu_np(x):
    from scipy.special import erf
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def test_condition_matches_straight_line_oracle():
    rng = np.random.default_rng(21)
    g = graph_from([(0, 0, 1), (0, 1, 2), (0, 2, 3), (1, 1, 2)], 4, 3)
    d_s, d_h, d_c, K = 6, 4, 3, 2
    sem = RelationSemanticTable(rng.normal(size=(3, d_s)).astype(np.float32))
    cfg = SgmConfig(layers=1, top_k=K, d_h=d_h, n_heads=1, d_c=d_c, ffn_mult=2)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, d_s, cfg)
    q = Triple(0, 2, 9)  # predict_tail from head 0: scope = edges 0,1,2
    got = condition_vector(g, sem, bundle, cfg, q, "predict_tail").data[0]

    P = {k: t.data for k, t in bundle.items()}
    scope = [0, 1, 2]
    rels = [g.relation_of(e) for e in scope]
    S = sem.vectors[rels] @ P["sgm.in_proj.w"] + P["sgm.in_proj.b"]
    # selection by relation-vector cosine, k=2 out of the other two edges
    sel = []
    for i, c in enumerate(scope):
        others = [j for j in range(3) if j != i]
        scores = [cosine(sem.vectors[rels[i]], sem.vectors[rels[j]])
                  for j in others]
        order = sorted(range(2), key=lambda a: (-scores[a], scope[others[a]]))
        sel.append([others[a] for a in order[:K]])
    Sn = _layer_norm_np(S, P["sgm.layer0.ln1.g"], P["sgm.layer0.ln1.b"])
    pooled = np.stack([Sn[ix].mean(0) for ix in sel])
    S = S + pooled @ P["sgm.layer0.attn.wv"] @ P["sgm.layer0.attn.wo"]
    Sn2 = _layer_norm_np(S, P["sgm.layer0.ln2.g"], P["sgm.layer0.ln2.b"])
    S = S + _gelu_np(Sn2 @ P["sgm.layer0.ffn.w1"] + P["sgm.layer0.ffn.b1"]) \
        @ P["sgm.layer0.ffn.w2"] + P["sgm.layer0.ffn.b2"]
    want = S.mean(0) @ P["sgm.cond_proj.w"] + P["sgm.cond_proj.b"]
    assert np.allclose(got, want, atol=1e-5)


# --- gradients ---

def _nonzero_grad(t):
    return t.grad is not None and np.any(t.grad != 0)


def test_gradients_reach_live_parameters_pooled():
    g, sem, bundle, cfg = random_setup(seed=17)
    cond = Conditioner(g, sem, bundle, cfg)
    out = cond.condition_batch([(g.triples[0], "predict_tail"),
                                (g.triples[1], "classify")])
    sum_(out * out).backward()
    live = ["sgm.in_proj.w", "sgm.cond_proj.w", "sgm.layer0.attn.wv",
            "sgm.layer0.attn.wo", "sgm.layer0.ffn.w1", "sgm.layer1.ln1.g",
            "sgm.layer1.ln2.b"]
    for name in live:
        assert _nonzero_grad(bundle[name]), name
    # pooled attention never reads the query/key projections
    assert np.all(bundle["sgm.layer0.attn.wq"].grad == 0)
    assert np.all(bundle["sgm.layer0.attn.wk"].grad == 0)


def test_gradients_reach_qk_in_per_neighbor_mode():
    cfg = SgmConfig(layers=1, top_k=3, d_h=8, n_heads=2, d_c=4,
                    per_neighbor_kv=True)
    g, sem, bundle, cfg = random_setup(seed=19, cfg=cfg)
    cond = Conditioner(g, sem, bundle, cfg)
    out = cond.condition(g.triples[0], "predict_tail")
    sum_(out * out).backward()
    assert _nonzero_grad(bundle["sgm.layer0.attn.wq"])
    assert _nonzero_grad(bundle["sgm.layer0.attn.wk"])


@pytest.mark.parametrize("per_neighbor", [False, True])
def test_grad_check_condition_wrt_in_proj(per_neighbor):
    rng = np.random.default_rng(23)
    g = graph_from([(0, 0, 1), (0, 1, 2), (0, 2, 3), (2, 1, 3)], 4, 3)
    d_s = 5
    sem = RelationSemanticTable(rng.normal(size=(3, d_s)).astype(np.float32))
    cfg = SgmConfig(layers=1, top_k=2, d_h=4, n_heads=2, d_c=3, ffn_mult=2,
                    per_neighbor_kv=per_neighbor)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, d_s, cfg)
    v = Tensor(rng.normal(size=(3, 1)).astype(np.float32))
    point = Tensor(bundle["sgm.in_proj.w"].data.copy())

    def fn(x):
        bundle.put("sgm.in_proj.w", x)
        cond = Conditioner(g, sem, bundle, cfg)
        out = cond.condition(Triple(0, 1, 9), "predict_tail")
        return sum_(out @ v)

    assert grad_check(fn, point, step=1e-3) < 1e-3


def test_per_neighbor_mode_single_neighbor_matches_pooled():
    # with exactly one selected neighbor the attention weight is 1 and
    # both formulations reduce to wo(wv(s_nbr))
    rng = np.random.default_rng(31)
    g = graph_from([(0, 0, 1), (0, 1, 2)], 3, 2)
    d_s = 6
    sem = RelationSemanticTable(rng.normal(size=(2, d_s)).astype(np.float32))
    base = SgmConfig(layers=1, top_k=1, d_h=4, n_heads=1, d_c=3, ffn_mult=2)
    bundle = ModelBundle()
    init_sgm_params(bundle, rng, d_s, base)
    q = Triple(0, 0, 9)
    a = condition_vector(g, sem, bundle, base, q, "predict_tail").data
    per = SgmConfig(layers=1, top_k=1, d_h=4, n_heads=1, d_c=3, ffn_mult=2,
                    per_neighbor_kv=True)
    b = condition_vector(g, sem, bundle, per, q, "predict_tail").data
    assert np.allclose(a, b, atol=1e-5)

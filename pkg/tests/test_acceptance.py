"""Behavior gate: every shipped guarantee checked end to end.

Each test computes its verdict, records one summary line (printed in the
"acceptance criteria" section after the run), then asserts. Tolerances
are pinned inline; timing checks use best-of-N repeats because this
class of machine runs a single core.
"""
import json
import os
import time

import numpy as np
import pytest
import scipy.sparse
import scipy.spatial

from conftest import (record_criterion, build_graph, full_subgraph,
                      tiny_bipartite, tiny_params)
from oracles import dense_edge_attention, dense_global_attention, fd_gradient, rel_err

from dhge.benchmarks import prepare_click_log
from dhge.config import RunConfig
from dhge.evaluation import EvalProtocol, evaluate_table
from dhge.fixtures import gen_drift_stream, gen_planted_bipartite, swiss_roll_points
from dhge.graph import IncrementBatch, NodeRef, load_graph, read_increment
from dhge.incremental import (NeighborSample, UpdateConfig, capture_alignment,
                              embed_increment, full_lle_oracle, ille_update,
                              lle_weight_matrix, reconstruction_weights)
from dhge.model import (EmbeddingTable, ModelConfig, ModelParams, edge_attention,
                        edge_loss, embed_all, forward_subgraph, global_attention,
                        train_epoch)
from dhge.optim import AdamW
from dhge.pipeline import (cmd_evaluate, cmd_train, cmd_update, list_versions,
                           load_manifest, read_test_interactions)
from dhge.seeding import mix
from dhge.snapshot import load_model, save_model
from dhge.tensor import Tensor, backward, segment_softmax
import dhge.pipeline as pipeline_mod


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _edges_by_relation(sub, num_relations):
    return [list(zip(sub.rel_src[r].tolist(), sub.rel_dst[r].tolist()))
            for r in range(num_relations)]


# ---------------------------------------------------------------------------
# 1. every parameter gradient of the composed pairwise loss matches
#    central finite differences


def test_01_composed_loss_gradients_match_finite_differences():
    t0 = time.perf_counter()
    g = tiny_bipartite(seed=3, missing_rate=0.2)  # 7 nodes
    cfg, params = tiny_params(g, hidden_dim=4, num_gcn_layers=2, global_mix=0.3)
    sub = full_subgraph(g)
    pos = np.array([[0, 3], [1, 4], [2, 6]])
    neg = np.array([[0, 5], [1, 6], [2, 4]])

    def composed():
        z = forward_subgraph(g, sub, params, cfg, training=False)
        return edge_loss(z, pos, neg)

    params.zero_grads()
    backward(composed())
    worst_name, worst = "", 0.0
    for p in params.all_params():
        got = np.array(p.grad, dtype=np.float64).copy()
        base = p.value.copy()

        def f(arr, p=p, shape=base.shape):
            p.value = np.asarray(arr, dtype=np.float64).reshape(shape)
            return float(composed().value)

        want = fd_gradient(f, base, h=1e-5)
        p.value = base
        err = rel_err(got, want)
        if err > worst:
            worst_name, worst = p.name, err
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60.0
    record_criterion(1, "PASS" if ok else "FAIL",
                     "worst gradient rel err %.2e (%s, bound 1e-4) in %.1fs"
                     % (worst, worst_name, elapsed))
    assert worst <= 1e-4, worst_name
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. streaming linear attention equals the quadratic dense formulation


def test_02_linear_attention_equals_dense_quadratic_oracle():
    rng = np.random.default_rng(2026)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(2, 65))
        d = int(rng.integers(2, 9))
        cfg = ModelConfig(input_dim=d, hidden_dim=d, rng_seed=trial)
        params = ModelParams(cfg, num_types=1, num_relations=1, id_capacity=1)
        x0 = rng.normal(size=(n, d))
        mixw = float(rng.random())
        got = global_attention(Tensor(x0), params, mixw).value
        want = dense_global_attention(x0, params.attn_query.value,
                                      params.attn_key.value,
                                      params.attn_value.value, mixw)
        worst = max(worst, float(np.max(np.abs(got - want))))
    ok = worst <= 1e-10
    record_criterion(2, "PASS" if ok else "FAIL",
                     "100 fixtures up to 64 nodes, max |streaming - dense| %.2e (bound 1e-10)"
                     % worst)
    assert worst <= 1e-10


# ---------------------------------------------------------------------------
# 3. sparse per-relation attention equals a dense masked oracle, and
#    attention rows are proper distributions


def test_03_relation_attention_matches_dense_masked_oracle():
    rng = np.random.default_rng(33)
    worst = 0.0
    for trial in range(20):
        nu = int(rng.integers(2, 5))
        ni = int(rng.integers(2, 9 - nu))
        pairs_all = [(u, i) for u in range(nu) for i in range(ni)]
        e0 = [pairs_all[j] for j in rng.choice(len(pairs_all),
                                               int(rng.integers(1, len(pairs_all) + 1)),
                                               replace=False)]
        e1 = [(i, u) for u, i in
              (pairs_all[j] for j in rng.choice(len(pairs_all),
                                                int(rng.integers(1, len(pairs_all) + 1)),
                                                replace=False))]
        g = build_graph([(0, 1), (1, 0)], [nu, ni], [e0, e1],
                        input_dim=4, seed=100 + trial)
        cfg, params = tiny_params(g, hidden_dim=5, seed=trial)
        sub = full_subgraph(g)
        gin = rng.normal(size=(nu + ni, 5))
        got = edge_attention(Tensor(gin), sub, params, g.schema).value
        want = dense_edge_attention(
            gin, sub.node_types, _edges_by_relation(sub, 2), g.schema.pairs,
            [p.value for p in params.type_query],
            [p.value for p in params.type_key],
            [p.value for p in params.type_value],
            [p.value for p in params.rel_attn],
            [p.value for p in params.rel_msg],
            [float(p.value) for p in params.rel_factor],
            [float(p.value) for p in params.type_mix])
        worst = max(worst, float(np.max(np.abs(got - want))))

    logits = rng.normal(size=300) * 4.0
    segments = rng.integers(0, 40, size=300)
    probs = segment_softmax(Tensor(logits), segments, 40).value
    sums = np.bincount(segments, weights=probs, minlength=40)
    present = np.bincount(segments, minlength=40) > 0
    sum_err = float(np.max(np.abs(sums[present] - 1.0)))

    ok = worst <= 1e-10 and sum_err <= 1e-12
    record_criterion(3, "PASS" if ok else "FAIL",
                     "20 two-relation fixtures, max diff %.2e (bound 1e-10); "
                     "softmax group sums off by %.2e (bound 1e-12)" % (worst, sum_err))
    assert worst <= 1e-10
    assert sum_err <= 1e-12


# ---------------------------------------------------------------------------
# 4. the full manifold embedding recovers an affine subspace exactly


def test_04_full_embedding_exact_on_affine_subspace():
    rng = np.random.default_rng(44)
    basis = rng.normal(size=(2, 5))
    offset = rng.normal(size=5)
    x = rng.normal(size=(200, 2)) @ basis + offset
    y, lam = full_lle_oracle(x, 8, 2, eps=1e-8)
    w = lle_weight_matrix(x, 8, 1e-8)
    resid = y - w @ y
    loss = float(np.sum(resid * resid))
    iw = scipy.sparse.identity(200, format="csr") - w
    m = (iw.T @ iw).toarray()
    bottom = float(np.linalg.eigh(m)[0][0])
    ok = loss < 1e-6 and bottom < 1e-10 and float(np.max(lam)) < 1e-10
    record_criterion(4, "PASS" if ok else "FAIL",
                     "200 points, 2-D plane in 5-D: reconstruction loss %.2e "
                     "(bound 1e-6), bottom eigenvalue %.2e (bound 1e-10)" % (loss, bottom))
    assert loss < 1e-6
    assert bottom < 1e-10
    assert float(np.max(lam)) < 1e-10


# ---------------------------------------------------------------------------
# 5. incremental embedding stays close to a from-scratch rebuild at a
#    fraction of its cost


def test_05_incremental_embedding_quality_and_speed_vs_rebuild():
    K, EPS, DIM, N_BASE, N_NEW = 8, 1e-3, 2, 300, 30
    pts, _ = swiss_roll_points(N_BASE + N_NEW, seed=5, noise=0.05)
    base_x = pts[:N_BASE]
    y_base, _ = full_lle_oracle(base_x, K, DIM, EPS)
    w_base = lle_weight_matrix(base_x, K, EPS)
    r = y_base - w_base @ y_base
    base_loss = float(np.sum(r * r))
    table = EmbeddingTable([y_base.copy()], version=0)

    def incremental_once():
        d_new = scipy.spatial.distance.cdist(pts[N_BASE:], pts)
        d_new[np.arange(N_NEW), np.arange(N_BASE, N_BASE + N_NEW)] = np.inf
        samples, weights = [], []
        for j in range(N_NEW):
            part = np.argpartition(d_new[j], K)[:K]
            nn = part[np.argsort(d_new[j][part], kind="stable")]
            samples.append(NeighborSample(NodeRef(0, N_BASE + j),
                                          [NodeRef(0, int(i)) for i in nn], [1] * K))
            weights.append(reconstruction_weights(pts[N_BASE + j], pts[nn], EPS))
        _, new_loss, _ = embed_increment(table, samples, weights, tol=1e-6)
        return base_loss + new_loss

    def rebuild_once():
        return full_lle_oracle(pts, K, DIM, EPS)

    t_inc = best_of(incremental_once, 7)
    t_scr = best_of(rebuild_once, 7)
    loss_inc = incremental_once()
    y_scr, _ = rebuild_once()
    w_scr = lle_weight_matrix(pts, K, EPS)
    r = y_scr - w_scr @ y_scr
    loss_scr = float(np.sum(r * r))

    ratio = loss_inc / loss_scr
    frac = t_inc / t_scr
    ok = ratio <= 1.5 and frac < 0.10
    record_criterion(5, "PASS" if ok else "FAIL",
                     "30 points onto a 300-point base: loss ratio %.3f (bound 1.5), "
                     "time fraction %.3f (bound 0.10)" % (ratio, frac))
    assert ratio <= 1.5
    assert frac < 0.10


# ---------------------------------------------------------------------------
# 6. an incremental update touches only the update set and its sampled
#    neighborhood, byte for byte


def test_06_update_locality_by_byte_comparison():
    e0 = [(0, 0), (1, 0), (1, 1), (2, 2), (3, 3), (4, 4),
          (5, 2), (0, 1), (2, 0), (3, 1), (4, 2), (5, 4)]
    e1 = [(i, u) for u, i in e0]
    g = build_graph([(0, 1), (1, 0)], [6, 5], [e0, e1], input_dim=5, seed=2)
    cfg, params = tiny_params(g, hidden_dim=6)
    table = embed_all(g, params, cfg)
    alignment = capture_alignment(g, table, k=3, eps=1e-3, rng_seed=11)

    rng = np.random.default_rng(8)
    feats = rng.normal(size=5)
    batch = IncrementBatch(
        new_nodes=[(NodeRef(0, 6), feats, np.ones(5, dtype=bool))],
        new_edges=[(NodeRef(0, 6), NodeRef(1, 2), 0, 50.0),
                   (NodeRef(1, 2), NodeRef(0, 6), 1, 50.0),
                   (NodeRef(0, 6), NodeRef(1, 4), 0, 51.0),
                   (NodeRef(1, 4), NodeRef(0, 6), 1, 51.0)],
        batch_time=52.0)
    ucfg = UpdateConfig(k=3, eps=1e-3, refine_steps=4)
    g2, params2, table2, report, align2 = ille_update(
        g, batch, params, table, cfg, ucfg, alignment=alignment, rng_seed=5)

    update_set = {NodeRef(0, 6), NodeRef(1, 2), NodeRef(1, 4)}
    assert report["n_updated"] == len(update_set)

    # model side: every tensor except the per-node id table is bit-identical,
    # and only id rows addressed by the update set changed
    old_by_name = {p.name: p for p in params.all_params()}
    stray = []
    for p2 in params2.all_params():
        if p2.name == "id_table":
            continue
        if p2.value.tobytes() != old_by_name[p2.name].value.tobytes():
            stray.append(p2.name)
    old_cap = params.id_capacity
    changed_ids = {i for i in range(old_cap)
                   if params2.id_table.value[i].tobytes() != params.id_table.value[i].tobytes()}
    new_ids = {i for i in range(old_cap, params2.id_capacity)
               if np.any(params2.id_table.value[i])}
    allowed_ids = {ref.intra_id for ref in update_set}

    # table side: changed pre-existing rows lie inside the update set plus
    # the neighborhoods the update sampled for it
    changed_refs = {NodeRef(t, i)
                    for t in range(len(table.blocks))
                    for i in range(len(table.blocks[t]))
                    if table2.blocks[t][i].tobytes() != table.blocks[t][i].tobytes()}
    allowed_refs = set(update_set)
    for ref in update_set:
        if ref in align2.rows:
            allowed_refs.update(align2.rows[ref][0])

    # and every sampled neighbor really is within two hops of the update set
    frontier = {g2.global_index(ref) for ref in update_set}
    within = set(frontier)
    for _ in range(2):
        frontier = {int(nb) for node in frontier for nb in g2.neighbors_of(node)} - within
        within |= frontier
    outside = {ref for ref in (allowed_refs - update_set)
               if g2.global_index(ref) not in within}

    ok = (not stray and changed_ids <= allowed_ids and changed_ids
          and new_ids <= allowed_ids and changed_refs <= allowed_refs
          and changed_refs and not outside)
    record_criterion(6, "PASS" if ok else "FAIL",
                     "changed id rows %s within update set ids %s; %d changed table rows "
                     "all inside the sampled neighborhood; other tensors byte-identical"
                     % (sorted(changed_ids), sorted(allowed_ids), len(changed_refs)))
    assert not stray, stray
    assert changed_ids and changed_ids <= allowed_ids
    assert new_ids <= allowed_ids
    assert changed_refs and changed_refs <= allowed_refs
    assert not outside, outside


# ---------------------------------------------------------------------------
# 7. default configuration learns a planted bipartite community structure


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    d = tmp_path_factory.mktemp("planted")
    stats = gen_planted_bipartite(d, seed=0)
    return d, stats


def test_07_planted_communities_learned_with_default_config(planted):
    d, stats = planted
    t0 = time.perf_counter()
    g = load_graph(os.path.join(d, "edges.tsv"), os.path.join(d, "features.tsv"),
                   os.path.join(d, "schema.tsv"))
    cfg = ModelConfig(input_dim=g.input_dim)  # all defaults
    params = ModelParams(cfg, num_types=2, num_relations=2,
                         id_capacity=max(g.counts))
    opt = AdamW()
    for epoch in range(20):
        train_epoch(g, params, cfg, opt, epoch=epoch)
    table = embed_all(g, params, cfg, version=1)
    tests = read_test_interactions(os.path.join(d, "test.tsv"), 0, 1)
    protocol = EvalProtocol(k_values=(10,), negatives_per_user=99, rng_seed=0)
    hit = evaluate_table(g, table, tests, protocol, 0, 1).hitrate[10]

    null_rng = np.random.default_rng(99)
    null_table = EmbeddingTable([null_rng.normal(size=(len(b), cfg.hidden_dim))
                                 for b in g.feature_blocks], version=0)
    null_hit = evaluate_table(g, null_table, tests, protocol, 0, 1).hitrate[10]
    elapsed = time.perf_counter() - t0

    ok = hit >= 0.8 and abs(null_hit - 0.10) <= 0.03 and elapsed < 300.0
    record_criterion(7, "PASS" if ok else "FAIL",
                     "hitrate@10 %.3f (bound 0.8) vs untrained baseline %.3f "
                     "(expected 0.10 +/- 0.03) in %.0fs (bound 300)"
                     % (hit, null_hit, elapsed))
    assert hit >= 0.8
    assert abs(null_hit - 0.10) <= 0.03
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 8 and 10 share one drift-stream sweep over neighborhood sizes


@pytest.fixture(scope="module")
def drift_world(tmp_path_factory):
    d = tmp_path_factory.mktemp("drift")
    stats = gen_drift_stream(d, base_users=150, base_items=120, communities=4,
                             feature_dim=12, n_batches=3, users_per_batch=10,
                             edges_per_new_user=8, seed=2)
    g = load_graph(os.path.join(d, "edges.tsv"), os.path.join(d, "features.tsv"),
                   os.path.join(d, "schema.tsv"))
    all_tests = read_test_interactions(os.path.join(d, "test.tsv"), 0, 1)
    protocol = EvalProtocol(k_values=(10,), negatives_per_user=99, rng_seed=3)
    base_users, upb = stats["n_users"], stats["users_per_batch"]

    results = {}
    for k in (6, 8, 10):
        cfg = ModelConfig(input_dim=12, hidden_dim=32, rng_seed=7)
        params = ModelParams(cfg, num_types=2, num_relations=2,
                             id_capacity=max(g.counts))
        opt = AdamW()
        t0 = time.perf_counter()
        for epoch in range(8):
            train_epoch(g, params, cfg, opt, epoch=epoch)
        train_s = time.perf_counter() - t0
        base_table = embed_all(g, params, cfg, version=1)
        alignment = capture_alignment(g, base_table, k=k, eps=1e-3, rng_seed=7)
        ucfg = UpdateConfig(k=k)

        cur_g, cur_params, cur_table, cur_align = g, params, base_table, alignment
        hits, frozen, upd_s = [], [], []
        for j, (e_path, f_path) in enumerate(stats["batch_files"]):
            batch = read_increment(cur_g, e_path, f_path)
            t0 = time.perf_counter()
            cur_g, cur_params, cur_table, _, cur_align = ille_update(
                cur_g, batch, cur_params, cur_table, cfg, ucfg,
                alignment=cur_align, rng_seed=mix(7, j))
            upd_s.append(time.perf_counter() - t0)
            lo, hi = base_users + j * upb, base_users + (j + 1) * upb
            tests_j = [row for row in all_tests if lo <= row[0].intra_id < hi]
            hits.append(evaluate_table(cur_g, cur_table, tests_j,
                                       protocol, 0, 1).hitrate[10])
            frozen.append(evaluate_table(g, base_table, tests_j, protocol, 0, 1,
                                         missing_users="miss").hitrate[10])
        results[k] = {"hits": hits, "frozen": frozen,
                      "upd_s": upd_s, "train_s": train_s}
    return results


def test_08_neighborhood_size_sensitivity(drift_world):
    means = {k: float(np.mean(v["hits"])) for k, v in drift_world.items()}
    ok = means[8] >= means[6]
    record_criterion(8, "PASS" if ok else "FAIL",
                     "drift-stream mean hitrate@10 by neighborhood size: "
                     "k=6 %.3f, k=8 %.3f (k=8 must not lose to k=6); "
                     "k=10 %.3f reported without a gate"
                     % (means[6], means[8], means[10]))
    assert means[8] >= means[6]


def test_10_freshness_wins_and_updates_stay_cheap(drift_world):
    r = drift_world[8]
    wins = all(h > f for h, f in zip(r["hits"], r["frozen"]))
    frac = max(r["upd_s"]) / r["train_s"]
    ok = wins and frac < 0.05
    record_criterion(10, "PASS" if ok else "FAIL",
                     "updated table beats the frozen one on every post-drift batch "
                     "(%s vs %s); slowest update %.1f%% of a full retrain (bound 5%%)"
                     % (["%.2f" % h for h in r["hits"]],
                        ["%.2f" % f for f in r["frozen"]], 100 * frac))
    assert wins
    assert frac < 0.05


# ---------------------------------------------------------------------------
# 9. near-linear scaling of inference, updates, and the weight solver


def _scaling_graph(n, input_dim=8, seed=0):
    half = n // 2
    rng = np.random.default_rng(seed)
    src = np.repeat(np.arange(half), 3)
    dst = rng.integers(0, half, size=3 * half)
    pairs = np.unique(np.stack([src, dst], axis=1), axis=0)
    s = pairs[:, 0].astype(np.int64)
    t = pairs[:, 1].astype(np.int64)
    ts = np.arange(len(pairs), dtype=np.float64)
    packed = [(s, t, ts), (t.copy(), s.copy(), ts.copy())]
    from dhge.graph import HeteroGraph, RelationSchema
    return HeteroGraph(RelationSchema([(0, 1), (1, 0)]),
                       [rng.normal(size=(half, input_dim)) for _ in range(2)],
                       [np.ones((half, input_dim), dtype=bool) for _ in range(2)],
                       packed)


def test_09_scaling_stays_near_linear():
    # full-coverage inference, doubling node counts
    cfg = ModelConfig(input_dim=8, hidden_dim=64, rng_seed=0)
    embed_all(_scaling_graph(2000), ModelParams(cfg, 2, 2, 1000), cfg)  # warm up
    embed_t = []
    for n in (10_000, 20_000, 40_000):
        g = _scaling_graph(n)
        params = ModelParams(cfg, num_types=2, num_relations=2,
                             id_capacity=max(g.counts))
        t0 = time.perf_counter()
        embed_all(g, params, cfg)
        embed_t.append(time.perf_counter() - t0)
    embed_ratios = [embed_t[1] / embed_t[0], embed_t[2] / embed_t[1]]

    # incremental updates, doubling batch size against one fixed base
    cfg_u = ModelConfig(input_dim=8, hidden_dim=32, rng_seed=0)
    g = _scaling_graph(4000, seed=1)
    params = ModelParams(cfg_u, num_types=2, num_relations=2,
                         id_capacity=max(g.counts))
    table = embed_all(g, params, cfg_u)
    alignment = capture_alignment(g, table, k=8, eps=1e-3, rng_seed=0)
    ucfg = UpdateConfig(k=8, refine_steps=3)
    update_t = []
    for n_upd in (50, 100, 200):
        rng = np.random.default_rng(n_upd)
        new_nodes, new_edges = [], []
        for j in range(n_upd):
            ref = NodeRef(0, 2000 + j)
            new_nodes.append((ref, rng.normal(size=8), np.ones(8, dtype=bool)))
            for i in rng.choice(2000, size=5, replace=False):
                new_edges.append((ref, NodeRef(1, int(i)), 0, 1e6 + j))
                new_edges.append((NodeRef(1, int(i)), ref, 1, 1e6 + j))
        batch = IncrementBatch(new_nodes=new_nodes, new_edges=new_edges,
                               batch_time=1e6)
        t0 = time.perf_counter()
        ille_update(g, batch, params, table, cfg_u, ucfg,
                    alignment=alignment, rng_seed=1)
        update_t.append(time.perf_counter() - t0)
    update_ratios = [update_t[1] / update_t[0], update_t[2] / update_t[1]]

    # reconstruction weight solve cost as the neighborhood grows
    rng = np.random.default_rng(0)
    solve_t = []
    for k in (4, 8, 16):
        center = rng.normal(size=16)
        nbrs = rng.normal(size=(k, 16))
        t0 = time.perf_counter()
        for _ in range(2000):
            reconstruction_weights(center, nbrs, 1e-3)
        solve_t.append(time.perf_counter() - t0)
    exponent = float(np.polyfit(np.log([4, 8, 16]), np.log(solve_t), 1)[0])

    ok = (max(embed_ratios) <= 2.5 and max(update_ratios) <= 2.5
          and exponent <= 3.5)
    record_criterion(9, "PASS" if ok else "FAIL",
                     "doubling ratios: inference %.2f/%.2f, update %.2f/%.2f "
                     "(bound 2.5); weight-solve size exponent %.2f (bound 3.5)"
                     % (embed_ratios[0], embed_ratios[1],
                        update_ratios[0], update_ratios[1], exponent))
    assert max(embed_ratios) <= 2.5, embed_t
    assert max(update_ratios) <= 2.5, update_t
    assert exponent <= 3.5, solve_t


# ---------------------------------------------------------------------------
# 11. public display-ads click log, pinned configuration


ALIDISPLAY_ENV = "DHGE_ALIDISPLAY_DIR"


def test_11_display_ads_click_log_benchmark():
    root = os.environ.get(ALIDISPLAY_ENV)
    if not root:
        record_criterion(11, "SKIP",
                         "display-ads click-log benchmark needs %s pointing at the "
                         "dataset (raw_sample.csv or a prepared layout)" % ALIDISPLAY_ENV)
        pytest.skip("set %s to run the external click-log benchmark" % ALIDISPLAY_ENV)

    t0 = time.perf_counter()
    if os.path.exists(os.path.join(root, "edges.tsv")):
        data_dir = root
    else:
        data_dir = os.path.join(root, "prepared")
        if not os.path.exists(os.path.join(data_dir, "edges.tsv")):
            prepare_click_log(os.path.join(root, "raw_sample.csv"), data_dir,
                              user_col="user", item_col="adgroup_id",
                              ts_col="time_stamp", click_col="clk",
                              max_users=20_000, seed=0)
    g = load_graph(os.path.join(data_dir, "edges.tsv"),
                   os.path.join(data_dir, "features.tsv"),
                   os.path.join(data_dir, "schema.tsv"))
    cfg = ModelConfig(input_dim=g.input_dim, hidden_dim=64, num_gcn_layers=3,
                      dropout=0.5, global_mix=0.6, degree_limit=10, rng_seed=0)
    params = ModelParams(cfg, num_types=2, num_relations=2,
                         id_capacity=max(g.counts))
    opt = AdamW(lr=5e-4, weight_decay=1e-4)
    for epoch in range(60):
        train_epoch(g, params, cfg, opt, epoch=epoch)
        if time.perf_counter() - t0 > 5400:
            break
    table = embed_all(g, params, cfg, version=1)
    tests = read_test_interactions(os.path.join(data_dir, "test.tsv"), 0, 1)
    protocol = EvalProtocol(k_values=(10,), negatives_per_user=99, rng_seed=0)
    hit = evaluate_table(g, table, tests, protocol, 0, 1).hitrate[10]
    elapsed = time.perf_counter() - t0
    ok = hit >= 0.67 and elapsed < 7200
    record_criterion(11, "PASS" if ok else "FAIL",
                     "click-log hitrate@10 %.3f (bound 0.67) in %.0fs (bound 7200)"
                     % (hit, elapsed))
    assert hit >= 0.67
    assert elapsed < 7200


# ---------------------------------------------------------------------------
# 12. reproducibility: identical runs, byte-stable snapshots, and
#     crash-safe manifests


C12_CFG = """
[model]
hidden_dim = 8
degree_limit = 6
neg_pool_size = 8
batch_size = 64

[train]
epochs = 2

[update]
k = 3
refine_steps = 2

[eval]
k_values = 5, 10
negatives_per_user = 5

[pipeline]
rng_seed = 11
"""

_TIMING_KEYS = ("wall_ms", "refresh_ms", "refresh_latency_ms")


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in _TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _run_chain(data_dir, snap_dir, stats):
    cfg = RunConfig.from_text(C12_CFG)
    cfg.paths.update(edges=os.path.join(data_dir, "edges.tsv"),
                     features=os.path.join(data_dir, "features.tsv"),
                     schema=os.path.join(data_dir, "schema.tsv"),
                     snapshot_dir=str(snap_dir))
    records = []
    cmd_train(cfg, log=records.append)
    e0, f0 = stats["batch_files"][0]
    cmd_update(cfg, e0, f0, log=records.append)
    cmd_evaluate(cfg, os.path.join(data_dir, "test.tsv"), log=records.append)
    return cfg, records


def test_12_reproducibility_snapshot_stability_and_crash_safety(tmp_path, monkeypatch):
    data_dir = tmp_path / "data"
    stats = gen_drift_stream(data_dir, base_users=20, base_items=12, communities=2,
                             feature_dim=6, n_batches=2, users_per_batch=4,
                             edges_per_new_user=4, seed=5)
    data_dir = str(data_dir)

    _, rec_a = _run_chain(data_dir, tmp_path / "snap_a", stats)
    _, rec_b = _run_chain(data_dir, tmp_path / "snap_b", stats)
    json_a = json.dumps(_strip_timing(rec_a), sort_keys=True)
    json_b = json.dumps(_strip_timing(rec_b), sort_keys=True)
    identical = json_a == json_b

    man = load_manifest(str(tmp_path / "snap_a"), 1)
    model_path = os.path.join(str(tmp_path / "snap_a"), man.model_path)
    loaded_cfg, loaded_params = load_model(model_path)
    resaved = str(tmp_path / "resaved.model")
    save_model(resaved, loaded_params, loaded_cfg)
    with open(model_path, "rb") as fa, open(resaved, "rb") as fb:
        roundtrip = fa.read() == fb.read()

    crash_dir = tmp_path / "snap_crash"
    cfg, _ = _run_chain(data_dir, crash_dir, stats)  # leaves versions 1, 2
    before = list_versions(str(crash_dir))

    def exploding(path, table):
        raise RuntimeError("injected crash before the manifest write")

    e1, f1 = stats["batch_files"][1]
    with monkeypatch.context() as m:
        m.setattr(pipeline_mod, "save_table", exploding)
        with pytest.raises(RuntimeError):
            cmd_update(cfg, e1, f1)
    after_crash = list_versions(str(crash_dir))
    man2, _ = cmd_update(cfg, e1, f1)  # recovery claims the next version
    no_dangling = after_crash == before and man2.version == before[-1] + 1

    ok = identical and roundtrip and no_dangling
    record_criterion(12, "PASS" if ok else "FAIL",
                     "metric records identical across directories (timing stripped); "
                     "model file re-save byte-identical; interrupted update left "
                     "versions %s intact and recovered to v%d"
                     % (after_crash, man2.version))
    assert identical
    assert roundtrip
    assert no_dangling

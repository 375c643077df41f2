"""Shared builders for the test suite."""
import numpy as np
import pytest

from dhge.graph import HeteroGraph, RelationSchema, Subgraph, NodeRef
from dhge.model import ModelConfig, ModelParams

# one line per shipped behavior contract, printed after the run
CRITERION_LINES = []


def record_criterion(num, status, detail):
    CRITERION_LINES.append("criterion %02d %s: %s" % (num, status, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)


def build_graph(schema_pairs, counts, rel_edges, input_dim=5, seed=0,
                missing_rate=0.0):
    """HeteroGraph with random finite features and optional missing cells.

    rel_edges: per relation, list of (src_intra, dst_intra[, ts]) tuples.
    """
    rng = np.random.default_rng(seed)
    feature_blocks = [rng.normal(size=(c, input_dim)) for c in counts]
    mask_blocks = []
    for c in counts:
        if missing_rate > 0.0:
            m = rng.random((c, input_dim)) >= missing_rate
        else:
            m = np.ones((c, input_dim), dtype=bool)
        mask_blocks.append(m)
    packed = []
    for edges in rel_edges:
        if edges:
            rows = [(e[0], e[1], e[2] if len(e) > 2 else 0.0) for e in edges]
            src, dst, ts = zip(*rows)
        else:
            src, dst, ts = (), (), ()
        packed.append((np.asarray(src, dtype=np.int64),
                       np.asarray(dst, dtype=np.int64),
                       np.asarray(ts, dtype=np.float64)))
    return HeteroGraph(RelationSchema(schema_pairs), feature_blocks,
                       mask_blocks, packed)


def full_subgraph(graph):
    """Subgraph retaining every node and every edge of ``graph``."""
    nodes = np.arange(graph.num_nodes, dtype=np.int64)
    node_types = np.concatenate(
        [np.full(c, t, dtype=np.int64) for t, c in enumerate(graph.counts)])
    intra_ids = np.concatenate(
        [np.arange(c, dtype=np.int64) for c in graph.counts])
    type_slices = [(int(graph.offsets[t]), int(graph.offsets[t + 1]))
                   for t in range(graph.num_types)]
    rel_src, rel_dst = [], []
    for r in range(graph.schema.num_relations):
        s_t, d_t = graph.schema.pairs[r]
        rel_src.append(graph.rel_src[r] + graph.offsets[s_t])
        rel_dst.append(graph.rel_dst[r] + graph.offsets[d_t])
    return Subgraph(nodes=nodes, node_types=node_types, intra_ids=intra_ids,
                    type_slices=type_slices, seeds=nodes,
                    seed_locals=nodes.copy(), rel_src=rel_src, rel_dst=rel_dst)


def tiny_bipartite(seed=0, missing_rate=0.2, input_dim=5):
    """2 types (3 users, 4 items), 2 mirrored relations, 8 directed edges."""
    user_item = [(0, 0), (0, 1), (1, 1), (2, 3)]
    item_user = [(2, 1), (3, 0), (1, 2), (0, 2)]
    return build_graph([(0, 1), (1, 0)], [3, 4], [user_item, item_user],
                       input_dim=input_dim, seed=seed, missing_rate=missing_rate)


def tiny_params(graph, hidden_dim=4, num_gcn_layers=2, seed=0, **cfg_kw):
    cfg = ModelConfig(input_dim=graph.input_dim, hidden_dim=hidden_dim,
                      num_gcn_layers=num_gcn_layers, **cfg_kw)
    params = ModelParams(cfg, num_types=graph.num_types,
                         num_relations=graph.schema.num_relations,
                         id_capacity=max(graph.counts), init_seed=seed)
    return cfg, params


@pytest.fixture
def bipartite_graph():
    return tiny_bipartite()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

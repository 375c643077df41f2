"""Typed multigraph storage, TSV IO, neighborhood sampling, and increments.

Nodes are addressed by ``NodeRef(node_type, intra_id)``; intra ids are dense
per type, so node data lives in per-type blocks and appending new nodes never
renumbers existing ones. A *global index* (type-major: all of type 0, then
type 1, ...) is derived per graph version for dense matrix work.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .seeding import derived_rng, TAG_PARTITION, TAG_SUBGRAPH


class DataError(ValueError):
    """Input data violates the graph contract."""


class GraphFormatError(DataError):
    """A tabular input row failed to parse; the message carries file:line."""


class NodeRef(NamedTuple):
    node_type: int
    intra_id: int


class RelationSchema:
    """Directed relation table: relation id -> (source type, target type)."""

    def __init__(self, pairs):
        self.pairs = [(int(s), int(t)) for s, t in pairs]
        for r, (s, t) in enumerate(self.pairs):
            if s < 0 or t < 0:
                raise DataError("relation %d has negative endpoint type" % r)

    @property
    def num_relations(self):
        return len(self.pairs)

    @property
    def num_types(self):
        if not self.pairs:
            return 0
        return 1 + max(max(s, t) for s, t in self.pairs)

    def src_type(self, r):
        return self.pairs[r][0]

    def dst_type(self, r):
        return self.pairs[r][1]

    def __eq__(self, other):
        return isinstance(other, RelationSchema) and self.pairs == other.pairs

    def __repr__(self):
        return "RelationSchema(%r)" % (self.pairs,)


@dataclass
class Subgraph:
    """Retained nodes (ascending global = type-major order) plus local edges."""

    nodes: np.ndarray              # global ids, ascending
    node_types: np.ndarray
    intra_ids: np.ndarray
    type_slices: list              # (start, stop) per type over the local order
    seeds: np.ndarray              # global ids, ascending
    seed_locals: np.ndarray
    rel_src: list                  # per relation, local source indices
    rel_dst: list

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_edges(self):
        return sum(len(s) for s in self.rel_src)

    def local_index(self, global_ids):
        global_ids = np.asarray(global_ids, dtype=np.int64)
        pos = np.searchsorted(self.nodes, global_ids)
        bad = (pos >= len(self.nodes)) | (self.nodes[np.minimum(pos, len(self.nodes) - 1)] != global_ids)
        if np.any(bad):
            raise DataError("global index not retained in subgraph")
        return pos


@dataclass
class IncrementBatch:
    """Append-only delta: new nodes (with optional features) and new edges.

    ``new_nodes`` entries are (NodeRef, values or None, mask or None);
    ``new_edges`` entries are (src NodeRef, dst NodeRef, relation_id, ts).
    """

    new_nodes: list = field(default_factory=list)
    new_edges: list = field(default_factory=list)
    batch_time: float = 0.0


class HeteroGraph:
    """Immutable snapshot of a typed graph; increments build new instances."""

    def __init__(self, schema, feature_blocks, mask_blocks, rel_edges):
        if not feature_blocks:
            raise DataError("graph must contain at least one node type")
        self.schema = schema
        self.feature_blocks = [np.asarray(b, dtype=np.float64) for b in feature_blocks]
        self.mask_blocks = [np.asarray(b, dtype=bool) for b in mask_blocks]
        if len(self.mask_blocks) != len(self.feature_blocks):
            raise DataError("feature and mask block counts differ")
        dims = {b.shape[1] for b in self.feature_blocks}
        if len(dims) != 1:
            raise DataError("feature blocks disagree on dimensionality: %s" % sorted(dims))
        for t, (fb, mb) in enumerate(zip(self.feature_blocks, self.mask_blocks)):
            if fb.shape != mb.shape:
                raise DataError("type %d: mask shape %s != feature shape %s" % (t, mb.shape, fb.shape))
            if not np.all(np.isfinite(fb[mb])):
                raise DataError("type %d: non-finite feature values" % t)
        if schema.num_types > len(self.feature_blocks):
            raise DataError("schema references type %d but only %d types have blocks"
                            % (schema.num_types - 1, len(self.feature_blocks)))
        if len(rel_edges) != schema.num_relations:
            raise DataError("expected %d relation edge sets, got %d"
                            % (schema.num_relations, len(rel_edges)))
        self.rel_src = []
        self.rel_dst = []
        self.rel_ts = []
        for r, (src, dst, ts) in enumerate(rel_edges):
            src = np.asarray(src, dtype=np.int64)
            dst = np.asarray(dst, dtype=np.int64)
            ts = np.asarray(ts, dtype=np.float64)
            if not (len(src) == len(dst) == len(ts)):
                raise DataError("relation %d: edge array lengths differ" % r)
            s_t, d_t = schema.pairs[r]
            if len(src):
                if src.min() < 0 or src.max() >= len(self.feature_blocks[s_t]):
                    raise DataError("relation %d: dangling source endpoint" % r)
                if dst.min() < 0 or dst.max() >= len(self.feature_blocks[d_t]):
                    raise DataError("relation %d: dangling target endpoint" % r)
                if s_t == d_t and np.any(src == dst):
                    raise DataError("relation %d: self-loop rejected" % r)
            self.rel_src.append(src)
            self.rel_dst.append(dst)
            self.rel_ts.append(ts)
        self._build_index()

    # -- derived indexes ----------------------------------------------------

    def _build_index(self):
        self.counts = [len(b) for b in self.feature_blocks]
        self.num_types = len(self.feature_blocks)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)
        self.num_nodes = int(self.offsets[-1])
        self.num_edges = int(sum(len(s) for s in self.rel_src))
        self.input_dim = self.feature_blocks[0].shape[1]

        # type-erased undirected adjacency over global ids, unique + sorted
        parts = []
        for r in range(self.schema.num_relations):
            s_t, d_t = self.schema.pairs[r]
            gs = self.rel_src[r] + self.offsets[s_t]
            gd = self.rel_dst[r] + self.offsets[d_t]
            parts.append(np.stack([gs, gd], axis=1))
            parts.append(np.stack([gd, gs], axis=1))
        if parts:
            pairs = np.unique(np.concatenate(parts, axis=0), axis=0)
        else:
            pairs = np.empty((0, 2), dtype=np.int64)
        self._adj_indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        if len(pairs):
            np.add.at(self._adj_indptr, pairs[:, 0] + 1, 1)
        np.cumsum(self._adj_indptr, out=self._adj_indptr)
        self._adj_indices = pairs[:, 1].copy() if len(pairs) else np.empty(0, dtype=np.int64)

        # per-relation incidence: edge ids grouped by source / by target intra id
        self._inc_src = []
        self._inc_dst = []
        for r in range(self.schema.num_relations):
            s_t, d_t = self.schema.pairs[r]
            self._inc_src.append(_group_edges(self.rel_src[r], self.counts[s_t]))
            self._inc_dst.append(_group_edges(self.rel_dst[r], self.counts[d_t]))

    # -- addressing ----------------------------------------------------------

    def check_ref(self, ref):
        t, i = int(ref[0]), int(ref[1])
        if t < 0 or t >= self.num_types:
            raise DataError("unknown node type %d" % t)
        if i < 0 or i >= self.counts[t]:
            raise DataError("intra id %d out of range for type %d (count %d)" % (i, t, self.counts[t]))
        return NodeRef(t, i)

    def global_index(self, ref):
        ref = self.check_ref(ref)
        return int(self.offsets[ref.node_type] + ref.intra_id)

    def ref_of(self, global_id):
        g = int(global_id)
        if g < 0 or g >= self.num_nodes:
            raise DataError("global index %d out of range" % g)
        t = int(np.searchsorted(self.offsets, g, side="right") - 1)
        return NodeRef(t, g - int(self.offsets[t]))

    def type_of_global(self, global_ids):
        global_ids = np.asarray(global_ids, dtype=np.int64)
        return (np.searchsorted(self.offsets, global_ids, side="right") - 1).astype(np.int64)

    def all_refs(self):
        return [NodeRef(t, i) for t in range(self.num_types) for i in range(self.counts[t])]

    def features_dense(self):
        return np.concatenate(self.feature_blocks, axis=0)

    def mask_dense(self):
        return np.concatenate(self.mask_blocks, axis=0)

    # -- neighborhood --------------------------------------------------------

    def neighbors_of(self, node):
        """Type-erased neighbor global ids (both directions), sorted unique."""
        g = node if isinstance(node, (int, np.integer)) else self.global_index(node)
        if g < 0 or g >= self.num_nodes:
            raise DataError("global index %d out of range" % g)
        return self._adj_indices[self._adj_indptr[g]:self._adj_indptr[g + 1]]

    def has_edge(self, gi, gj):
        nbrs = self.neighbors_of(gi)
        pos = np.searchsorted(nbrs, gj)
        return pos < len(nbrs) and nbrs[pos] == gj

    def degree_of(self, node):
        return len(self.neighbors_of(node))

    def incident_edges(self, ref, relation):
        """Edge ids of ``relation`` touching ``ref`` (either role), ascending."""
        ref = self.check_ref(ref)
        s_t, d_t = self.schema.pairs[relation]
        parts = []
        if ref.node_type == s_t:
            indptr, order = self._inc_src[relation]
            parts.append(order[indptr[ref.intra_id]:indptr[ref.intra_id + 1]])
        if ref.node_type == d_t:
            indptr, order = self._inc_dst[relation]
            parts.append(order[indptr[ref.intra_id]:indptr[ref.intra_id + 1]])
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    def edge_keys(self):
        """Set of (relation, src_intra, dst_intra) for duplicate checks."""
        keys = set()
        for r in range(self.schema.num_relations):
            keys.update(zip([r] * len(self.rel_src[r]),
                            self.rel_src[r].tolist(), self.rel_dst[r].tolist()))
        return keys

    # -- validation ----------------------------------------------------------

    def validate(self):
        """Best-effort integrity scan; returns a list of violation strings."""
        problems = []
        for t, (fb, mb) in enumerate(zip(self.feature_blocks, self.mask_blocks)):
            if fb.shape != mb.shape:
                problems.append("type %d: feature/mask shape mismatch" % t)
            if not np.all(np.isfinite(fb[mb])):
                problems.append("type %d: non-finite present feature values" % t)
        for r in range(self.schema.num_relations):
            s_t, d_t = self.schema.pairs[r]
            src, dst = self.rel_src[r], self.rel_dst[r]
            if len(src):
                if src.min() < 0 or src.max() >= self.counts[s_t]:
                    problems.append("relation %d: dangling source endpoint" % r)
                if dst.min() < 0 or dst.max() >= self.counts[d_t]:
                    problems.append("relation %d: dangling target endpoint" % r)
                if s_t == d_t and np.any(src == dst):
                    problems.append("relation %d: self-loop present" % r)
                if len(np.unique(np.stack([src, dst], axis=1), axis=0)) != len(src):
                    problems.append("relation %d: duplicate edges present" % r)
        return problems


def _group_edges(endpoint_intra, count):
    # CSR-style grouping of edge ids by endpoint intra id
    order = np.argsort(endpoint_intra, kind="stable").astype(np.int64)
    indptr = np.zeros(count + 1, dtype=np.int64)
    if len(endpoint_intra):
        np.add.at(indptr, endpoint_intra + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, order


def graphs_equal(a, b):
    """Structural equality: schema, blocks, and edge sets (order-insensitive)."""
    if a.schema != b.schema or a.counts != b.counts:
        return False
    for fa, fb, ma, mb in zip(a.feature_blocks, b.feature_blocks, a.mask_blocks, b.mask_blocks):
        if not (np.array_equal(fa, fb) and np.array_equal(ma, mb)):
            return False
    for r in range(a.schema.num_relations):
        ea = np.stack([a.rel_src[r], a.rel_dst[r]], axis=1)
        eb = np.stack([b.rel_src[r], b.rel_dst[r]], axis=1)
        if ea.shape != eb.shape:
            return False
        ia = np.lexsort((a.rel_dst[r], a.rel_src[r]))
        ib = np.lexsort((b.rel_dst[r], b.rel_src[r]))
        if not np.array_equal(ea[ia], eb[ib]):
            return False
        if not np.array_equal(a.rel_ts[r][ia], b.rel_ts[r][ib]):
            return False
    return True


# ---------------------------------------------------------------------------
# sampling


def minibatch_partition(graph, batch_size, rng_seed):
    """Shuffle all global node ids and split into chunks of ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if graph.num_nodes == 0:
        return []
    rng = derived_rng(TAG_PARTITION, rng_seed)
    perm = rng.permutation(graph.num_nodes).astype(np.int64)
    return [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]


def sample_subgraph(graph, seeds, degree_limit, rng_seed):
    """One-hop degree-limited neighborhood expansion around ``seeds``.

    For every (seed, relation) pair the incident edges are kept in full when
    there are at most ``degree_limit`` of them, otherwise exactly
    ``degree_limit`` are drawn without replacement. Retained nodes are the
    seeds plus endpoints of retained edges; retained edges are exactly the
    sampled ones (not the full induced subgraph).
    """
    if degree_limit < 1:
        raise ValueError("degree_limit must be >= 1")
    seeds = _normalize_ids(graph, seeds)
    if len(seeds) == 0:
        raise DataError("sample_subgraph requires at least one seed")
    rng = derived_rng(TAG_SUBGRAPH, rng_seed)
    kept = [[] for _ in range(graph.schema.num_relations)]
    for g in seeds:
        ref = graph.ref_of(int(g))
        for r in range(graph.schema.num_relations):
            ids = graph.incident_edges(ref, r)
            if len(ids) > degree_limit:
                ids = np.sort(rng.choice(ids, size=degree_limit, replace=False))
            if len(ids):
                kept[r].append(ids)
    nodes = [seeds]
    rel_pairs = []
    for r in range(graph.schema.num_relations):
        s_t, d_t = graph.schema.pairs[r]
        if kept[r]:
            ids = np.unique(np.concatenate(kept[r]))
        else:
            ids = np.empty(0, dtype=np.int64)
        gs = graph.rel_src[r][ids] + graph.offsets[s_t]
        gd = graph.rel_dst[r][ids] + graph.offsets[d_t]
        rel_pairs.append((gs, gd))
        nodes.append(gs)
        nodes.append(gd)
    nodes = np.unique(np.concatenate(nodes))
    node_types = graph.type_of_global(nodes)
    intra_ids = nodes - graph.offsets[node_types]
    boundaries = np.searchsorted(node_types, np.arange(graph.num_types + 1))
    type_slices = [(int(boundaries[t]), int(boundaries[t + 1])) for t in range(graph.num_types)]
    rel_src, rel_dst = [], []
    for gs, gd in rel_pairs:
        rel_src.append(np.searchsorted(nodes, gs).astype(np.int64))
        rel_dst.append(np.searchsorted(nodes, gd).astype(np.int64))
    seed_locals = np.searchsorted(nodes, seeds).astype(np.int64)
    return Subgraph(nodes=nodes, node_types=node_types, intra_ids=intra_ids,
                    type_slices=type_slices, seeds=seeds, seed_locals=seed_locals,
                    rel_src=rel_src, rel_dst=rel_dst)


def _normalize_ids(graph, items):
    out = []
    for it in items:
        if isinstance(it, (int, np.integer)):
            g = int(it)
            if g < 0 or g >= graph.num_nodes:
                raise DataError("global index %d out of range" % g)
            out.append(g)
        else:
            out.append(graph.global_index(it))
    return np.unique(np.asarray(out, dtype=np.int64))


# ---------------------------------------------------------------------------
# increments


def apply_increment(graph, batch):
    """Append ``batch`` to ``graph`` and return (new_graph, stats).

    New intra ids must continue each type's range contiguously. Duplicate
    edges (against the base graph or within the batch) are dropped with a
    warning; self-loops and dangling endpoints are errors. Existing node
    indices and all existing rows are carried over untouched.
    """
    counts = list(graph.counts)
    dim = graph.input_dim
    per_type_new = [[] for _ in range(graph.num_types)]
    seen_new = set()
    for ref, values, mask in batch.new_nodes:
        t, i = int(ref[0]), int(ref[1])
        if t < 0 or t >= graph.num_types:
            raise DataError("unknown node type %d in increment" % t)
        if (t, i) in seen_new:
            raise DataError("duplicate new node (%d, %d) in increment" % (t, i))
        seen_new.add((t, i))
        if i < counts[t]:
            raise DataError("new node (%d, %d) already exists" % (t, i))
        if values is None:
            values = np.zeros(dim)
            mask = np.zeros(dim, dtype=bool)
        else:
            values = np.asarray(values, dtype=np.float64)
            if mask is None:
                mask = np.ones(dim, dtype=bool)
            else:
                mask = np.asarray(mask, dtype=bool)
            if values.shape != (dim,) or mask.shape != (dim,):
                raise DataError("new node (%d, %d): feature shape %s != (%d,)" % (t, i, values.shape, dim))
            if not np.all(np.isfinite(values[mask])):
                raise DataError("new node (%d, %d): non-finite feature values" % (t, i))
        per_type_new[t].append((i, values, mask))

    feature_blocks = []
    mask_blocks = []
    new_counts = list(counts)
    for t in range(graph.num_types):
        entries = sorted(per_type_new[t])
        ids = [e[0] for e in entries]
        if ids != list(range(counts[t], counts[t] + len(ids))):
            raise DataError("type %d: new intra ids %s do not contiguously extend count %d"
                            % (t, ids, counts[t]))
        new_counts[t] = counts[t] + len(ids)
        if entries:
            feature_blocks.append(np.concatenate(
                [graph.feature_blocks[t], np.stack([e[1] for e in entries])], axis=0))
            mask_blocks.append(np.concatenate(
                [graph.mask_blocks[t], np.stack([e[2] for e in entries])], axis=0))
        else:
            feature_blocks.append(graph.feature_blocks[t])
            mask_blocks.append(graph.mask_blocks[t])

    existing = graph.edge_keys()
    add_src = [[] for _ in range(graph.schema.num_relations)]
    add_dst = [[] for _ in range(graph.schema.num_relations)]
    add_ts = [[] for _ in range(graph.schema.num_relations)]
    accepted = []
    dropped = 0
    for src_ref, dst_ref, r, ts in batch.new_edges:
        r = int(r)
        if r < 0 or r >= graph.schema.num_relations:
            raise DataError("unknown relation id %d in increment" % r)
        s_t, d_t = graph.schema.pairs[r]
        st, si = int(src_ref[0]), int(src_ref[1])
        dt, di = int(dst_ref[0]), int(dst_ref[1])
        if st != s_t or dt != d_t:
            raise DataError("relation %d endpoint type mismatch: got (%d, %d), schema (%d, %d)"
                            % (r, st, dt, s_t, d_t))
        if si < 0 or si >= new_counts[st] or di < 0 or di >= new_counts[dt]:
            raise DataError("dangling endpoint in increment edge (%d,%d)->(%d,%d)" % (st, si, dt, di))
        if st == dt and si == di:
            raise DataError("self-loop rejected in increment: (%d, %d)" % (st, si))
        key = (r, si, di)
        if key in existing:
            dropped += 1
            continue
        existing.add(key)
        add_src[r].append(si)
        add_dst[r].append(di)
        add_ts[r].append(float(ts))
        accepted.append((NodeRef(st, si), NodeRef(dt, di), r, float(ts)))
    if dropped:
        warnings.warn("increment: dropped %d duplicate edges" % dropped)

    rel_edges = []
    for r in range(graph.schema.num_relations):
        rel_edges.append((
            np.concatenate([graph.rel_src[r], np.asarray(add_src[r], dtype=np.int64)]),
            np.concatenate([graph.rel_dst[r], np.asarray(add_dst[r], dtype=np.int64)]),
            np.concatenate([graph.rel_ts[r], np.asarray(add_ts[r], dtype=np.float64)]),
        ))
    out = HeteroGraph(graph.schema, feature_blocks, mask_blocks, rel_edges)
    stats = {"n_new_nodes": len(batch.new_nodes),
             "n_new_edges": sum(len(s) for s in add_src),
             "n_duplicate_edges_dropped": dropped,
             "accepted_edges": accepted}
    return out, stats


# ---------------------------------------------------------------------------
# tabular IO


def _open_text(source, mode="r"):
    if hasattr(source, "read") or hasattr(source, "write"):
        return source, False
    try:
        return open(os.fspath(source), mode, encoding="utf-8"), True
    except OSError as exc:
        raise DataError("cannot open %s: %s" % (source, exc.strerror or exc)) from exc


def _rows(source, expected_fields, label):
    fh, owned = _open_text(source)
    try:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != expected_fields:
                raise GraphFormatError("%s:%d: expected %d tab-separated fields, got %d"
                                       % (label, lineno, expected_fields, len(fields)))
            yield lineno, fields
    finally:
        if owned:
            fh.close()


def _parse_int(text, label, lineno, what):
    try:
        return int(text)
    except ValueError:
        raise GraphFormatError("%s:%d: %s is not an integer: %r" % (label, lineno, what, text)) from None


def load_schema(source):
    label = getattr(source, "name", None) or str(source)
    rows = {}
    for lineno, f in _rows(source, 3, label):
        r = _parse_int(f[0], label, lineno, "relation_id")
        s = _parse_int(f[1], label, lineno, "src_type")
        t = _parse_int(f[2], label, lineno, "dst_type")
        if r in rows:
            raise GraphFormatError("%s:%d: duplicate relation id %d" % (label, lineno, r))
        rows[r] = (s, t)
    if rows and sorted(rows) != list(range(len(rows))):
        raise DataError("%s: relation ids must be dense 0..%d, got %s"
                        % (label, len(rows) - 1, sorted(rows)))
    return RelationSchema([rows[r] for r in range(len(rows))])


def load_graph(edges, features, schema):
    """Assemble a ``HeteroGraph`` from edges/features TSV plus a schema.

    ``schema`` may be a path/stream or an already-parsed ``RelationSchema``.
    Node counts are inferred from the union of ids mentioned anywhere; a gap
    in any type's intra ids is an error. Duplicate edges are dropped with a
    warning. Empty timestamps parse as 0.
    """
    if not isinstance(schema, RelationSchema):
        schema = load_schema(schema)

    feat_label = getattr(features, "name", None) or str(features)
    feat_rows = {}
    dim = None
    for lineno, f in _rows(features, 3, feat_label):
        t = _parse_int(f[0], feat_label, lineno, "node_type")
        i = _parse_int(f[1], feat_label, lineno, "node_id")
        if t < 0 or i < 0:
            raise GraphFormatError("%s:%d: negative node address" % (feat_label, lineno))
        cells = f[2].split(",")
        if dim is None:
            dim = len(cells)
        elif len(cells) != dim:
            raise GraphFormatError("%s:%d: expected %d feature values, got %d"
                                   % (feat_label, lineno, dim, len(cells)))
        values = np.zeros(dim)
        mask = np.zeros(dim, dtype=bool)
        for j, cell in enumerate(cells):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                values[j] = float(cell)
            except ValueError:
                raise GraphFormatError("%s:%d: bad feature value %r" % (feat_label, lineno, cell)) from None
            mask[j] = True
        if (t, i) in feat_rows:
            raise DataError("%s:%d: duplicate feature row for node (%d, %d)" % (feat_label, lineno, t, i))
        feat_rows[(t, i)] = (values, mask)
    if dim is None:
        raise DataError("%s: no feature rows; feature dimensionality is undefined" % feat_label)

    edge_label = getattr(edges, "name", None) or str(edges)
    edge_rows = []
    for lineno, f in _rows(edges, 6, edge_label):
        st = _parse_int(f[0], edge_label, lineno, "src_type")
        si = _parse_int(f[1], edge_label, lineno, "src_id")
        dt = _parse_int(f[2], edge_label, lineno, "dst_type")
        di = _parse_int(f[3], edge_label, lineno, "dst_id")
        r = _parse_int(f[4], edge_label, lineno, "relation_id")
        if r < 0 or r >= schema.num_relations:
            raise DataError("%s:%d: unknown relation id %d" % (edge_label, lineno, r))
        s_t, d_t = schema.pairs[r]
        if st != s_t or dt != d_t:
            raise DataError("%s:%d: relation %d endpoint type mismatch: got (%d, %d), schema (%d, %d)"
                            % (edge_label, lineno, r, st, dt, s_t, d_t))
        if st == dt and si == di:
            raise DataError("%s:%d: self-loop rejected" % (edge_label, lineno))
        if si < 0 or di < 0:
            raise GraphFormatError("%s:%d: negative node id" % (edge_label, lineno))
        ts_text = f[5].strip()
        if ts_text == "":
            ts = 0.0
        else:
            try:
                ts = float(ts_text)
            except ValueError:
                raise GraphFormatError("%s:%d: bad timestamp %r" % (edge_label, lineno, ts_text)) from None
        edge_rows.append((st, si, dt, di, r, ts))

    num_types = max(
        schema.num_types,
        1 + max((t for t, _ in feat_rows), default=-1),
        1 + max((max(e[0], e[2]) for e in edge_rows), default=-1),
    )
    if num_types <= 0:
        raise DataError("no node types present in inputs")

    seen = [set() for _ in range(num_types)]
    for (t, i) in feat_rows:
        if t >= num_types:
            raise DataError("%s: node type %d exceeds schema" % (feat_label, t))
        seen[t].add(i)
    for st, si, dt, di, r, ts in edge_rows:
        seen[st].add(si)
        seen[dt].add(di)
    counts = []
    for t in range(num_types):
        if seen[t]:
            top = max(seen[t])
            if len(seen[t]) != top + 1:
                missing = sorted(set(range(top + 1)) - seen[t])[:5]
                raise DataError("type %d: intra id gap; ids such as %s never appear" % (t, missing))
            counts.append(top + 1)
        else:
            counts.append(0)

    feature_blocks = [np.zeros((counts[t], dim)) for t in range(num_types)]
    mask_blocks = [np.zeros((counts[t], dim), dtype=bool) for t in range(num_types)]
    for (t, i), (values, mask) in feat_rows.items():
        feature_blocks[t][i] = values
        mask_blocks[t][i] = mask

    keys = set()
    rel_edges = [([], [], []) for _ in range(schema.num_relations)]
    dropped = 0
    for st, si, dt, di, r, ts in edge_rows:
        key = (r, si, di)
        if key in keys:
            dropped += 1
            continue
        keys.add(key)
        rel_edges[r][0].append(si)
        rel_edges[r][1].append(di)
        rel_edges[r][2].append(ts)
    if dropped:
        warnings.warn("%s: dropped %d duplicate edges" % (edge_label, dropped))

    rel_arrays = [(np.asarray(s, dtype=np.int64), np.asarray(d, dtype=np.int64),
                   np.asarray(ts, dtype=np.float64)) for s, d, ts in rel_edges]
    return HeteroGraph(schema, feature_blocks, mask_blocks, rel_arrays)


def save_graph(graph, edges_path, features_path, schema_path):
    """Write a graph back out in the load_graph formats (lossless round trip)."""
    with open(os.fspath(schema_path), "w", encoding="utf-8") as fh:
        for r, (s, t) in enumerate(graph.schema.pairs):
            fh.write("%d\t%d\t%d\n" % (r, s, t))
    with open(os.fspath(features_path), "w", encoding="utf-8") as fh:
        for t in range(graph.num_types):
            fb, mb = graph.feature_blocks[t], graph.mask_blocks[t]
            for i in range(graph.counts[t]):
                cells = [repr(float(fb[i, j])) if mb[i, j] else "" for j in range(graph.input_dim)]
                fh.write("%d\t%d\t%s\n" % (t, i, ",".join(cells)))
    with open(os.fspath(edges_path), "w", encoding="utf-8") as fh:
        for r in range(graph.schema.num_relations):
            s_t, d_t = graph.schema.pairs[r]
            for si, di, ts in zip(graph.rel_src[r], graph.rel_dst[r], graph.rel_ts[r]):
                fh.write("%d\t%d\t%d\t%d\t%d\t%s\n" % (s_t, si, d_t, di, r, repr(float(ts))))


def read_increment(graph, edges_source, features_source=None):
    """Parse increment files against a base graph into an ``IncrementBatch``.

    Node ids at or beyond the base counts are new nodes; a feature row for an
    existing node is an error (features are immutable once loaded). New nodes
    that appear only as edge endpoints get all-missing features.
    """
    dim = graph.input_dim
    new_feats = {}
    if features_source is not None:
        label = getattr(features_source, "name", None) or str(features_source)
        for lineno, f in _rows(features_source, 3, label):
            t = _parse_int(f[0], label, lineno, "node_type")
            i = _parse_int(f[1], label, lineno, "node_id")
            if t < 0 or t >= graph.num_types:
                raise DataError("%s:%d: unknown node type %d" % (label, lineno, t))
            if i < graph.counts[t]:
                raise DataError("%s:%d: feature row for existing node (%d, %d)" % (label, lineno, t, i))
            cells = f[2].split(",")
            if len(cells) != dim:
                raise GraphFormatError("%s:%d: expected %d feature values, got %d"
                                       % (label, lineno, dim, len(cells)))
            values = np.zeros(dim)
            mask = np.zeros(dim, dtype=bool)
            for j, cell in enumerate(cells):
                cell = cell.strip()
                if cell:
                    values[j] = float(cell)
                    mask[j] = True
            if (t, i) in new_feats:
                raise DataError("%s:%d: duplicate feature row for node (%d, %d)" % (label, lineno, t, i))
            new_feats[(t, i)] = (values, mask)

    label = getattr(edges_source, "name", None) or str(edges_source)
    new_edges = []
    mentioned = set()
    max_ts = 0.0
    for lineno, f in _rows(edges_source, 6, label):
        st = _parse_int(f[0], label, lineno, "src_type")
        si = _parse_int(f[1], label, lineno, "src_id")
        dt = _parse_int(f[2], label, lineno, "dst_type")
        di = _parse_int(f[3], label, lineno, "dst_id")
        r = _parse_int(f[4], label, lineno, "relation_id")
        ts_text = f[5].strip()
        ts = float(ts_text) if ts_text else 0.0
        max_ts = max(max_ts, ts)
        new_edges.append((NodeRef(st, si), NodeRef(dt, di), r, ts))
        for (t, i) in ((st, si), (dt, di)):
            if t < 0 or t >= graph.num_types:
                raise DataError("%s:%d: unknown node type %d" % (label, lineno, t))
            if i >= graph.counts[t]:
                mentioned.add((t, i))

    node_keys = sorted(mentioned | set(new_feats))
    new_nodes = []
    for (t, i) in node_keys:
        values, mask = new_feats.get((t, i), (None, None))
        new_nodes.append((NodeRef(t, i), values, mask))
    return IncrementBatch(new_nodes=new_nodes, new_edges=new_edges, batch_time=max_ts)

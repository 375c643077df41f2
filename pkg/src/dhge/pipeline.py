"""Snapshot lineage and the train / update / evaluate / stream drivers.

A snapshot directory holds numbered versions. Each version owns a model
file, an embedding-table file, optionally an alignment file, and a
manifest JSON that names them all. The manifest is written last, with an
atomic rename, so a crash mid-save can leave stray data files but never a
manifest pointing at missing or half-written state: a version exists if
and only if its manifest parses.
"""
from __future__ import annotations

import contextlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import (DataError, load_graph, read_increment, apply_increment,
                    NodeRef, _rows)
from .model import ModelParams, train_epoch, embed_all
from .optim import AdamW
from .incremental import capture_alignment, ille_update
from .evaluation import evaluate_table
from .snapshot import (save_model, load_model, save_table, load_table,
                       save_alignment, load_alignment, SnapshotFormatError,
                       _atomic_bytes)
from .seeding import mix

MANIFEST_RE = re.compile(r"^manifest-(\d{6})\.json$")


@dataclass
class Manifest:
    """One snapshot version: file names plus lineage metadata."""

    version: int
    kind: str                      # "static" or "incremental"
    created_ms: int
    model_path: str
    table_path: str
    config_digest: str
    alignment_path: Optional[str] = None
    parent_version: Optional[int] = None
    # ordered (edges_path, features_path_or_None) pairs applied on top of
    # the base graph to reconstruct this version's graph
    increments: list = field(default_factory=list)

    def to_json_dict(self):
        return {
            "version": self.version,
            "kind": self.kind,
            "created_ms": self.created_ms,
            "model_path": self.model_path,
            "table_path": self.table_path,
            "alignment_path": self.alignment_path,
            "config_digest": self.config_digest,
            "parent_version": self.parent_version,
            "increments": [list(pair) for pair in self.increments],
        }

    @classmethod
    def from_json_dict(cls, data):
        required = ("version", "kind", "created_ms", "model_path",
                    "table_path", "config_digest")
        for key in required:
            if key not in data:
                raise SnapshotFormatError("manifest missing field %r" % key)
        if data["kind"] not in ("static", "incremental"):
            raise SnapshotFormatError("unknown snapshot kind %r" % data["kind"])
        incs = [(pair[0], pair[1]) for pair in data.get("increments", [])]
        return cls(version=int(data["version"]), kind=data["kind"],
                   created_ms=int(data["created_ms"]),
                   model_path=data["model_path"], table_path=data["table_path"],
                   config_digest=data["config_digest"],
                   alignment_path=data.get("alignment_path"),
                   parent_version=data.get("parent_version"),
                   increments=incs)


def manifest_path(snapshot_dir, version):
    return os.path.join(os.fspath(snapshot_dir), "manifest-%06d.json" % version)


LOCK_NAME = "lock"
_held_locks = set()


def _pid_alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextlib.contextmanager
def snapshot_lock(snapshot_dir):
    """Advisory writer lock: one mutating command per snapshot directory.

    A pid file created with O_EXCL and removed on exit. Re-entrant within
    a process (stream replay drives train/update under one outer lock); a
    lock whose owner is gone is reclaimed, a live owner is an error.
    Read-only commands (evaluate, retrieve) never take it: they resolve a
    pinned manifest version, which a concurrent writer cannot mutate.
    """
    sd = os.fspath(snapshot_dir)
    os.makedirs(sd, exist_ok=True)
    path = os.path.realpath(os.path.join(sd, LOCK_NAME))
    if path in _held_locks:
        yield
        return
    while True:
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
            break
        except FileExistsError:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    owner = int(fh.read().strip() or "0")
            except (OSError, ValueError):
                owner = 0
            if owner and owner != os.getpid() and _pid_alive(owner):
                raise DataError("snapshot directory %s is locked by running "
                                "process %d" % (sd, owner))
            # stale lock from a dead process: reclaim it
            with contextlib.suppress(FileNotFoundError):
                os.unlink(path)
    try:
        os.write(fd, ("%d\n" % os.getpid()).encode("ascii"))
        os.close(fd)
        _held_locks.add(path)
        yield
    finally:
        _held_locks.discard(path)
        with contextlib.suppress(FileNotFoundError):
            os.unlink(path)


def list_versions(snapshot_dir):
    """Sorted version numbers that have a manifest present."""
    try:
        names = os.listdir(os.fspath(snapshot_dir))
    except FileNotFoundError:
        return []
    out = []
    for name in names:
        m = MANIFEST_RE.match(name)
        if m:
            out.append(int(m.group(1)))
    return sorted(out)


def load_manifest(snapshot_dir, version):
    path = manifest_path(snapshot_dir, version)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise DataError("no snapshot version %d in %s" % (version, snapshot_dir))
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError("corrupt manifest %s: %s" % (path, exc))
    man = Manifest.from_json_dict(data)
    if man.version != version:
        raise SnapshotFormatError("manifest %s claims version %d" % (path, man.version))
    return man


def latest_manifest(snapshot_dir):
    versions = list_versions(snapshot_dir)
    if not versions:
        return None
    return load_manifest(snapshot_dir, versions[-1])


def resolve_manifest(snapshot_dir, version=None):
    if version is not None:
        return load_manifest(snapshot_dir, version)
    man = latest_manifest(snapshot_dir)
    if man is None:
        raise DataError("no snapshots in %s; run train first" % snapshot_dir)
    return man


def write_snapshot(snapshot_dir, kind, model_config, params, table,
                   alignment, config_digest, parent_version, increments):
    """Persist all state files, then the manifest (last, atomically)."""
    sd = os.fspath(snapshot_dir)
    os.makedirs(sd, exist_ok=True)
    versions = list_versions(sd)
    version = (versions[-1] + 1) if versions else 1
    stem = "v%06d" % version
    model_name = stem + ".model"
    table_name = stem + ".table.npz"
    align_name = stem + ".align.npz" if alignment is not None else None
    save_model(os.path.join(sd, model_name), params, model_config)
    save_table(os.path.join(sd, table_name), table)
    if alignment is not None:
        save_alignment(os.path.join(sd, align_name), alignment)
    man = Manifest(version=version, kind=kind,
                   created_ms=int(time.time() * 1000),
                   model_path=model_name, table_path=table_name,
                   alignment_path=align_name, config_digest=config_digest,
                   parent_version=parent_version,
                   increments=list(increments))
    blob = json.dumps(man.to_json_dict(), indent=2, sort_keys=True).encode("utf-8")
    _atomic_bytes(manifest_path(sd, version), blob)
    return man


def load_snapshot_state(snapshot_dir, man):
    """Load (model_config, params, table, alignment_or_None) for a manifest."""
    sd = os.fspath(snapshot_dir)
    model_config, params = load_model(os.path.join(sd, man.model_path))
    table = load_table(os.path.join(sd, man.table_path))
    alignment = None
    if man.alignment_path is not None:
        alignment = load_alignment(os.path.join(sd, man.alignment_path))
    return model_config, params, table, alignment


def base_graph(cfg):
    cfg.require_paths("edges", "features", "schema")
    return load_graph(cfg.paths["edges"], cfg.paths["features"], cfg.paths["schema"])


def graph_for_manifest(cfg, man):
    """Base graph with the manifest's increment history replayed on top."""
    graph = base_graph(cfg)
    for edges_path, features_path in man.increments:
        batch = read_increment(graph, edges_path, features_path)
        graph, _ = apply_increment(graph, batch)
    return graph


def read_test_interactions(path, user_type, item_type):
    """Load held-out (user_ref, item_ref, ts) rows from an edge-format TSV.

    Rows whose source type is not user_type are skipped (mirrored link
    rows in reused files), so a training-format file works unchanged.
    """
    label = os.fspath(path)
    rows = []
    for lineno, parts in _rows(label, 6, label):
        st, si, dt, di = (int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]))
        ts = float(parts[5]) if parts[5] else 0.0
        if st != user_type:
            continue
        if dt != item_type:
            raise DataError("%s:%d: test row destination type %d, expected %d"
                            % (label, lineno, dt, item_type))
        rows.append((NodeRef(st, si), NodeRef(dt, di), ts))
    if not rows:
        raise DataError("%s: no test interactions for user type %d" % (path, user_type))
    return rows


def _check_digest(cfg, man, log):
    if man.config_digest != cfg.digest():
        log({"event": "warning",
             "message": "config differs from snapshot v%d; proceeding with"
                        " current config" % man.version})


def _null_log(_record):
    return None


def cmd_train(cfg, log=_null_log):
    """Full training run; returns (manifest, per-epoch metric dicts).

    Warm-starts from the latest snapshot's weights (including its
    increment history) unless train.cold_start_retrain is set or no
    snapshot exists yet.
    """
    cfg.require_paths("edges", "features", "schema", "snapshot_dir")
    sd = cfg.paths["snapshot_dir"]
    with snapshot_lock(sd):
        return _train_locked(cfg, sd, log)


def _train_locked(cfg, sd, log):
    parent = latest_manifest(sd)
    t0 = time.perf_counter()
    if parent is not None:
        graph = graph_for_manifest(cfg, parent)
        increments = list(parent.increments)
    else:
        graph = base_graph(cfg)
        increments = []
    model_config = cfg.model_config(input_dim=graph.input_dim)
    id_capacity = int(max(graph.counts)) if graph.num_nodes else 1
    seed = cfg.pipeline["rng_seed"]
    warm = parent is not None and not cfg.train["cold_start_retrain"]
    if warm:
        snap_config, params, _, _ = load_snapshot_state(sd, parent)
        if snap_config.input_dim != model_config.input_dim:
            raise DataError("snapshot input dim %d does not match data dim %d"
                            % (snap_config.input_dim, model_config.input_dim))
        _check_digest(cfg, parent, log)
        params.ensure_id_capacity(id_capacity, grow_seed=seed)
    else:
        params = ModelParams(model_config, num_types=graph.num_types,
                             num_relations=graph.schema.num_relations,
                             id_capacity=id_capacity, init_seed=seed)
    log({"event": "train_start", "warm_start": warm,
         "num_nodes": graph.num_nodes, "num_edges": graph.num_edges,
         "epochs": cfg.train["epochs"]})
    opt = AdamW(lr=cfg.train["learning_rate"],
                weight_decay=cfg.train["weight_decay"])
    metrics = []
    for epoch in range(cfg.train["epochs"]):
        m = train_epoch(graph, params, model_config, opt, epoch=epoch)
        m["event"] = "epoch"
        log(m)
        metrics.append(m)
    versions = list_versions(sd)
    next_version = (versions[-1] + 1) if versions else 1
    table = embed_all(graph, params, model_config, version=next_version)
    alignment = None
    if cfg.pipeline["capture_alignment"] and graph.num_edges > 0:
        ucfg = cfg.update_config()
        alignment = capture_alignment(graph, table, k=ucfg.k, eps=ucfg.eps,
                                      rng_seed=seed,
                                      weight_space=ucfg.weight_space)
    man = write_snapshot(sd, "static", model_config, params, table, alignment,
                         cfg.digest(),
                         parent.version if parent is not None else None,
                         increments)
    refresh_ms = (time.perf_counter() - t0) * 1000.0
    log({"event": "snapshot", "version": man.version, "kind": man.kind,
         "refresh_ms": refresh_ms})
    return man, metrics


def cmd_update(cfg, edges_path, features_path=None, version=None, log=_null_log):
    """Apply one increment batch on top of a snapshot; returns (manifest, report)."""
    cfg.require_paths("edges", "features", "schema", "snapshot_dir")
    sd = cfg.paths["snapshot_dir"]
    with snapshot_lock(sd):
        return _update_locked(cfg, sd, edges_path, features_path, version, log)


def _update_locked(cfg, sd, edges_path, features_path, version, log):
    parent = resolve_manifest(sd, version)
    _check_digest(cfg, parent, log)
    graph = graph_for_manifest(cfg, parent)
    model_config, params, table, alignment = load_snapshot_state(sd, parent)
    batch = read_increment(graph, edges_path, features_path)
    seed = mix(cfg.pipeline["rng_seed"], parent.version)
    graph2, params2, table2, report, alignment2 = ille_update(
        graph, batch, params, table, model_config, cfg.update_config(),
        alignment=alignment, rng_seed=seed)
    increments = list(parent.increments)
    increments.append((os.fspath(edges_path),
                       os.fspath(features_path) if features_path else None))
    man = write_snapshot(sd, "incremental", model_config, params2, table2,
                         alignment2, cfg.digest(), parent.version, increments)
    report["event"] = "update"
    report["version"] = man.version
    log(report)
    return man, report


def cmd_evaluate(cfg, test_path, version=None, missing_users="drop", log=_null_log):
    """Rank held-out interactions against a snapshot's embedding table."""
    cfg.require_paths("edges", "features", "schema", "snapshot_dir")
    sd = cfg.paths["snapshot_dir"]
    man = resolve_manifest(sd, version)
    graph = graph_for_manifest(cfg, man)
    _, _, table, _ = load_snapshot_state(sd, man)
    user_type = cfg.eval["user_type"]
    item_type = cfg.eval["item_type"]
    tests = read_test_interactions(test_path, user_type, item_type)
    report = evaluate_table(graph, table, tests, cfg.protocol(),
                            user_type=user_type, item_type=item_type,
                            missing_users=missing_users)
    out = report.to_json_dict()
    out["event"] = "evaluate"
    out["version"] = man.version
    log(out)
    return report


def cmd_retrieve(cfg, user_intra_id, k=10, version=None, exclude_known=True):
    """Top-k items for one user from a snapshot's table.

    Returns a list of {type, id, score} dicts, best first.
    """
    cfg.require_paths("edges", "features", "schema", "snapshot_dir")
    sd = cfg.paths["snapshot_dir"]
    man = resolve_manifest(sd, version)
    graph = graph_for_manifest(cfg, man)
    _, _, table, _ = load_snapshot_state(sd, man)
    user_type = cfg.eval["user_type"]
    item_type = cfg.eval["item_type"]
    ref = NodeRef(user_type, int(user_intra_id))
    graph.check_ref(ref)
    if ref.intra_id >= table.counts[user_type]:
        raise DataError("user %d not present in table version %d"
                        % (ref.intra_id, table.version))
    from .evaluation import cosine_topk
    query = table.row(ref)
    n_items = min(int(graph.counts[item_type]), int(table.counts[item_type]))
    items = table.blocks[item_type][:n_items]
    known = set()
    if exclude_known:
        for g in graph.neighbors_of(ref):
            nbr = graph.ref_of(int(g))
            if nbr.node_type == item_type:
                known.add(nbr.intra_id)
    keep = np.array([i for i in range(n_items) if i not in known], dtype=np.int64)
    if keep.size == 0:
        return []
    order, scores = cosine_topk(query, items[keep], min(k, keep.size))
    return [{"type": item_type, "id": int(keep[j]), "score": float(s)}
            for j, s in zip(order, scores)]


def cmd_simulate_stream(cfg, batches, test_path, compare_frozen=False,
                        missing_users="miss", log=_null_log):
    """Replay increment batches: update, then evaluate after each batch.

    batches: ordered (edges_path, features_path_or_None) pairs. When
    compare_frozen is set, each evaluation is also run against the
    pre-stream snapshot so staleness is measurable. Uses missing_users=
    "miss" by default: users absent from a table count as misses, which
    keeps the frozen and updated scores on the same denominator.
    """
    cfg.require_paths("edges", "features", "schema", "snapshot_dir")
    sd = cfg.paths["snapshot_dir"]
    with snapshot_lock(sd):
        return _stream_locked(cfg, sd, batches, test_path, compare_frozen,
                              missing_users, log)


def _stream_locked(cfg, sd, batches, test_path, compare_frozen, missing_users, log):
    frozen = resolve_manifest(sd, None)
    user_type = cfg.eval["user_type"]
    item_type = cfg.eval["item_type"]
    tests = read_test_interactions(test_path, user_type, item_type)
    refresh_every = cfg.pipeline["static_refresh_every"]
    rows = []
    for j, (edges_path, features_path) in enumerate(batches):
        man, report = cmd_update(cfg, edges_path, features_path, log=log)
        if refresh_every and (j + 1) % refresh_every == 0:
            man, _ = cmd_train(cfg, log=log)
        graph = graph_for_manifest(cfg, man)
        _, _, table, _ = load_snapshot_state(sd, man)
        rep = evaluate_table(graph, table, tests, cfg.protocol(),
                             user_type=user_type, item_type=item_type,
                             missing_users=missing_users)
        row = {"event": "stream_eval", "batch": j, "version": man.version,
               "update": {key: report[key] for key in
                          ("n_new_nodes", "n_new_edges", "n_updated",
                           "n_cold_isolated", "reconstruction_loss", "wall_ms")},
               "eval": rep.to_json_dict()}
        if compare_frozen:
            fg = graph_for_manifest(cfg, frozen)
            _, _, ftable, _ = load_snapshot_state(sd, frozen)
            frep = evaluate_table(fg, ftable, tests, cfg.protocol(),
                                  user_type=user_type, item_type=item_type,
                                  missing_users=missing_users)
            row["frozen_eval"] = frep.to_json_dict()
        log(row)
        rows.append(row)
    return rows

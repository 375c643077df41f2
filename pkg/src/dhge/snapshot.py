"""Binary persistence for model parameters, embedding tables, and alignment.

Model files are a little-endian framed format: magic ``DHGM``, a u32 format
version, a length-prefixed UTF-8 ``key=value`` config block, then a count of
tensor records (name, rows, cols, row-major float32 payload). Training math
is float64 but snapshots quantize to float32; a load/save round trip of an
existing snapshot is byte-identical. All writers are write-then-rename so a
crash never leaves a partially written file at the target path.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .graph import DataError, NodeRef
from .incremental import AlignmentState
from .model import EmbeddingTable, ModelConfig, ModelParams
from .tensor import Param

MAGIC = b"DHGM"
FORMAT_VERSION = 1


class SnapshotFormatError(DataError):
    """A snapshot file is malformed or has an unsupported version."""


def _atomic_bytes(path, payload):
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _tensor_record(name, value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError("tensor %r has unsupported rank %d" % (name, arr.ndim))
    payload = arr.astype("<f4").tobytes(order="C")
    name_b = name.encode("utf-8")
    head = struct.pack("<I", len(name_b)) + name_b + struct.pack("<II", arr.shape[0], arr.shape[1])
    return head + payload


def save_model(path, params, config):
    """Serialize ModelParams plus its config block; atomic on completion."""
    items = config.to_items()
    config_block = "".join("%s=%s\n" % (k, items[k]) for k in sorted(items)).encode("utf-8")
    tensors = params.all_params()
    body = [MAGIC, struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", len(config_block)), config_block,
            struct.pack("<I", len(tensors))]
    for p in tensors:
        body.append(_tensor_record(p.name, p.value))
    _atomic_bytes(path, b"".join(body))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise SnapshotFormatError("truncated snapshot while reading %s" % what)
    return buf


def load_model(path):
    """Parse a model snapshot; returns (ModelConfig, ModelParams).

    Float32 payloads are promoted to float64 in memory, so a subsequent
    ``save_model`` reproduces the file byte for byte.
    """
    with open(os.fspath(path), "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise SnapshotFormatError("bad magic; not a model snapshot")
        version = struct.unpack("<I", _read_exact(fh, 4, "format version"))[0]
        if version != FORMAT_VERSION:
            raise SnapshotFormatError("unsupported snapshot format version %d" % version)
        cfg_len = struct.unpack("<I", _read_exact(fh, 4, "config length"))[0]
        cfg_text = _read_exact(fh, cfg_len, "config block").decode("utf-8")
        items = {}
        for line in cfg_text.splitlines():
            if not line.strip():
                continue
            if "=" not in line:
                raise SnapshotFormatError("malformed config line %r" % line)
            key, _, value = line.partition("=")
            items[key] = value
        n_tensors = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))[0]
        tensors = {}
        order = []
        for _ in range(n_tensors):
            name_len = struct.unpack("<I", _read_exact(fh, 4, "name length"))[0]
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            rows, cols = struct.unpack("<II", _read_exact(fh, 8, "tensor shape"))
            payload = _read_exact(fh, rows * cols * 4, "tensor payload %r" % name)
            arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
            tensors[name] = arr
            order.append(name)
        if fh.read(1):
            raise SnapshotFormatError("trailing bytes after final tensor record")
    config = ModelConfig.from_items(items)
    return config, _assemble_params(config, tensors)


def _assemble_params(config, tensors):
    def take(name, scalar=False, row=False):
        if name not in tensors:
            raise SnapshotFormatError("model snapshot missing tensor %r" % name)
        arr = tensors.pop(name)
        if scalar:
            if arr.shape != (1, 1):
                raise SnapshotFormatError("tensor %r expected scalar, got %s" % (name, arr.shape))
            return Param(arr.reshape(()), name)
        if row:
            return Param(arr.reshape(1, -1), name)
        return Param(arr, name)

    num_types = tensors["type_table"].shape[0] if "type_table" in tensors else 0
    num_relations = sum(1 for n in tensors if n.startswith("rel_factor_"))
    out = object.__new__(ModelParams)
    out.num_types = num_types
    out.num_relations = num_relations
    out.input_dim = config.input_dim
    out.hidden_dim = config.hidden_dim
    out.num_gcn_layers = config.num_gcn_layers
    out.input_weight = take("input_weight")
    out.input_bias = take("input_bias", row=True)
    out.imputation_token = take("imputation_token", row=True)
    out.id_table = take("id_table")
    out.type_table = take("type_table")
    out.attn_query = take("attn_query")
    out.attn_key = take("attn_key")
    out.attn_value = take("attn_value")
    out.type_query = [take("type_query_%d" % t) for t in range(num_types)]
    out.type_key = [take("type_key_%d" % t) for t in range(num_types)]
    out.type_value = [take("type_value_%d" % t) for t in range(num_types)]
    out.rel_factor = [take("rel_factor_%d" % r, scalar=True) for r in range(num_relations)]
    out.rel_attn = [take("rel_attn_%d" % r) for r in range(num_relations)]
    out.rel_msg = [take("rel_msg_%d" % r) for r in range(num_relations)]
    out.type_mix = [take("type_mix_%d" % t, scalar=True) for t in range(num_types)]
    out.gcn_weight = [take("gcn_weight_%d" % l) for l in range(config.num_gcn_layers)]
    if tensors:
        raise SnapshotFormatError("model snapshot has unexpected tensors: %s" % sorted(tensors))
    return out


def save_table(path, table):
    """Embedding table as float32 npz blocks plus version metadata."""
    payload = {"version": np.asarray([table.version], dtype=np.int64),
               "created_ms": np.asarray([table.created_ms], dtype=np.int64),
               "num_types": np.asarray([len(table.blocks)], dtype=np.int64)}
    for t, block in enumerate(table.blocks):
        payload["block_%d" % t] = block.astype("<f4")
    path = os.fspath(path)
    tmp = path + ".tmp.npz"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_table(path):
    with np.load(os.fspath(path), allow_pickle=False) as data:
        num_types = int(data["num_types"][0])
        blocks = [data["block_%d" % t].astype(np.float64) for t in range(num_types)]
        return EmbeddingTable(blocks, version=int(data["version"][0]),
                              created_ms=int(data["created_ms"][0]))


def save_alignment(path, state):
    """Alignment rows and spectrum, float64 (internal math, not serving data)."""
    refs = sorted(state.rows)
    counts = np.asarray([len(state.rows[r][0]) for r in refs], dtype=np.int64)
    nbr_types, nbr_intras, weights = [], [], []
    for r in refs:
        nbrs, w = state.rows[r]
        nbr_types.extend(nb[0] for nb in nbrs)
        nbr_intras.extend(nb[1] for nb in nbrs)
        weights.extend(np.asarray(w, dtype=np.float64).tolist())
    payload = {
        "k": np.asarray([state.k], dtype=np.int64),
        "lam": np.asarray(state.lam, dtype=np.float64),
        "row_types": np.asarray([r[0] for r in refs], dtype=np.int64),
        "row_intras": np.asarray([r[1] for r in refs], dtype=np.int64),
        "counts": counts,
        "nbr_types": np.asarray(nbr_types, dtype=np.int64),
        "nbr_intras": np.asarray(nbr_intras, dtype=np.int64),
        "weights": np.asarray(weights, dtype=np.float64),
    }
    path = os.fspath(path)
    tmp = path + ".tmp.npz"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_alignment(path):
    with np.load(os.fspath(path), allow_pickle=False) as data:
        rows = {}
        offset = 0
        counts = data["counts"]
        nbr_types = data["nbr_types"]
        nbr_intras = data["nbr_intras"]
        weights = data["weights"]
        for rt, ri, c in zip(data["row_types"], data["row_intras"], counts):
            nbrs = tuple(NodeRef(int(t), int(i))
                         for t, i in zip(nbr_types[offset:offset + c], nbr_intras[offset:offset + c]))
            rows[NodeRef(int(rt), int(ri))] = (nbrs, weights[offset:offset + c].copy())
            offset += int(c)
        return AlignmentState(k=int(data["k"][0]), lam=np.array(data["lam"]), rows=rows)

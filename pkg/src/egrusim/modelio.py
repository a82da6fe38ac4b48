"""Model container and input file formats.

Model file layout (all multi-byte numbers little-endian)::

    b"EGRUSIM-MODEL\\n"
    b"version 1\\n"
    b"header-bytes <N>\\n"
    <N bytes of UTF-8 JSON header>
    <blobs, back to back, in the order listed in header["blobs"]>

Every blob holds 4-byte elements: ``f32`` (IEEE-754) or ``u32``. The header
carries a SHA-256 over the concatenated blob bytes. See docs/FORMATS.md.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct

import numpy as np

from .dvs import SENSOR_SIZE, CoordinateError, GestureClassifierParams
from .egru import GATES, EgruLayerParams
from .lm import CHUNK_LEN, EmbeddingTable, LanguageModel
from .sparse import CsrMatrix, DimensionError

MAGIC = b"EGRUSIM-MODEL\n"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}

DVS_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "V3")])
FEATURE_MAGIC = b"EGFEAT01"
DATASET_MAGIC = b"EGFSET01"


class ModelFormatError(ValueError):
    pass


class VersionMismatch(ModelFormatError):
    pass


class ChecksumMismatch(ModelFormatError):
    pass


class MalformedRecord(ValueError):
    pass


class _BlobWriter:
    def __init__(self):
        self.entries, self.chunks = [], []

    def add(self, name: str, array, dtype: str):
        a = np.ascontiguousarray(array, dtype=DTYPES[dtype])
        self.entries.append({"name": name, "dtype": dtype, "count": int(a.size)})
        self.chunks.append(a.tobytes())

    def csr(self, name: str, m: CsrMatrix):
        self.add(f"{name}.values", m.values, "f32")
        self.add(f"{name}.col_indices", m.col_indices, "u32")
        self.add(f"{name}.row_extents", m.row_extents, "u32")


def _layer_header(p: EgruLayerParams) -> dict:
    theta = np.unique(p.theta)
    return {
        "n_in": p.n_in,
        "n_units": p.n_units,
        "lambda_sg": p.lambda_sg,
        "epsilon_sg": p.epsilon_sg,
        "theta": float(theta[0]) if theta.size == 1 else "per-unit",
    }


def _write_layer(w: _BlobWriter, i: int, p: EgruLayerParams):
    for g in GATES:
        w.csr(f"layer{i}.W_{g}_x", getattr(p, f"W_{g}_x"))
    for g in GATES:
        w.csr(f"layer{i}.W_{g}_y", getattr(p, f"W_{g}_y"))
    for name in ("b_u", "b_r", "b_z", "theta"):
        w.add(f"layer{i}.{name}", getattr(p, name), "f32")


def save_model(model) -> bytes:
    """Serialize a :class:`LanguageModel` or :class:`GestureClassifierParams`."""
    w = _BlobWriter()
    header = {"layers": [_layer_header(p) for p in model.layers]}
    for i, p in enumerate(model.layers):
        _write_layer(w, i, p)
    if isinstance(model, LanguageModel):
        header["kind"] = "lm"
        header["lm"] = {
            "vocab": list(model.vocab),
            "unk_token": model.unk_token,
            "start_token": model.start_token,
            "embedding_dim": model.embedding.dim,
            "chunk_len": CHUNK_LEN,
        }
        w.add("embedding", model.embedding.vectors, "f32")
    elif isinstance(model, GestureClassifierParams):
        header["kind"] = "dvs"
        header["dvs"] = {"n_classes": model.n_classes, "feature_dim": model.feature_dim, "aggregate": model.aggregate}
        w.add("readout", model.readout, "f32")
        w.add("readout_bias", model.readout_bias, "f32")
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    payload = b"".join(w.chunks)
    header["blobs"] = w.entries
    header["blob_bytes"] = len(payload)
    header["checksum"] = {"algorithm": "sha256", "hex": hashlib.sha256(payload).hexdigest()}
    text = json.dumps(header, sort_keys=True, indent=1).encode()
    return MAGIC + f"version {VERSION}\n".encode() + f"header-bytes {len(text)}\n".encode() + text + payload


def read_header(data: bytes) -> tuple[dict, bytes]:
    if not data.startswith(MAGIC):
        raise ModelFormatError("not an egrusim model file")
    pos = len(MAGIC)
    lines = []
    for _ in range(2):
        end = data.find(b"\n", pos)
        if end < 0:
            raise ModelFormatError("truncated preamble")
        lines.append(data[pos:end].decode("ascii", "replace"))
        pos = end + 1
    m = re.fullmatch(r"version (\d+)", lines[0])
    if not m:
        raise ModelFormatError("missing version line")
    if int(m.group(1)) != VERSION:
        raise VersionMismatch(f"file version {m.group(1)}, reader supports {VERSION}")
    m = re.fullmatch(r"header-bytes (\d+)", lines[1])
    if not m:
        raise ModelFormatError("missing header length")
    n = int(m.group(1))
    if len(data) < pos + n:
        raise ChecksumMismatch("file truncated inside the header")
    try:
        header = json.loads(data[pos : pos + n])
    except ValueError as e:
        raise ModelFormatError(f"unreadable header: {e}") from None
    return header, data[pos + n :]


def _split_blobs(header: dict, payload: bytes) -> dict:
    if hashlib.sha256(payload).hexdigest() != header["checksum"]["hex"]:
        raise ChecksumMismatch("blob checksum does not match (truncated or corrupted file)")
    declared = sum(4 * e["count"] for e in header["blobs"])
    if declared != len(payload) or header.get("blob_bytes") != len(payload):
        raise DimensionError(f"header declares {declared} blob bytes, file holds {len(payload)}")
    blobs, off = {}, 0
    for e in header["blobs"]:
        size = 4 * e["count"]
        blobs[e["name"]] = np.frombuffer(payload, dtype=DTYPES[e["dtype"]], count=e["count"], offset=off)
        off += size
    return blobs


def _read_csr(blobs: dict, name: str, n_rows: int, n_cols: int) -> CsrMatrix:
    try:
        return CsrMatrix(
            n_rows, n_cols, blobs[f"{name}.values"], blobs[f"{name}.col_indices"], blobs[f"{name}.row_extents"]
        )
    except KeyError as e:
        raise ModelFormatError(f"missing blob {e}") from None


def _read_layer(blobs: dict, i: int, h: dict) -> EgruLayerParams:
    n_in, n = h["n_in"], h["n_units"]
    mats = {f"W_{g}_x": _read_csr(blobs, f"layer{i}.W_{g}_x", n, n_in) for g in GATES}
    mats.update({f"W_{g}_y": _read_csr(blobs, f"layer{i}.W_{g}_y", n, n) for g in GATES})
    vecs = {k: blobs[f"layer{i}.{k}"] for k in ("b_u", "b_r", "b_z", "theta")}
    return EgruLayerParams(
        n_in, n, **mats, **vecs,
        lambda_sg=float(h.get("lambda_sg", 1.0)), epsilon_sg=float(h.get("epsilon_sg", 1.0)),
    )


def load_model(data: bytes):
    header, payload = read_header(data)
    blobs = _split_blobs(header, payload)
    layers = [_read_layer(blobs, i, h) for i, h in enumerate(header["layers"])]
    kind = header.get("kind")
    if kind == "lm":
        lm = header["lm"]
        vocab = lm["vocab"]
        vectors = blobs["embedding"]
        dim = lm["embedding_dim"]
        if vectors.size != len(vocab) * dim:
            raise DimensionError("embedding blob does not match vocab_size x embedding_dim")
        table = EmbeddingTable(vectors.reshape(len(vocab), dim))
        return LanguageModel(layers, table, vocab, lm["unk_token"], lm.get("start_token"))
    if kind == "dvs":
        d = header["dvs"]
        readout = blobs["readout"]
        if readout.size != d["n_classes"] * layers[-1].n_units:
            raise DimensionError("readout blob does not match n_classes x units")
        return GestureClassifierParams(
            layers, readout.reshape(d["n_classes"], -1), blobs["readout_bias"], d.get("aggregate", "last")
        )
    raise ModelFormatError(f"unknown model kind {kind!r}")


def load_model_file(path):
    with open(path, "rb") as f:
        return load_model(f.read())


def save_model_file(model, path):
    with open(path, "wb") as f:
        f.write(save_model(model))


def load_tokens(text: str, vocabulary, unk_token: str = "<unk>", chunk_len: int = CHUNK_LEN) -> list[list[int]]:
    """Whitespace-tokenize and map to ids; unknown words map to ``unk_token``.

    Returns consecutive chunks of ``chunk_len`` ids (the last may be shorter).
    """
    ids = vocabulary if isinstance(vocabulary, dict) else {w: i for i, w in enumerate(vocabulary)}
    if not ids:
        raise ValueError("empty vocabulary")
    if unk_token not in ids:
        raise ValueError(f"vocabulary has no unknown-word entry {unk_token!r}")
    unk = ids[unk_token]
    seq = [ids.get(w, unk) for w in text.split()]
    return [seq[i : i + chunk_len] for i in range(0, len(seq), chunk_len)]


def save_dvs_events(t, x, y, p) -> bytes:
    rec = np.zeros(len(t), dtype=DVS_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = t, x, y, p
    return rec.tobytes()


def load_dvs_events(data: bytes) -> np.ndarray:
    """Parse fixed 16-byte records into a structured array ``(t, x, y, p)``."""
    if len(data) % DVS_RECORD.itemsize:
        raise MalformedRecord(f"{len(data)} bytes is not a whole number of 16-byte records")
    rec = np.frombuffer(data, dtype=DVS_RECORD)
    if rec.size:
        if rec["x"].max() >= SENSOR_SIZE or rec["y"].max() >= SENSOR_SIZE:
            raise CoordinateError(f"coordinate outside the {SENSOR_SIZE}x{SENSOR_SIZE} sensor")
        if rec["p"].max() > 1:
            raise MalformedRecord("polarity must be 0 or 1")
        if np.any(np.diff(rec["t"].astype(np.int64)) < 0):
            raise MalformedRecord("timestamps decrease")
    return rec[["t", "x", "y", "p"]]


def save_features(features) -> bytes:
    f = np.ascontiguousarray(features, dtype="<f4")
    if f.ndim != 2:
        raise DimensionError("features must be (steps, dim)")
    return FEATURE_MAGIC + struct.pack("<II", f.shape[1], f.shape[0]) + f.tobytes()


def load_features(data: bytes) -> np.ndarray:
    if len(data) == 0:
        return np.zeros((0, 0), dtype=np.float32)
    if not data.startswith(FEATURE_MAGIC) or len(data) < 16:
        raise MalformedRecord("not a feature file")
    dim, steps = struct.unpack_from("<II", data, 8)
    if len(data) != 16 + 4 * dim * steps:
        raise MalformedRecord(f"feature file holds {len(data) - 16} data bytes, header declares {4 * dim * steps}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(steps, dim).astype(np.float32)


def save_feature_dataset(items) -> bytes:
    items = list(items)
    dims = {np.shape(f)[1] for f, _ in items}
    if len(dims) > 1:
        raise DimensionError("all items must share a feature dim")
    dim = dims.pop() if dims else 0
    parts = [DATASET_MAGIC, struct.pack("<II", len(items), dim)]
    for f, label in items:
        f = np.ascontiguousarray(f, dtype="<f4")
        parts += [struct.pack("<II", int(label), f.shape[0]), f.tobytes()]
    return b"".join(parts)


def load_feature_dataset(data: bytes) -> list[tuple[np.ndarray, int]]:
    if not data.startswith(DATASET_MAGIC) or len(data) < 16:
        raise MalformedRecord("not a feature dataset file")
    n, dim = struct.unpack_from("<II", data, 8)
    pos, items = 16, []
    for _ in range(n):
        if len(data) < pos + 8:
            raise MalformedRecord("dataset truncated")
        label, steps = struct.unpack_from("<II", data, pos)
        pos += 8
        size = 4 * steps * dim
        if len(data) < pos + size:
            raise MalformedRecord("dataset truncated")
        f = np.frombuffer(data, dtype="<f4", count=steps * dim, offset=pos).reshape(steps, dim)
        items.append((f.astype(np.float32), int(label)))
        pos += size
    if pos != len(data):
        raise MalformedRecord(f"{len(data) - pos} trailing bytes after {n} items")
    return items

"""On-disk cache of per-document states, composition, and the latency bench.

``.state`` layout (little-endian)::

    b"SSOUP1"  u16 version  32B model fingerprint
    u64 token_count  u16 len + utf-8 doc_id
    u32 n_layers  n_layers x (u32 n_heads, u32 d_head, u32 d_state)
    float32 data for every layer, in order
    u32 crc32 of everything above
"""

from __future__ import annotations

import re
import statistics
import struct
import tempfile
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CacheMissError, CorruptionError, FormatError, StaleStateError
from .souping import SoupConfig, pool_states
from .ssm import ModelState, SSMModel

MAGIC = b"SSOUP1"
VERSION = 1
_DOC_ID = re.compile(r"^[A-Za-z0-9._-]{1,200}$")


@dataclass
class StateCacheRecord:
    doc_id: str
    model_fingerprint: bytes
    token_count: int
    layers: list

    @classmethod
    def from_state(cls, doc_id, state: ModelState):
        return cls(doc_id, state.model_fingerprint, state.source_token_count,
                   [np.asarray(s, dtype=np.float32) for s in state.layers])

    def to_state(self) -> ModelState:
        return ModelState([s.copy() for s in self.layers], self.model_fingerprint, self.token_count)


def dump_state(rec: StateCacheRecord) -> bytes:
    if not _DOC_ID.match(rec.doc_id):
        raise FormatError(f"doc_id {rec.doc_id!r} must match {_DOC_ID.pattern}")
    if len(rec.model_fingerprint) != 32:
        raise FormatError("fingerprint must be 32 bytes")
    did = rec.doc_id.encode()
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION) + rec.model_fingerprint
    out += struct.pack("<QH", rec.token_count, len(did)) + did
    out += struct.pack("<I", len(rec.layers))
    for s in rec.layers:
        if s.ndim != 3:
            raise FormatError(f"layer state must be 3-d, got shape {s.shape}")
        out += struct.pack("<3I", *s.shape)
    for s in rec.layers:
        out += np.ascontiguousarray(s, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def parse_state(data: bytes, source="<bytes>") -> StateCacheRecord:
    def need(n, off, what):
        if off + n > len(data) - 4:
            raise FormatError(f"{source}: truncated ({what})")

    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: bad magic")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptionError(f"{source}: checksum mismatch")
    off = len(MAGIC)
    need(2 + 32 + 10, off, "header")
    (version,) = struct.unpack_from("<H", data, off)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    off += 2
    fp = data[off : off + 32]
    off += 32
    count, n = struct.unpack_from("<QH", data, off)
    off += 10
    need(n + 4, off, "doc id")
    doc_id = data[off : off + n].decode()
    off += n
    (L,) = struct.unpack_from("<I", data, off)
    off += 4
    need(12 * L, off, "layer shapes")
    shapes = [struct.unpack_from("<3I", data, off + 12 * i) for i in range(L)]
    off += 12 * L
    layers = []
    for shp in shapes:
        size = int(np.prod(shp))
        need(4 * size, off, "layer data")
        layers.append(np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shp).astype(np.float32))
        off += 4 * size
    if off != len(data) - 4:
        raise FormatError(f"{source}: trailing bytes")
    return StateCacheRecord(doc_id, bytes(fp), count, layers)


def save_state(rec: StateCacheRecord, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_state(rec))
    tmp.replace(path)


def load_state(path) -> StateCacheRecord:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CacheMissError([str(path)]) from None
    return parse_state(data, str(path))


class StateStore:
    """``root/<fingerprint hex>/<doc_id>.state``."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, fingerprint: bytes, doc_id: str) -> Path:
        return self.root / fingerprint.hex() / f"{doc_id}.state"

    def put(self, rec: StateCacheRecord) -> Path:
        p = self.path(rec.model_fingerprint, rec.doc_id)
        p.parent.mkdir(parents=True, exist_ok=True)
        save_state(rec, p)
        return p

    def has(self, fingerprint, doc_id):
        return self.path(fingerprint, doc_id).exists()

    def get(self, fingerprint: bytes, doc_id: str) -> StateCacheRecord:
        rec = load_state(self.path(fingerprint, doc_id))
        if rec.model_fingerprint != fingerprint:
            raise StaleStateError(f"{doc_id}: cached for a different model")
        return rec

    def doc_ids(self, fingerprint: bytes):
        d = self.root / fingerprint.hex()
        return sorted(p.stem for p in d.glob("*.state")) if d.is_dir() else []


def compose(doc_ids, cfg: SoupConfig, store: StateStore, fingerprint: bytes) -> ModelState:
    """Pool cached states of ``doc_ids`` for the model with ``fingerprint``."""
    missing = [d for d in doc_ids if not store.has(fingerprint, d)]
    if missing:
        raise CacheMissError(missing)
    return pool_states([store.get(fingerprint, d).to_state() for d in doc_ids], cfg)


# ---------------------------------------------------------------------------
# latency


def bench_latency(model: SSMModel, doc_lengths, trials=5, query_len=8, seed=0, workdir=None):
    """Per document length, median ms of (a) reading doc + query from scratch and
    (b) loading the doc's cached state from disk and reading only the query.

    The one-off cost of building the cache is not timed; one warmup trial per
    path is discarded.
    """
    rng = np.random.default_rng(seed)
    lo = 3  # skip the reserved ids
    V = model.config.vocab_size
    query = rng.integers(lo, V, size=query_len)
    rows = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for n in doc_lengths:
            doc = rng.integers(lo, V, size=n)
            path = Path(tmp) / f"doc{n}.state"
            save_state(StateCacheRecord.from_state(f"doc{n}", model.encode(doc)), path)

            def concat():
                model.decode(query, model.encode(doc))

            def cached():
                model.decode(query, load_state(path).to_state())

            times = {}
            for name, fn in (("concat", concat), ("cached", cached)):
                ts = []
                for _ in range(trials + 1):
                    t0 = time.perf_counter()
                    fn()
                    ts.append((time.perf_counter() - t0) * 1000.0)
                times[name] = statistics.median(ts[1:])
            rows.append({
                "doc_len": int(n),
                "concat_ms": times["concat"],
                "cached_ms": times["cached"],
                "speedup": times["concat"] / times["cached"],
            })
    return rows


def bench_csv(rows) -> str:
    lines = ["doc_len,concat_ms,cached_ms,speedup"]
    lines += [f"{r['doc_len']},{r['concat_ms']:.3f},{r['cached_ms']:.3f},{r['speedup']:.2f}" for r in rows]
    return "\n".join(lines) + "\n"

"""Per-chunk KV precompute, content-addressed persistence, and position recovery.

Chunks are processed standalone: each forward runs with local positions
0..len-1, but the stored keys are the pre-rotation projections, so a chunk
can later be re-rotated at whatever global offset it lands on. Values are
never rotated. One binary format serves every strategy; re-applying local
rotation at load time realizes the plain concatenation baseline.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChunkNotFoundError,
    ContractViolation,
    FingerprintError,
    InputError,
    IntegrityError,
)
from .model import DTYPE, LayerKV, Model, ModelConfig, prefill_forward, rope_rotate

MAGIC = b"A3KV"
VERSION = 1
_HEADER = struct.Struct("<4sI32s32sIIIIBBH")
_DIGEST_LEN = 32

DEFAULT_CHUNK_LEN = 512


def model_fingerprint(config: ModelConfig) -> bytes:
    return config.fingerprint()


def chunk_id(token_ids, fingerprint: bytes) -> bytes:
    """Content address: digest of the model fingerprint and the raw token ids."""
    ids = np.ascontiguousarray(np.asarray(token_ids, dtype="<u4"))
    h = hashlib.sha256()
    h.update(fingerprint)
    h.update(ids.tobytes())
    return h.digest()


@dataclass
class ChunkKV:
    chunk_id: bytes
    token_ids: np.ndarray  # (n,) uint32
    layers: list[LayerKV]
    model_fingerprint: bytes

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def rope_applied(self) -> bool:
        return self.layers[0].rope_applied


def precompute_chunk(token_ids, model: Model) -> ChunkKV:
    """Standalone forward of one chunk; keys stored pre-rotation.

    The forward itself attends with local positions 0..len-1 (that is what
    makes deeper layers approximate), but the persisted keys carry no
    rotation so they can be placed at any global offset later.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise InputError("cannot precompute an empty chunk")
    res = prefill_forward(model, ids, record_raw_keys=True)
    n = ids.shape[0]
    zeros = np.zeros(n, dtype=np.int64)
    layers = [
        LayerKV(keys=raw, values=cache.values.copy(), rope_applied=False, positions=zeros.copy())
        for raw, cache in zip(res.raw_keys, res.caches)
    ]
    fp = model.config.fingerprint()
    return ChunkKV(
        chunk_id=chunk_id(ids, fp),
        token_ids=ids.astype(np.uint32),
        layers=layers,
        model_fingerprint=fp,
    )


def split_into_chunks(token_ids, chunk_len: int = DEFAULT_CHUNK_LEN) -> list[np.ndarray]:
    ids = np.asarray(token_ids)
    if chunk_len < 1:
        raise InputError(f"chunk_len must be >= 1, got {chunk_len}")
    return [ids[i : i + chunk_len] for i in range(0, len(ids), chunk_len)]


# ---------------------------------------------------------------------------
# Persistence
#
# Little-endian layout:
#   magic "A3KV", version u32, model_fingerprint 32B, chunk_id 32B,
#   n_layers u32, n_heads u32, head_dim u32, chunk_len u32,
#   dtype u8 (0 = f32), flags u8 (bit0 = rope_applied), reserved u16,
#   token ids (chunk_len x u32), K then V as [layer][head][token][dim] f32,
#   then a 32-byte SHA-256 digest over all preceding bytes. Every payload
#   byte is covered, so any single-byte corruption is detected.
# File name = lowercase hex of chunk_id.


def _chunk_path(directory, cid: bytes) -> str:
    return os.path.join(os.fspath(directory), cid.hex())


def store_chunk(chunk: ChunkKV, directory) -> str:
    """Atomically persist a chunk; returns the file path."""
    n_layers = len(chunk.layers)
    n_heads, n, head_dim = chunk.layers[0].keys.shape
    flags = 1 if chunk.rope_applied else 0
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        chunk.model_fingerprint,
        chunk.chunk_id,
        n_layers,
        n_heads,
        head_dim,
        n,
        0,
        flags,
        0,
    )
    keys = np.stack([l.keys for l in chunk.layers])
    values = np.stack([l.values for l in chunk.layers])
    body = b"".join(
        (
            header,
            np.ascontiguousarray(chunk.token_ids, dtype="<u4").tobytes(),
            np.ascontiguousarray(keys, dtype="<f4").tobytes(),
            np.ascontiguousarray(values, dtype="<f4").tobytes(),
        )
    )
    digest = hashlib.sha256(body).digest()
    path = _chunk_path(directory, chunk.chunk_id)
    fd, tmp = tempfile.mkstemp(dir=os.fspath(directory), prefix=".tmp-chunk-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
            fh.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path) -> dict:
    """Header fields of a chunk file, without any integrity verification.

    Useful for diagnosing files that fail the full load. Only requires the
    file to be at least header-sized.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
    except FileNotFoundError:
        raise ChunkNotFoundError(f"no chunk file at {path}") from None
    if len(raw) < _HEADER.size:
        raise IntegrityError(f"chunk file {path} is shorter than its header")
    (magic, version, fp, stored_id, n_layers, n_heads, head_dim, n, dtype_code, flags, _r) = (
        _HEADER.unpack(raw)
    )
    return {
        "magic": magic.decode("ascii", errors="replace"),
        "version": version,
        "model_fingerprint": fp.hex(),
        "chunk_id": stored_id.hex(),
        "n_layers": n_layers,
        "n_heads": n_heads,
        "head_dim": head_dim,
        "chunk_len": n,
        "dtype": "float32" if dtype_code == 0 else f"unknown({dtype_code})",
        "rope_applied": bool(flags & 1),
    }


def verify_chunk_file(path, expect_id: bytes | None = None) -> ChunkKV:
    """Full load of one file path with every integrity check applied."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise ChunkNotFoundError(f"no chunk file at {path}") from None
    if len(raw) < _HEADER.size + _DIGEST_LEN:
        raise IntegrityError(f"chunk file {path} is truncated")
    body, digest = raw[:-_DIGEST_LEN], raw[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"chunk file {path} fails its content digest")
    (magic, version, fp, stored_id, n_layers, n_heads, head_dim, n, dtype_code, flags, _r) = (
        _HEADER.unpack_from(body, 0)
    )
    if magic != MAGIC:
        raise IntegrityError(f"chunk file {path} has bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"chunk file {path} has unsupported version {version}")
    if dtype_code != 0:
        raise IntegrityError(f"chunk file {path} has unknown dtype code {dtype_code}")
    if expect_id is not None and stored_id != expect_id:
        raise IntegrityError(
            f"chunk file {path} holds id {stored_id.hex()}, expected {expect_id.hex()}"
        )
    offset = _HEADER.size
    expect = offset + 4 * n + 2 * (n_layers * n_heads * n * head_dim * 4)
    if len(body) != expect:
        raise IntegrityError(f"chunk file {path} has wrong payload size")
    token_ids = np.frombuffer(body, dtype="<u4", count=n, offset=offset).copy()
    offset += 4 * n
    count = n_layers * n_heads * n * head_dim
    keys = (
        np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        .reshape(n_layers, n_heads, n, head_dim)
        .copy()
    )
    offset += count * 4
    values = (
        np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        .reshape(n_layers, n_heads, n, head_dim)
        .copy()
    )
    if chunk_id(token_ids, fp) != stored_id:
        raise IntegrityError(f"chunk file {path} id does not match its own content")
    rope_applied = bool(flags & 1)
    positions = np.arange(n, dtype=np.int64) if rope_applied else np.zeros(n, dtype=np.int64)
    layers = [
        LayerKV(
            keys=keys[l], values=values[l], rope_applied=rope_applied, positions=positions.copy()
        )
        for l in range(n_layers)
    ]
    return ChunkKV(chunk_id=stored_id, token_ids=token_ids, layers=layers, model_fingerprint=fp)


def load_chunk(cid: bytes | str, directory) -> ChunkKV:
    """Load and verify a chunk by id; integrity failures never return garbage."""
    if isinstance(cid, str):
        cid = bytes.fromhex(cid)
    path = _chunk_path(directory, cid)
    if not os.path.exists(path):
        raise ChunkNotFoundError(f"no chunk {cid.hex()} in {directory}")
    return verify_chunk_file(path, expect_id=cid)


# ---------------------------------------------------------------------------
# Segments and concatenation


@dataclass(frozen=True)
class Span:
    kind: str  # "system" | "document" | "question"
    start: int
    length: int
    index: int = 0  # order among document spans

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class SegmentMap:
    spans: list[Span]

    def __post_init__(self) -> None:
        if not self.spans:
            raise InputError("segment map needs at least one span")
        offset = 0
        for span in self.spans:
            if span.start != offset or span.length < 0:
                raise InputError("spans must be contiguous and non-overlapping from offset 0")
            offset = span.stop
        if self.spans[0].kind != "system":
            raise InputError("first span must be the system span")
        if self.spans[-1].kind != "question":
            raise InputError("last span must be the question span")
        kinds = [s.kind for s in self.spans]
        if kinds.count("system") != 1 or kinds.count("question") != 1:
            raise InputError("exactly one system span and one question span required")
        if any(k == "question" for k in kinds[:-1]) or any(
            k not in ("system", "document", "question") for k in kinds
        ):
            raise InputError("span roles must be system, document(i), question")

    @property
    def n(self) -> int:
        return self.spans[-1].stop

    @property
    def system_span(self) -> Span:
        return self.spans[0]

    @property
    def question_span(self) -> Span:
        return self.spans[-1]

    def document_spans(self) -> list[Span]:
        return [s for s in self.spans if s.kind == "document"]

    def offsets(self, kind: str) -> np.ndarray:
        parts = [np.arange(s.start, s.stop) for s in self.spans if s.kind == kind]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(parts).astype(np.int64)

    def document_offsets(self) -> np.ndarray:
        return self.offsets("document")

    def protected_offsets(self) -> np.ndarray:
        return np.sort(np.concatenate([self.offsets("system"), self.offsets("question")]))

    def with_question_length(self, q_len: int) -> "SegmentMap":
        head = self.spans[:-1]
        q = self.spans[-1]
        return SegmentMap(head + [Span("question", q.start, q_len)])


@dataclass
class FusedCache:
    keys: np.ndarray  # (L, H, n, hd) float32
    values: np.ndarray  # (L, H, n, hd) float32
    segments: SegmentMap
    rope_recovered: bool
    local_rotation: bool
    model_fingerprint: bytes
    token_ids: np.ndarray  # (n,) uint32, system + documents

    @property
    def n(self) -> int:
        return int(self.keys.shape[2])


def concat_chunks(chunks: list[ChunkKV], question_kv=None) -> FusedCache:
    """Concatenate system + document chunks along the token axis.

    The first chunk is the system span; the rest are documents in order.
    Question tokens are never cached, so question_kv must be None; the
    question span enters as a zero-length placeholder until fused prefill
    appends fresh rows.
    """
    if question_kv is not None:
        raise ContractViolation("question tokens are always computed fresh, never cached")
    if not chunks:
        raise InputError("need at least one chunk (the system span)")
    fp = chunks[0].model_fingerprint
    for c in chunks[1:]:
        if c.model_fingerprint != fp:
            raise FingerprintError("chunks come from different model configurations")
    rotated = {c.rope_applied for c in chunks}
    if len(rotated) > 1:
        raise ContractViolation("cannot mix rotated and unrotated chunks")
    local_rotation = rotated.pop()
    n_layers = len(chunks[0].layers)
    keys = np.concatenate(
        [np.stack([l.keys for l in c.layers]) for c in chunks], axis=2
    ).astype(DTYPE, copy=False)
    values = np.concatenate(
        [np.stack([l.values for l in c.layers]) for c in chunks], axis=2
    ).astype(DTYPE, copy=False)
    spans = [Span("system", 0, chunks[0].length)]
    offset = chunks[0].length
    for i, c in enumerate(chunks[1:]):
        spans.append(Span("document", offset, c.length, index=i))
        offset += c.length
    spans.append(Span("question", offset, 0))
    token_ids = np.concatenate([c.token_ids for c in chunks]).astype(np.uint32)
    assert keys.shape[0] == n_layers
    return FusedCache(
        keys=keys,
        values=values,
        segments=SegmentMap(spans),
        rope_recovered=False,
        local_rotation=local_rotation,
        model_fingerprint=fp,
        token_ids=token_ids,
    )


def recover_positions(fused: FusedCache, config: ModelConfig) -> FusedCache:
    """Rotate every key row at its global offset; values untouched.

    Only valid once, and only on caches built from unrotated chunks:
    rotations compose additively, so a second application would encode
    position 2m.
    """
    if fused.rope_recovered:
        raise ContractViolation("positions already recovered; rotation is not idempotent")
    if fused.local_rotation:
        raise ContractViolation("locally rotated chunks cannot be position-recovered")
    positions = np.arange(fused.n, dtype=np.int64)
    fused.keys = rope_rotate(fused.keys, positions, config).astype(DTYPE)
    fused.rope_recovered = True
    return fused


def rotate_chunk_local(chunk: ChunkKV, config: ModelConfig) -> ChunkKV:
    """Apply rotation at local positions 0..len-1 (plain-concatenation baseline)."""
    if chunk.rope_applied:
        raise ContractViolation("chunk already rotated")
    pos = np.arange(chunk.length, dtype=np.int64)
    layers = [
        LayerKV(
            keys=rope_rotate(l.keys, pos, config).astype(DTYPE),
            values=l.values,
            rope_applied=True,
            positions=pos.copy(),
        )
        for l in chunk.layers
    ]
    return ChunkKV(
        chunk_id=chunk.chunk_id,
        token_ids=chunk.token_ids,
        layers=layers,
        model_fingerprint=chunk.model_fingerprint,
    )

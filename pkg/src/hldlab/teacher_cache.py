"""Binary cache of teacher top-k logits and one mid-layer activation per token.

Layout (all little-endian)::

    header, 64 bytes: "<4sHIHIHBBIQ32s"
        magic b"TDC1", version u16, vocab_size u32, top_k u16, d_teacher u32,
        teacher_layer u16, logit_dtype u8, activation_dtype u8,
        context_length u32, num_sequences u64, teacher_config_digest 32 bytes
    records, num_sequences * context_length of them, each:
        indices    top_k x u32           (descending by logit)
        values     top_k x logit_dtype
        activation d_teacher x activation_dtype

Record ``(s, p)`` starts at ``64 + (s * context_length + p) * record_size``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hldlab.model import TransformerModel
from hldlab.objectives import TopKLogits

MAGIC = b"TDC1"
VERSION = 1
HEADER_STRUCT = struct.Struct("<4sHIHIHBBIQ32s")
HEADER_SIZE = HEADER_STRUCT.size
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
DTYPE_NAMES = {"f32": 0, "f16": 1}
INDEX_DTYPE = np.dtype("<u4")


class CacheFormatError(ValueError):
    """The file is not a valid teacher cache (bad magic, version or length)."""


@dataclass(frozen=True)
class CacheHeader:
    vocab_size: int
    top_k: int
    d_teacher: int
    teacher_layer: int
    context_length: int
    num_sequences: int
    logit_dtype: int = 0
    activation_dtype: int = 0
    teacher_config_digest: bytes = bytes(32)
    version: int = VERSION

    def __post_init__(self):
        if self.top_k > self.vocab_size:
            raise ValueError(f"top_k={self.top_k} exceeds vocab_size={self.vocab_size}")
        if self.logit_dtype not in DTYPE_CODES or self.activation_dtype not in DTYPE_CODES:
            raise ValueError("unknown dtype code")

    @property
    def record_dtype(self) -> np.dtype:
        fields = [
            ("indices", INDEX_DTYPE, (self.top_k,)),
            ("values", DTYPE_CODES[self.logit_dtype], (self.top_k,)),
        ]
        if self.d_teacher:
            fields.append(("activation", DTYPE_CODES[self.activation_dtype], (self.d_teacher,)))
        return np.dtype(fields)

    @property
    def record_size(self) -> int:
        return self.record_dtype.itemsize

    @property
    def num_records(self) -> int:
        return self.num_sequences * self.context_length

    @property
    def file_size(self) -> int:
        return HEADER_SIZE + self.num_records * self.record_size

    def pack(self) -> bytes:
        return HEADER_STRUCT.pack(
            MAGIC,
            self.version,
            self.vocab_size,
            self.top_k,
            self.d_teacher,
            self.teacher_layer,
            self.logit_dtype,
            self.activation_dtype,
            self.context_length,
            self.num_sequences,
            self.teacher_config_digest,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "CacheHeader":
        if len(raw) < HEADER_SIZE:
            raise CacheFormatError("file shorter than the cache header")
        magic, version, vocab, k, d_t, layer, ldt, adt, ctx, nseq, digest = HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise CacheFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise CacheFormatError(f"unsupported cache version {version}")
        try:
            return cls(vocab, k, d_t, layer, ctx, nseq, ldt, adt, digest, version)
        except ValueError as exc:
            raise CacheFormatError(str(exc)) from exc


def config_digest(model: TransformerModel) -> bytes:
    return hashlib.sha256(json.dumps(model.config.to_dict(), sort_keys=True).encode()).digest()


def storage_estimate(
    vocab_size: int,
    top_k: int,
    d_teacher: int,
    num_tokens: int = 1,
    logit_dtype: str = "f32",
    activation_dtype: str = "f32",
    include_header: bool = True,
) -> dict:
    """Exact cache size, plus the comparison against storing full logit rows.

    ``full_vocab_ratio`` is full-row logit bytes over top-k logit bytes
    (indices included), per token.
    """
    lsize = DTYPE_CODES[DTYPE_NAMES[logit_dtype]].itemsize
    asize = DTYPE_CODES[DTYPE_NAMES[activation_dtype]].itemsize
    logit_bytes = top_k * (INDEX_DTYPE.itemsize + lsize)
    activation_bytes = d_teacher * asize
    per_token = logit_bytes + activation_bytes
    full_logit_bytes = vocab_size * lsize
    return {
        "logit_bytes_per_token": logit_bytes,
        "activation_bytes_per_token": activation_bytes,
        "bytes_per_token": per_token,
        "full_vocab_logit_bytes_per_token": full_logit_bytes,
        "full_vocab_ratio": full_logit_bytes / logit_bytes,
        "total_bytes": (HEADER_SIZE if include_header else 0) + num_tokens * per_token,
    }


def cache_teacher(
    teacher: TransformerModel,
    corpus,
    layer: int,
    k: int,
    out,
    logit_dtype: str = "f32",
    activation_dtype: str = "f32",
    batch_size: int = 16,
    store_activations: bool = True,
) -> CacheHeader:
    """Run ``teacher`` over ``corpus`` (``(S, L)`` token ids) and write the cache to ``out``."""
    cfg = teacher.config
    if not 0 <= layer < cfg.num_layers:
        raise ValueError(f"layer {layer} out of range [0, {cfg.num_layers})")
    if not 1 <= k <= cfg.vocab_size:
        raise ValueError(f"k={k} must lie in [1, {cfg.vocab_size}]")
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        corpus = corpus.reshape(0, corpus.shape[-1] if corpus.ndim == 2 else cfg.context_length)
    num_seq, length = corpus.shape
    header = CacheHeader(
        vocab_size=cfg.vocab_size,
        top_k=k,
        d_teacher=cfg.d_emb if store_activations else 0,
        teacher_layer=layer,
        context_length=length,
        num_sequences=num_seq,
        logit_dtype=DTYPE_NAMES[logit_dtype],
        activation_dtype=DTYPE_NAMES[activation_dtype],
        teacher_config_digest=config_digest(teacher),
    )
    rec_dtype = header.record_dtype
    tmp = Path(str(out) + ".partial")
    with open(tmp, "wb") as f:
        f.write(header.pack())
        for start in range(0, num_seq, batch_size):
            chunk = corpus[start : start + batch_size]
            fwd = teacher.forward(chunk)
            top = TopKLogits.from_logits(fwd.logits.data, k)
            recs = np.zeros(chunk.shape, dtype=rec_dtype)
            recs["indices"] = top.indices
            recs["values"] = top.values
            if header.d_teacher:
                recs["activation"] = fwd.hidden_states[layer].data
            f.write(recs.tobytes())
    os.replace(tmp, out)
    return header


@dataclass
class TeacherSignals:
    topk: TopKLogits
    activations: np.ndarray | None


class CacheReader:
    """Random access to cache records by ``(sequence, position)``.

    The file is memory-mapped read-only, so one reader can be shared.
    """

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            self.header = CacheHeader.unpack(f.read(HEADER_SIZE))
        size = self.path.stat().st_size
        if size != self.header.file_size:
            raise CacheFormatError(
                f"{self.path}: file is {size} bytes, header implies {self.header.file_size} (truncated?)"
            )
        h = self.header
        if h.num_records:
            self._records = np.memmap(
                self.path, dtype=h.record_dtype, mode="r", offset=HEADER_SIZE, shape=(h.num_sequences, h.context_length)
            )
        else:
            self._records = np.zeros((0, h.context_length), dtype=h.record_dtype)

    @property
    def num_sequences(self) -> int:
        return self.header.num_sequences

    def record(self, sequence: int, position: int):
        h = self.header
        if not 0 <= sequence < h.num_sequences:
            raise IndexError(f"sequence {sequence} out of range [0, {h.num_sequences})")
        if not 0 <= position < h.context_length:
            raise IndexError(f"position {position} out of range [0, {h.context_length})")
        r = self._records[sequence, position]
        act = np.array(r["activation"]) if h.d_teacher else None
        return np.array(r["indices"]), np.array(r["values"]), act

    def lookup(self, seq_ids, length: int | None = None, dtype=np.float32) -> TeacherSignals:
        """Teacher signals for whole sequences, as ``(B, L, ...)`` arrays."""
        h = self.header
        seq_ids = np.asarray(seq_ids, dtype=np.int64)
        if seq_ids.size and (seq_ids.min() < 0 or seq_ids.max() >= h.num_sequences):
            raise IndexError(f"sequence id out of range [0, {h.num_sequences}): cache does not cover batch")
        length = h.context_length if length is None else length
        if length > h.context_length:
            raise IndexError(f"length {length} exceeds cached context length {h.context_length}")
        recs = self._records[seq_ids, :length]
        topk = TopKLogits(recs["indices"].astype(np.int64), recs["values"].astype(dtype))
        act = recs["activation"].astype(dtype) if h.d_teacher else None
        return TeacherSignals(topk, act)

    def close(self) -> None:
        mm = getattr(self._records, "_mmap", None)
        self._records = None
        if mm is not None:
            mm.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_cache(path) -> CacheReader:
    return CacheReader(path)


def write_records(path, header: CacheHeader, indices, values, activations=None) -> None:
    """Write pre-computed records (shaped ``(S, L, ...)``) under ``header``."""
    recs = np.zeros((header.num_sequences, header.context_length), dtype=header.record_dtype)
    recs["indices"] = indices
    recs["values"] = values
    if header.d_teacher:
        recs["activation"] = activations
    with open(path, "wb") as f:
        f.write(header.pack())
        f.write(recs.tobytes())

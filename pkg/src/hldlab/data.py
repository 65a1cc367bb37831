"""Tokenizers, packed token datasets, batching and Markov oracle corpora."""

from __future__ import annotations

import bisect
import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DATASET_FORMAT = "hldlab-tokens-1"


# ---------------------------------------------------------------------------
# tokenizers


class ByteTokenizer:
    """UTF-8 bytes as ids 0..255; id 256 is reserved for padding."""

    kind = "byte"
    vocab_size = 257
    pad_id = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Sequence[int]) -> str:
        return bytes(i for i in ids if i != self.pad_id).decode("utf-8", errors="replace")


class VocabTokenizer:
    """Whitespace-separated symbols looked up in a fixed vocabulary.

    The pad id is ``len(vocab)``, one past the last symbol.
    """

    kind = "vocab"

    def __init__(self, symbols: Sequence[str]):
        self.symbols = list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary contains duplicate symbols")
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id = len(self.symbols)
        self.vocab_size = len(self.symbols) + 1

    @classmethod
    def from_file(cls, path) -> "VocabTokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip()])

    def encode(self, text: str) -> list[int]:
        ids = []
        for sym in text.split():
            if sym not in self.index:
                raise KeyError(f"unknown symbol {sym!r}")
            ids.append(self.index[sym])
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.symbols[i] for i in ids if i != self.pad_id)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TokenDataset:
    """Fixed-length token sequences split into ``train`` and ``val``.

    ``pad_id`` of ``None`` means every position is a real token.
    """

    vocab_size: int
    context_length: int
    train: np.ndarray
    val: np.ndarray
    pad_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.context_length
        self.train = np.asarray(self.train, dtype=np.int64).reshape(-1, n)
        self.val = np.asarray(self.val, dtype=np.int64).reshape(-1, n)

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def mask(self, tokens: np.ndarray) -> np.ndarray | None:
        if self.pad_id is None:
            return None
        return np.asarray(tokens) != self.pad_id

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.vocab_size, self.context_length, self.pad_id]).encode())
        h.update(self.train.astype("<u4").tobytes())
        h.update(self.val.astype("<u4").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        """JSON header (length-prefixed) followed by little-endian u32 tokens, train then val."""
        header = {
            "format": DATASET_FORMAT,
            "vocab_size": self.vocab_size,
            "context_length": self.context_length,
            "pad_id": self.pad_id,
            "num_train": int(self.train.shape[0]),
            "num_val": int(self.val.shape[0]),
            "digest": self.digest,
            "meta": self.meta,
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            f.write(self.train.astype("<u4").tobytes())
            f.write(self.val.astype("<u4").tobytes())

    @classmethod
    def load(cls, path) -> "TokenDataset":
        raw = Path(path).read_bytes()
        (hlen,) = struct.unpack_from("<Q", raw, 0)
        header = json.loads(raw[8 : 8 + hlen])
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
        n = header["context_length"]
        total = (header["num_train"] + header["num_val"]) * n
        tokens = np.frombuffer(raw, dtype="<u4", count=total, offset=8 + hlen).astype(np.int64)
        split = header["num_train"] * n
        ds = cls(header["vocab_size"], n, tokens[:split], tokens[split:], header["pad_id"], header.get("meta", {}))
        if ds.digest != header["digest"]:
            raise ValueError(f"{path}: digest mismatch")
        return ds


def pack_document(ids: Sequence[int], n: int, pad_id: int) -> np.ndarray:
    """Chunk one document into length-``n`` rows, padding the last row."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = max(1, -(-len(ids) // n))
    out = np.full(rows * n, pad_id, dtype=np.int64)
    out[: len(ids)] = ids
    return out.reshape(rows, n)


def tokenize_corpus(texts: Sequence[str], tokenizer, n: int, val_fraction: float = 0.0, seed: int = 0) -> TokenDataset:
    """Tokenize documents, hold out ``round(val_fraction * len(texts))`` of them, and pack."""
    if n < 2:
        raise ValueError("context length must be at least 2")
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    num_val = int(round(val_fraction * len(texts)))
    order = np.random.default_rng(seed).permutation(len(texts))
    val_docs = set(order[:num_val].tolist())

    train_rows, val_rows = [], []
    for i, text in enumerate(texts):
        ids = tokenizer.encode(text)
        if not ids:
            continue
        (val_rows if i in val_docs else train_rows).append(pack_document(ids, n, tokenizer.pad_id))
    empty = np.zeros((0, n), dtype=np.int64)
    meta = {"tokenizer": tokenizer.kind, "val_docs": sorted(int(i) for i in val_docs), "num_docs": len(texts)}
    return TokenDataset(
        tokenizer.vocab_size,
        n,
        np.concatenate(train_rows) if train_rows else empty,
        np.concatenate(val_rows) if val_rows else empty,
        tokenizer.pad_id,
        meta,
    )


def iterate_batches(num_sequences: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Endless stream of sequence-id batches.

    Ids come from back-to-back seeded permutations, so each epoch visits every
    sequence exactly once; a batch may straddle two epochs.
    """
    if num_sequences < 1:
        raise ValueError("dataset has no sequences")
    rng = np.random.default_rng(seed)
    buffer = np.zeros(0, dtype=np.int64)
    while True:
        while buffer.size < batch_size:
            buffer = np.concatenate([buffer, rng.permutation(num_sequences)])
        yield buffer[:batch_size]
        buffer = buffer[batch_size:]


def check_epochs(num_sequences: int, batch_size: int, steps: int, limit: float = 3.0) -> float:
    """Passes over the data a run needs; warns past ``limit``."""
    passes = steps * batch_size / max(num_sequences, 1)
    if passes > limit:
        warnings.warn(f"plan needs {passes:.1f} passes over the training data (> {limit:g})", stacklevel=2)
    return passes


# ---------------------------------------------------------------------------
# Markov oracle corpora


class MarkovSource:
    """First-order Markov chain with an analytic entropy rate (nats per token)."""

    def __init__(self, transition):
        P = np.asarray(transition, dtype=np.float64)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must be nonnegative and sum to 1")
        self.transition = P
        self.order = 1
        self.stationary = _stationary(P)
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(P > 0, P * np.log(P), 0.0)
        self.row_entropy = -plogp.sum(axis=1)
        self.entropy_rate = float(self.stationary @ self.row_entropy)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @classmethod
    def cycle(cls, num_states: int) -> "MarkovSource":
        return cls(np.roll(np.eye(num_states), 1, axis=1))

    @classmethod
    def uniform(cls, num_states: int) -> "MarkovSource":
        return cls(np.full((num_states, num_states), 1.0 / num_states))

    @classmethod
    def with_entropy(cls, num_states: int, entropy: float, seed: int = 0, support: int | None = None) -> "MarkovSource":
        """Every row has entropy exactly ``entropy``, so the rate equals it too.

        Rows are geometric profiles over ``support`` randomly chosen successors,
        with the decay solved by bisection.
        """
        support = num_states if support is None else support
        if not 0 < entropy < np.log(support):
            raise ValueError(f"entropy must lie in (0, ln {support})")
        profile = _geometric_profile(support, entropy)
        rng = np.random.default_rng(seed)
        P = np.zeros((num_states, num_states))
        for s in range(num_states):
            P[s, rng.permutation(num_states)[:support]] = profile
        return cls(P)


def _geometric_profile(m: int, entropy: float) -> np.ndarray:
    def profile(r):
        w = r ** np.arange(m)
        return w / w.sum()

    def h(r):
        p = profile(r)
        return float(-(p * np.log(p)).sum())

    lo, hi = 1e-9, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h(mid) < entropy:
            lo = mid
        else:
            hi = mid
    return profile(0.5 * (lo + hi))


def _stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones(n)])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0, None)
    return pi / pi.sum()


def sample_markov(source: MarkovSource, num_tokens: int, seed: int, start: int | None = None) -> np.ndarray:
    """A chain of ``num_tokens`` states; the first is drawn from the stationary law."""
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(source.transition, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(num_tokens)
    out = np.empty(num_tokens, dtype=np.int64)
    if num_tokens == 0:
        return out
    state = int(np.searchsorted(np.cumsum(source.stationary), u[0], side="right")) if start is None else start
    state = min(state, source.num_states - 1)
    out[0] = state
    rows = cdf.tolist()
    for t in range(1, num_tokens):
        state = bisect.bisect_right(rows[state], u[t])
        out[t] = state
    return out


def markov_dataset(
    source: MarkovSource, num_train: int, num_val: int, n: int, seed: int = 0
) -> TokenDataset:
    """Train/val sequences cut from two independent chains."""
    train = sample_markov(source, num_train * n, seed=seed).reshape(num_train, n)
    val = sample_markov(source, num_val * n, seed=seed + 1_000_003).reshape(num_val, n)
    meta = {"source": "markov", "entropy_rate": source.entropy_rate, "num_states": source.num_states}
    return TokenDataset(source.num_states, n, train, val, None, meta)


def empirical_conditional_entropy(tokens: np.ndarray, num_states: int) -> float:
    """Plug-in estimate of H(next | current) from bigram counts, in nats."""
    tokens = np.asarray(tokens).reshape(-1)
    counts = np.zeros((num_states, num_states))
    np.add.at(counts, (tokens[:-1], tokens[1:]), 1)
    row = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(counts > 0, counts / row, 1.0)
    return float(-(counts * np.log(p)).sum() / counts.sum())

"""Held-out log-perplexity and multiple-choice error rates."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hldlab.data import TokenDataset


@dataclass
class EvalReport:
    dataset: str
    metric: str
    value: float
    num_tokens: int = 0
    num_examples: int = 0
    model_digest: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultipleChoiceItem:
    context: list[int]
    choices: list[list[int]]
    gold: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError("a multiple-choice item needs at least 2 choices")
        if not 0 <= self.gold < len(self.choices):
            raise ValueError(f"gold index {self.gold} out of range")
        if any(len(c) == 0 for c in self.choices):
            raise ValueError("empty choice sequence")


def model_digest(model) -> str:
    params = getattr(model, "params", None)
    if params is None:
        return ""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()[:16]


def _log_probs(model, tokens: np.ndarray) -> np.ndarray:
    """Float64 log-softmax of the model logits for ``tokens`` shaped ``(B, L)``."""
    logits = model.forward(tokens).logits.data.astype(np.float64)
    logits = logits - logits.max(axis=-1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=-1, keepdims=True))


def token_nll_sum(model, tokens, mask=None) -> tuple[float, int]:
    """Summed next-token NLL (nats) and the number of scored predictions."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    logp = _log_probs(model, tokens)
    picked = np.take_along_axis(logp[:, :-1], tokens[:, 1:, None], axis=-1)[..., 0]
    valid = np.ones(picked.shape, dtype=bool)
    if mask is not None:
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        valid = mask[:, 1:] & mask[:, :-1]
    return float(-(picked * valid).sum()), int(valid.sum())


def log_perplexity(
    model,
    dataset: TokenDataset | np.ndarray,
    split: str = "val",
    batch_size: int = 16,
    mask=None,
    name: str | None = None,
) -> EvalReport:
    """Mean next-token NLL in nats over every non-masked prediction."""
    if isinstance(dataset, TokenDataset):
        vocab = getattr(getattr(model, "config", None), "vocab_size", dataset.vocab_size)
        if dataset.vocab_size != vocab:
            raise ValueError(f"dataset vocab {dataset.vocab_size} does not match model vocab {vocab}")
        tokens = dataset.split(split)
        mask = dataset.mask(tokens)
        name = name or f"{dataset.digest[:12]}:{split}"
    else:
        tokens = np.atleast_2d(np.asarray(dataset, dtype=np.int64))
        name = name or "tokens"
    total, count = 0.0, 0
    for start in range(0, tokens.shape[0], batch_size):
        m = None if mask is None else np.atleast_2d(mask)[start : start + batch_size]
        s, c = token_nll_sum(model, tokens[start : start + batch_size], m)
        total += s
        count += c
    if count == 0:
        raise ValueError("no scored tokens")
    return EvalReport(name, "log_ppl", total / count, num_tokens=count, model_digest=model_digest(model))


def score_choices(model, item: MultipleChoiceItem) -> np.ndarray:
    """Total NLL of each choice continuation given the item context."""
    ctx_len = getattr(getattr(model, "config", None), "context_length", None)
    seqs, starts = [], []
    for choice in item.choices:
        seq = list(item.context) + list(choice)
        if ctx_len is not None and len(seq) > ctx_len:
            seq = seq[-ctx_len:]
        seqs.append(seq)
        starts.append(len(seq) - len(choice))
    width = max(len(s) for s in seqs)
    batch = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        batch[i, : len(s)] = s
    logp = _log_probs(model, batch)
    scores = np.zeros(len(seqs))
    for i, (s, start) in enumerate(zip(seqs, starts)):
        # a choice token at position j is predicted by position j - 1
        pos = np.arange(max(start, 1), len(s))
        scores[i] = -logp[i, pos - 1, np.asarray(s)[pos]].sum()
    return scores


def mc_error_rate(
    model,
    items: Sequence[MultipleChoiceItem],
    normalization: str = "per_token_nll",
    name: str = "mc",
) -> EvalReport:
    """Fraction of items whose lowest-NLL choice is not the gold one (ties to the lowest index)."""
    if not items:
        raise ValueError("no multiple-choice items")
    if normalization not in ("total_nll", "per_token_nll"):
        raise ValueError(f"unknown normalization {normalization!r}")
    mistakes = 0
    for item in items:
        scores = score_choices(model, item)
        if normalization == "per_token_nll":
            scores = scores / np.array([len(c) for c in item.choices])
        mistakes += int(np.argmin(scores)) != item.gold
    return EvalReport(name, "error_rate", mistakes / len(items), num_examples=len(items), model_digest=model_digest(model))


def load_mc_items(path, tokenizer=None) -> list[MultipleChoiceItem]:
    """Line-delimited JSON: ``{"context": ..., "choices": [...], "gold": i}``.

    Contexts and choices are id lists, or strings when a tokenizer is given.
    """
    items = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)

        def ids(x):
            if isinstance(x, str):
                if tokenizer is None:
                    raise ValueError("string fields need a tokenizer")
                return tokenizer.encode(x)
            return [int(t) for t in x]

        items.append(MultipleChoiceItem(ids(rec["context"]), [ids(c) for c in rec["choices"]], int(rec["gold"])))
    return items

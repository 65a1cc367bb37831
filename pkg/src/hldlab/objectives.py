"""Training objectives: NLL, top-k KL distillation, hint and embedding losses.

Every loss takes an optional validity ``mask`` shaped like the token array;
masked (padding) positions contribute nothing.  Means are taken over valid
positions only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hldlab import autodiff as ad
from hldlab.autodiff import Tensor
from hldlab.model import Regressor, TransformerModel, regressor_forward

METHODS = ("nll", "kd", "hldc", "hldf")


@dataclass
class DistillConfig:
    """Loss hyperparameters.  ``beta=None`` means ``1 - alpha``."""

    alpha: float = 0.7
    beta: float | None = None
    gamma: float = 0.0
    temperature: float = 1.0
    top_k: int = 128
    teacher_layer: int = 0
    student_layer: int = 0
    phase1_fraction: float = 0.0
    renormalize_student: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta is not None and self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be positive, got {self.top_k}")
        if not 0.0 <= self.phase1_fraction < 1.0:
            raise ValueError(f"phase1_fraction must lie in [0, 1), got {self.phase1_fraction}")

    @property
    def nll_weight(self) -> float:
        return 1.0 - self.alpha if self.beta is None else self.beta

    def validate_against(self, student: TransformerModel, teacher_vocab: int, teacher_layers: int | None = None):
        if self.top_k > teacher_vocab:
            raise ValueError(f"top_k={self.top_k} exceeds teacher vocab {teacher_vocab}")
        if not 0 <= self.student_layer <= student.config.num_layers:
            raise ValueError(f"student_layer {self.student_layer} out of range")
        if teacher_layers is not None and not 0 <= self.teacher_layer <= teacher_layers:
            raise ValueError(f"teacher_layer {self.teacher_layer} out of range")


@dataclass
class TopKLogits:
    """Teacher top-k logits per position: ``indices``/``values`` shaped ``(..., L, k)``."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values)
        if self.indices.shape != self.values.shape:
            raise ValueError(f"indices {self.indices.shape} and values {self.values.shape} differ in shape")

    @property
    def k(self) -> int:
        return self.indices.shape[-1]

    @classmethod
    def from_logits(cls, logits, k: int) -> "TopKLogits":
        """Largest ``k`` entries along the last axis, descending; ties go to the lower index."""
        logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
        order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
        return cls(order, np.take_along_axis(logits, order, axis=-1))


@dataclass
class Batch:
    tokens: np.ndarray
    mask: np.ndarray | None = None
    seq_ids: np.ndarray | None = None
    teacher_topk: TopKLogits | None = None
    teacher_hidden: np.ndarray | None = field(default=None, repr=False)


def _masked_mean(per_position: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return ad.mean(per_position)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no valid positions in batch")
    weights = mask.astype(per_position.dtype)
    return ad.scale(ad.sum(per_position * weights), 1.0 / count)


def nll_loss(logits: Tensor, tokens, mask=None) -> Tensor:
    """Mean next-token negative log-likelihood over valid targets."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    if n < 2:
        raise ValueError("nll_loss needs sequences of length >= 2")
    if logits.shape[:-1] != tokens.shape:
        raise ValueError(f"logits {logits.shape} do not match tokens {tokens.shape}")
    logp = ad.log_softmax(logits)
    targets = np.concatenate([tokens[..., 1:], np.zeros_like(tokens[..., :1])], axis=-1)
    picked = ad.gather_last(logp, targets[..., None])
    picked = ad.reshape(picked, picked.shape[:-1])
    valid = np.ones(tokens.shape, dtype=bool)
    valid[..., -1] = False
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(tokens.shape)
        valid[..., :-1] &= mask[..., 1:] & mask[..., :-1]
    return ad.scale(_masked_mean(picked, valid), -1.0)


def kl_topk(
    teacher: TopKLogits,
    student_logits: Tensor,
    temperature: float = 1.0,
    mask=None,
    renormalize_student: bool = False,
) -> Tensor:
    """``tau^2`` times the mean per-position KL(teacher || student) on the teacher's top-k support.

    Teacher probabilities are a temperature softmax of the retained values.
    Student log-probabilities come from the full-vocabulary softmax, gathered at
    the teacher indices, and are renormalized over the support only when
    ``renormalize_student`` is set.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    idx = teacher.indices
    if idx.shape[:-1] != student_logits.shape[:-1]:
        raise ValueError(f"teacher positions {idx.shape[:-1]} do not match student {student_logits.shape[:-1]}")
    vocab = student_logits.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ValueError(f"teacher index out of student vocab range [0, {vocab})")
    srt = np.sort(idx, axis=-1)
    if np.any(srt[..., 1:] == srt[..., :-1]):
        raise ValueError("duplicate teacher indices in top-k record")

    dtype = student_logits.dtype
    tv = teacher.values.astype(np.float64) / temperature
    tv = tv - tv.max(axis=-1, keepdims=True)
    log_p = tv - np.log(np.exp(tv).sum(axis=-1, keepdims=True))
    p = np.exp(log_p)

    log_q = ad.gather_last(ad.log_softmax(student_logits, temperature), idx)
    if renormalize_student:
        log_q = ad.log_softmax(log_q)
    cross = ad.sum(log_q * p.astype(dtype), axis=-1)
    per_position = ad.scale(cross, -1.0) + (p * log_p).sum(axis=-1).astype(dtype)
    return ad.scale(_masked_mean(per_position, mask), temperature**2)


def normalized_mse(a: Tensor, b: Tensor, mask=None) -> Tensor:
    """MSE between row-normalized ``a`` and ``b``, averaged over valid rows x features."""
    a = ad.as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = ad.as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ValueError(f"normalized_mse shape mismatch: {a.shape} vs {b.shape}")
    d = a.shape[-1]
    a2 = ad.reshape(a, (-1, d))
    b2 = ad.reshape(b, (-1, d))
    if mask is not None:
        rows = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
        if rows.size == 0:
            raise ValueError("no valid positions in batch")
        a2 = ad.embedding(a2, rows)
        b2 = ad.embedding(b2, rows)
    diff = ad.normalize_rows(a2) - ad.normalize_rows(b2)
    return ad.mean(diff * diff)


def hint_loss(teacher_hidden, student_hidden: Tensor, reg: Regressor, mask=None) -> Tensor:
    teacher_hidden = ad.as_tensor(np.asarray(getattr(teacher_hidden, "data", teacher_hidden), dtype=student_hidden.dtype))
    return normalized_mse(teacher_hidden, regressor_forward(reg, student_hidden), mask)


# ---------------------------------------------------------------------------
# batch-level objectives


def _require_topk(batch: Batch) -> TopKLogits:
    if batch.teacher_topk is None:
        raise ValueError("batch carries no teacher top-k logits (missing cache records)")
    return batch.teacher_topk


def _require_hidden(batch: Batch) -> np.ndarray:
    if batch.teacher_hidden is None:
        raise ValueError("batch carries no teacher activations (missing activation records)")
    return batch.teacher_hidden


def objective_terms(
    method: str,
    batch: Batch,
    student: TransformerModel,
    cfg: DistillConfig,
    reg: Regressor | None = None,
    phase: str | None = None,
) -> dict[str, Tensor]:
    """All loss components for one batch, plus ``"loss"`` (the optimized total).

    ``phase="hint"`` selects HLDF phase 1; HLDF otherwise means its KD phase.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "hldf" and phase == "hint":
        if reg is None:
            raise ValueError("hint phase needs a regressor")
        out = student.forward(batch.tokens, upto_layer=cfg.student_layer)
        hint = hint_loss(_require_hidden(batch), out.hidden_states[cfg.student_layer], reg, batch.mask)
        return {"hint": hint, "loss": hint}

    out = student.forward(batch.tokens)
    nll = nll_loss(out.logits, batch.tokens, batch.mask)
    if method == "nll":
        return {"nll": nll, "loss": nll}

    kl = kl_topk(_require_topk(batch), out.logits, cfg.temperature, batch.mask, cfg.renormalize_student)
    if method in ("kd", "hldf"):
        total = ad.scale(nll, 1.0 - cfg.alpha) + ad.scale(kl, cfg.alpha)
        return {"nll": nll, "kl": kl, "loss": total}

    if reg is None:
        raise ValueError("hldc needs a regressor")
    emb = hint_loss(_require_hidden(batch), out.hidden_states[cfg.student_layer], reg, batch.mask)
    total = ad.scale(nll, cfg.nll_weight) + ad.scale(kl, cfg.alpha) + ad.scale(emb, cfg.gamma)
    return {"nll": nll, "kl": kl, "emb": emb, "loss": total}


def _with_cache(batch: Batch, cache, need_hidden: bool) -> Batch:
    if cache is None or (batch.teacher_topk is not None and (batch.teacher_hidden is not None or not need_hidden)):
        return batch
    if batch.seq_ids is None:
        raise ValueError("batch has no sequence ids to look up teacher records")
    signals = cache.lookup(batch.seq_ids, batch.tokens.shape[-1])
    if need_hidden and signals.activations is None:
        raise ValueError("teacher cache holds no activations (missing activation records)")
    return Batch(batch.tokens, batch.mask, batch.seq_ids, signals.topk, signals.activations)


def kd_loss(batch: Batch, student: TransformerModel, teacher_cache, cfg: DistillConfig) -> Tensor:
    """``(1 - alpha) * NLL + alpha * top-k KL``."""
    batch = _with_cache(batch, teacher_cache, need_hidden=False)
    return objective_terms("kd", batch, student, cfg)["loss"]


def hldc_loss(batch: Batch, student: TransformerModel, teacher_cache, reg: Regressor, cfg: DistillConfig) -> Tensor:
    """``beta * NLL + alpha * top-k KL + gamma * embedding loss``."""
    batch = _with_cache(batch, teacher_cache, need_hidden=True)
    return objective_terms("hldc", batch, student, cfg, reg)["loss"]

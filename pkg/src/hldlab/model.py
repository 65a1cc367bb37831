"""Causal decoder-only transformer and the student-to-teacher regressors."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

from hldlab import autodiff as ad
from hldlab.autodiff import Tensor

# Parameters that are not part of the "backbone" count.
EMBEDDING_PARAMS = ("tok_emb", "pos_emb", "lm_head")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    d_emb: int
    num_heads: int
    d_ff: int
    vocab_size: int
    context_length: int
    rms_eps: float = 1e-6
    tie_embeddings: bool = True

    def __post_init__(self):
        for name in ("num_layers", "d_emb", "num_heads", "d_ff", "vocab_size", "context_length"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_emb % self.num_heads:
            raise ValueError(f"d_emb={self.d_emb} not divisible by num_heads={self.num_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.context_length < 2:
            raise ValueError("context_length must be at least 2")
        if not self.rms_eps > 0:
            raise ValueError("rms_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_emb // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def median_layer_index(config: ModelConfig) -> int:
    """Index ``k`` of the median residual state ``H^k`` (``floor(D / 2)``)."""
    if config.num_layers < 2:
        raise ValueError("median layer needs at least 2 layers")
    return config.num_layers // 2


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    draws = truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)
    return (draws * std).astype(dtype)


@dataclass
class ForwardOutput:
    logits: Tensor | None
    hidden_states: list[Tensor]


class TransformerModel:
    """Pre-norm decoder with learned absolute positions and no linear biases.

    ``forward`` returns ``D + 1`` residual states: ``hidden_states[0]`` is the
    embedding output and ``hidden_states[k]`` the stream after layer ``k``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- parameter bookkeeping -------------------------------------------------

    def layer_param_names(self, i: int) -> list[str]:
        p = f"layers.{i}."
        return [p + n for n in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_in", "w_out")]

    def prefix_param_names(self, upto_layer: int) -> list[str]:
        """Parameters that influence ``H^upto_layer``."""
        names = ["tok_emb", "pos_emb"]
        for i in range(upto_layer):
            names += self.layer_param_names(i)
        return names

    def deembedding_param_names(self) -> list[str]:
        names = ["final_norm"]
        if not self.config.tie_embeddings:
            names.append("lm_head")
        return names

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def backbone_param_count(self) -> int:
        return int(np.sum([p.size for n, p in self.params.items() if n not in EMBEDDING_PARAMS]))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_copy(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    # -- forward -----------------------------------------------------------------

    def forward(
        self,
        tokens,
        upto_layer: int | None = None,
        hook: Callable[[int, Tensor, Tensor], None] | None = None,
    ) -> ForwardOutput:
        """Run the decoder on ``tokens`` shaped ``(L,)`` or ``(B, L)``.

        With ``upto_layer`` set, stops after that residual state and returns no
        logits.  ``hook(k, h_in, f_out)`` sees every layer's input and residual
        update.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None, :]
        batch, length = tokens.shape
        if length > cfg.context_length:
            raise ValueError(f"sequence length {length} exceeds context length {cfg.context_length}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        depth = cfg.num_layers if upto_layer is None else upto_layer
        if not 0 <= depth <= cfg.num_layers:
            raise ValueError(f"upto_layer {upto_layer} outside [0, {cfg.num_layers}]")

        P = self.params
        h = ad.embedding(P["tok_emb"], tokens) + ad.embedding(P["pos_emb"], np.arange(length))
        hidden = [h]
        for i in range(depth):
            update = self._layer(i, h)
            if hook is not None:
                hook(i + 1, h, update)
            h = h + update
            hidden.append(h)

        logits = None
        if upto_layer is None:
            out = ad.rms_norm(h, P["final_norm"], cfg.rms_eps)
            w = ad.transpose(P["tok_emb"]) if cfg.tie_embeddings else P["lm_head"]
            logits = out @ w
        if single:
            hidden = [ad.reshape(x, x.shape[1:]) for x in hidden]
            if logits is not None:
                logits = ad.reshape(logits, logits.shape[1:])
        return ForwardOutput(logits=logits, hidden_states=hidden)

    __call__ = forward

    def _layer(self, i: int, h: Tensor) -> Tensor:
        cfg = self.config
        P = self.params
        p = f"layers.{i}."
        batch, length, d = h.shape
        nh, hd = cfg.num_heads, cfg.head_dim

        x = ad.rms_norm(h, P[p + "attn_norm"], cfg.rms_eps)

        def heads(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (batch, length, nh, hd)), (0, 2, 1, 3))

        q = heads(x @ P[p + "wq"])
        k = heads(x @ P[p + "wk"])
        v = heads(x @ P[p + "wv"])
        scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(hd))
        att = ad.causal_softmax(scores) @ v
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (batch, length, d))
        h_attn = att @ P[p + "wo"]

        x2 = ad.rms_norm(h + h_attn, P[p + "mlp_norm"], cfg.rms_eps)
        h_mlp = ad.gelu(x2 @ P[p + "w_in"]) @ P[p + "w_out"]
        return h_attn + h_mlp


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> TransformerModel:
    """Truncated-normal (±2σ) weights with std ``1/sqrt(d_emb)``; unit norm gains."""
    rng = np.random.default_rng(seed)
    d, std = config.d_emb, 1.0 / math.sqrt(config.d_emb)

    def w(*shape):
        return Tensor(_trunc_normal(rng, shape, std, dtype), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": w(config.vocab_size, d),
        "pos_emb": w(config.context_length, d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        params[p + "attn_norm"] = ones(d)
        params[p + "wq"] = w(d, d)
        params[p + "wk"] = w(d, d)
        params[p + "wv"] = w(d, d)
        params[p + "wo"] = w(d, d)
        params[p + "mlp_norm"] = ones(d)
        params[p + "w_in"] = w(d, config.d_ff)
        params[p + "w_out"] = w(config.d_ff, d)
    params["final_norm"] = ones(d)
    if not config.tie_embeddings:
        params["lm_head"] = w(d, config.vocab_size)
    for name, t in params.items():
        t.name = name
    return TransformerModel(config, params)


def mean_squared_magnitude(h) -> float:
    """Mean over token positions of the squared Euclidean norm ``||h||^2``."""
    data = h.data if isinstance(h, Tensor) else np.asarray(h)
    data = data.astype(np.float64).reshape(-1, data.shape[-1])
    return float((data**2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# regressors


@dataclass
class Regressor:
    """Maps student activations (width ``input_dim``) into teacher space."""

    kind: str
    input_dim: int
    output_dim: int
    hidden_dim: int | None
    params: dict[str, Tensor] = field(repr=False)

    @property
    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, h: Tensor) -> Tensor:
        return regressor_forward(self, h)


def init_regressor(
    kind: str,
    input_dim: int,
    output_dim: int,
    expansion: int = 4,
    seed: int = 0,
    dtype=np.float32,
) -> Regressor:
    """``kind`` is ``"linear"`` (one dense layer) or ``"mlp"`` (dense-GELU-dense)."""
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out, prefix):
        return {
            prefix + "weight": Tensor(
                _trunc_normal(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in), dtype), requires_grad=True
            ),
            prefix + "bias": Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True),
        }

    if kind == "linear":
        return Regressor("linear", input_dim, output_dim, None, dense(input_dim, output_dim, ""))
    if kind == "mlp":
        hidden = expansion * input_dim
        params = dense(input_dim, hidden, "fc1.") | dense(hidden, output_dim, "fc2.")
        return Regressor("mlp", input_dim, output_dim, hidden, params)
    raise ValueError(f"unknown regressor kind {kind!r}")


def regressor_param_count(kind: str, input_dim: int, output_dim: int, expansion: int = 4) -> int:
    if kind == "linear":
        return input_dim * output_dim + output_dim
    if kind == "mlp":
        hidden = expansion * input_dim
        return input_dim * hidden + hidden + hidden * output_dim + output_dim
    raise ValueError(f"unknown regressor kind {kind!r}")


def regressor_forward(reg: Regressor, h: Tensor) -> Tensor:
    if h.shape[-1] != reg.input_dim:
        raise ValueError(f"regressor expects last dim {reg.input_dim}, got shape {h.shape}")
    P = reg.params
    if reg.kind == "linear":
        return h @ P["weight"] + P["bias"]
    mid = ad.gelu(h @ P["fc1.weight"] + P["fc1.bias"])
    return mid @ P["fc2.weight"] + P["fc2.bias"]


# ---------------------------------------------------------------------------
# checkpoint container
#
# u64 little-endian header length | UTF-8 JSON header | raw tensor bytes.
# The header holds {"format", "config", "tensors": [{name, shape, dtype, offset, nbytes}]}
# with offsets relative to the start of the payload.

CHECKPOINT_FORMAT = "hldlab-checkpoint-1"


def save_checkpoint(model: TransformerModel, path, extra: dict | None = None) -> None:
    manifest, offset = [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<"))
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": arr.nbytes}
        )
        offset += arr.nbytes
    header = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "tensors": manifest}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for t in model.params.values():
            f.write(np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> TransformerModel:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw, 0)
    header = json.loads(raw[8 : 8 + hlen])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    base = 8 + hlen
    params = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])), offset=start)
        arr = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
        params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
    return TransformerModel(ModelConfig.from_dict(header["config"]), params)

"""AdamW, learning-rate schedules and the compute-matched training runners."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from hldlab import autodiff as ad
from hldlab.data import TokenDataset, check_epochs, iterate_batches
from hldlab.evaluation import log_perplexity
from hldlab.flops import CostModel, FlopsPlan, ot_budget, plan as make_flops_plan
from hldlab.model import (
    ModelConfig,
    Regressor,
    TransformerModel,
    init_model,
    init_regressor,
    median_layer_index,
    regressor_param_count,
    save_checkpoint,
)
from hldlab.objectives import METHODS, Batch, DistillConfig, objective_terms

METRIC_COLUMNS = ("step", "phase", "lr", "loss", "nll", "kl", "hint", "emb", "cum_flops", "eval_logppl")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.1
    peak_lr: float = 1e-3
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list, repr=False)
    v: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def for_params(cls, params, **hyper) -> "OptimizerState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(params, grads, state: OptimizerState, lr: float) -> None:
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = getattr(params[i], "name", None) or f"#{i}"
            raise TrainingError(f"non-finite gradient in parameter {name} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        dtype = p.data.dtype.type
        p.data *= dtype(1.0 - lr * state.weight_decay)
        m *= dtype(b1)
        m += dtype(1.0 - b1) * g
        v *= dtype(b2)
        v += dtype(1.0 - b2) * g * g
        p.data -= dtype(lr) * (m / dtype(c1)) / (np.sqrt(v / dtype(c2)) + dtype(state.eps))


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedule:
    kind: str
    peak_lr: float
    warmup_steps: int
    total_steps: int
    decay_fraction: float = 0.1
    floor_ratio: float = 0.01

    def __post_init__(self):
        if self.kind not in ("wsd", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 1 or not 0 <= self.warmup_steps < max(self.total_steps, 1):
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if not 0.0 <= self.decay_fraction < 1.0:
            raise ValueError("decay_fraction must lie in [0, 1)")
        if not 0.0 < self.floor_ratio <= 1.0:
            raise ValueError("floor_ratio must lie in (0, 1]")


def default_warmup(total_steps: int) -> int:
    """``max(20, 2% of total)``, kept strictly below ``total_steps``."""
    return max(0, min(max(20, int(0.02 * total_steps)), total_steps - 1))


def lr_at(schedule: Schedule, step: int) -> float:
    """Learning rate for 1-based update ``step`` (``step=0`` is the warmup origin)."""
    s = schedule
    if step < 0 or step > s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps}]")
    if s.warmup_steps and step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if s.kind == "constant":
        return s.peak_lr
    decay_start = (1.0 - s.decay_fraction) * s.total_steps
    if step <= decay_start or s.decay_fraction == 0:
        return s.peak_lr
    frac = (step - decay_start) / (s.total_steps - decay_start)
    return s.peak_lr * (1.0 - frac * (1.0 - s.floor_ratio))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    """Every training knob, stored as a flat ``key = value`` text file."""

    # student architecture (vocab/context default to the dataset's)
    student_num_layers: int = 2
    student_d_emb: int = 64
    student_num_heads: int = 4
    student_d_ff: int = 256
    tie_embeddings: bool = True
    rms_eps: float = 1e-6
    vocab_size: int | None = None
    context_length: int | None = None
    # teacher side
    teacher_d_emb: int = 128
    teacher_layer: int | None = None
    student_layer: int | None = None
    # hyperparameters
    eta: float = 3e-3
    eta_ht: float | None = None
    tau: float = 1.0
    alpha: float = 0.7
    beta: float | None = None
    gamma: float = 0.05
    p1: float = 0.05
    top_k: int = 16
    renormalize_student: bool = False
    hldf_regressor: str = "mlp"
    hldc_regressor: str = "linear"
    regressor_expansion: int = 4
    # optimization
    batch_size: int = 16
    warmup_steps: int | None = None
    decay_fraction: float = 0.1
    floor_ratio: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    weight_decay: float = 0.1
    # budget and bookkeeping
    ot: float = 1.0
    eval_every: int = 0
    eval_batch_size: int = 64
    max_epochs: float | None = None
    train_data: str | None = None
    cache: str | None = None

    def distill_config(self, student: ModelConfig) -> DistillConfig:
        if self.student_layer is not None:
            layer = self.student_layer
        elif student.num_layers >= 2:
            layer = median_layer_index(student)
        else:
            layer = 0  # no median exists; only the logit-level methods can run
        return DistillConfig(
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            temperature=self.tau,
            top_k=self.top_k,
            teacher_layer=self.teacher_layer or 0,
            student_layer=layer,
            phase1_fraction=self.p1,
            renormalize_student=self.renormalize_student,
        )

    def student_config(self, dataset: TokenDataset | None = None) -> ModelConfig:
        vocab = self.vocab_size or (dataset.vocab_size if dataset is not None else None)
        ctx = self.context_length or (dataset.context_length if dataset is not None else None)
        if vocab is None or ctx is None:
            raise ValueError("vocab_size/context_length must come from the config or a dataset")
        return ModelConfig(
            num_layers=self.student_num_layers,
            d_emb=self.student_d_emb,
            num_heads=self.student_num_heads,
            d_ff=self.student_d_ff,
            vocab_size=vocab,
            context_length=ctx,
            rms_eps=self.rms_eps,
            tie_embeddings=self.tie_embeddings,
        )

    def regressor_kind(self, method: str) -> str | None:
        return {"hldf": self.hldf_regressor, "hldc": self.hldc_regressor}.get(method)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(value)
    return TrainConfig(**values)


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w") as f:
        for key, value in asdict(config).items():
            f.write(f"{key} = {json.dumps(value)}\n")


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunState:
    method: str
    model: TransformerModel
    plan: FlopsPlan
    seed: int
    regressor: Regressor | None = None
    optimizer: OptimizerState | None = None
    schedule: Schedule | None = None
    step: int = 0
    cum_flops: float = 0.0
    metrics: list[dict] = field(default_factory=list)
    phase_start_params: dict | None = field(default=None, repr=False)


def cost_model_for(method: str, config: TrainConfig, dataset: TokenDataset | None = None) -> CostModel:
    student_cfg = config.student_config(dataset)
    n_backbone = init_model(student_cfg, seed=0).backbone_param_count()
    kind = config.regressor_kind(method)
    n_reg = 0
    if kind is not None:
        n_reg = regressor_param_count(kind, student_cfg.d_emb, config.teacher_d_emb, config.regressor_expansion)
    return CostModel(n_backbone, student_cfg.d_emb, config.teacher_d_emb, student_cfg.vocab_size, n_reg)


def plan_for(method: str, config: TrainConfig, dataset: TokenDataset | None = None, ot: float | None = None) -> FlopsPlan:
    """Compute-matched plan: every method gets ``ot`` NLL overtraining units of FLOPs."""
    student_cfg = config.student_config(dataset)
    budget = ot_budget(config.ot if ot is None else ot, cost_model_for("nll", config, dataset))
    tokens_per_step = config.batch_size * student_cfg.context_length
    return make_flops_plan(method, cost_model_for(method, config, dataset), budget, tokens_per_step, config.p1)


def held_out_eval(model: TransformerModel, dataset: TokenDataset, batch_size: int = 64) -> float:
    """Validation log-perplexity; reads parameters only and spends no training budget."""
    return log_perplexity(model, dataset, split="val", batch_size=batch_size).value


def held_out_eval_hook(state: RunState, dataset: TokenDataset, every: int, batch_size: int = 64) -> float | None:
    """Record ``eval_logppl`` on the latest metrics row every ``every`` steps and at the end."""
    if not every or not state.metrics or dataset.val.size == 0:
        return None
    if state.step % every and state.step != state.plan.total_steps:
        return None
    value = held_out_eval(state.model, dataset, batch_size)
    state.metrics[-1]["eval_logppl"] = value
    return value


def run(
    method: str,
    config: TrainConfig,
    plan: FlopsPlan,
    dataset: TokenDataset,
    cache=None,
    seed: int = 0,
    out_dir=None,
    student: TransformerModel | None = None,
    eval_every: int | None = None,
    track_phase_params: bool = False,
) -> RunState:
    """Train a student for exactly the plan's steps.

    HLDF runs a hint phase on the student prefix plus a regressor (constant LR
    after warmup), then a KD phase with fresh AdamW moments and a fresh WSD
    schedule.  Model init, regressor init and data order use separate seeded
    streams, so HLDF with ``p1 = 0`` reproduces KD exactly.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if plan.method != method:
        raise ValueError(f"plan is for {plan.method!r}, not {method!r}")
    if method != "nll" and cache is None:
        raise ValueError(f"{method} needs a teacher cache")
    student_cfg = config.student_config(dataset)
    if plan.tokens_per_step != config.batch_size * student_cfg.context_length:
        raise ValueError("plan tokens_per_step does not match batch_size x context_length")
    train = dataset.train
    if cache is not None:
        if cache.num_sequences < train.shape[0]:
            raise ValueError(
                f"teacher cache covers {cache.num_sequences} sequences, training split has {train.shape[0]}"
            )
        if config.teacher_layer is None:
            config = config.replace(teacher_layer=cache.header.teacher_layer)

    model = student if student is not None else init_model(student_cfg, seed=seed)
    dcfg = config.distill_config(student_cfg)
    if cache is not None:
        dcfg.validate_against(model, cache.header.vocab_size)
        if method in ("hldc", "hldf") and cache.header.d_teacher != config.teacher_d_emb:
            raise ValueError(f"cache activations are {cache.header.d_teacher}-wide, config says {config.teacher_d_emb}")

    regressor = None
    kind = config.regressor_kind(method)
    if kind is not None:
        if config.student_layer is None:
            median_layer_index(student_cfg)
        regressor = init_regressor(
            kind, student_cfg.d_emb, config.teacher_d_emb, config.regressor_expansion, seed=seed + 7_919
        )

    passes = check_epochs(train.shape[0], config.batch_size, plan.total_steps)
    if config.max_epochs is not None and passes > config.max_epochs:
        raise TrainingError(f"corpus exhausted: plan needs {passes:.1f} epochs, max_epochs={config.max_epochs}")

    state = RunState(method, model, plan, seed, regressor)
    batches = iterate_batches(train.shape[0], config.batch_size, seed=seed + 104_729)
    every = config.eval_every if eval_every is None else eval_every
    adam = dict(
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps, weight_decay=config.weight_decay
    )

    done_flops = 0.0
    for phase in plan.phases:
        if phase.name == "hint":
            names = model.prefix_param_names(dcfg.student_layer)
            params = [model.params[n] for n in names] + regressor.parameters()
            peak, kind = config.eta_ht or config.eta, "constant"
        else:
            params = model.parameters() + (regressor.parameters() if method == "hldc" else [])
            peak, kind = config.eta, "wsd"
        warmup = config.warmup_steps if config.warmup_steps is not None else default_warmup(phase.steps)
        warmup = min(warmup, phase.steps - 1)
        state.schedule = Schedule(kind, peak, warmup, phase.steps, config.decay_fraction, config.floor_ratio)
        state.optimizer = OptimizerState.for_params(params, peak_lr=peak, **adam)
        if track_phase_params:
            state.phase_start_params = model.state_copy()
        obj_phase = "hint" if phase.name == "hint" else None
        for i in range(1, phase.steps + 1):
            ids = next(batches)
            tokens = train[ids]
            batch = Batch(tokens, dataset.mask(tokens), ids)
            if cache is not None:
                signals = cache.lookup(ids, tokens.shape[1], dtype=model.dtype)
                batch.teacher_topk, batch.teacher_hidden = signals.topk, signals.activations
            lr = lr_at(state.schedule, i)
            with ad.Tape():
                terms = objective_terms(method, batch, model, dcfg, regressor, phase=obj_phase)
                loss = terms["loss"]
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at step {state.step + 1} ({phase.name} phase)")
                ad.backward(loss)
            adamw_step(params, [p.grad for p in params], state.optimizer, lr)
            model.zero_grad()
            if regressor is not None:
                regressor.zero_grad()
            state.step += 1
            state.cum_flops = done_flops + phase.per_token_cost * (i * plan.tokens_per_step)
            row = {c: "" for c in METRIC_COLUMNS}
            row.update(step=state.step, phase=phase.name, lr=lr, cum_flops=state.cum_flops)
            row.update({k: v.item() for k, v in terms.items()})
            state.metrics.append(row)
            held_out_eval_hook(state, dataset, every, config.eval_batch_size)
        done_flops += phase.flops

    if out_dir is not None:
        write_run(state, config, out_dir)
    return state


def write_run(state: RunState, config: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.model, out / "model.ckpt", extra={"method": state.method, "seed": state.seed})
    write_metrics(state.metrics, out / "metrics.csv")
    save_config(config, out / "config.txt")
    state.plan.to_json(out / "plan.json")
    summary = {
        "method": state.method,
        "seed": state.seed,
        "steps": state.step,
        "cum_flops": state.cum_flops,
        "final_loss": state.metrics[-1]["loss"] if state.metrics else math.nan,
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2))


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in METRIC_COLUMNS})


def moving_average(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    window = min(window, len(values))
    return np.convolve(values, np.ones(window) / window, mode="valid")

"""Per-token training FLOPs, overtraining-unit budgets and compute-matched plans.

Per-token forward costs: full backbone ``2N``, half backbone ``N``,
de-embedding ``2 d_S V``, regressor ``2 N_reg``.  Backward costs twice the
forward for parametric layers, so training triples them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources

from hldlab.model import Regressor, TransformerModel, regressor_param_count

CHINCHILLA_TOKENS_PER_PARAM = 20


@dataclass(frozen=True)
class CostModel:
    n_backbone: float
    d_student: int
    d_teacher: int
    vocab_size: int
    n_regressor: float = 0.0
    teacher_cost: float = 0.0

    def __post_init__(self):
        for name in ("n_backbone", "d_student", "d_teacher", "vocab_size", "n_regressor", "teacher_cost"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def for_models(
        cls,
        student: TransformerModel,
        d_teacher: int,
        regressor: Regressor | None = None,
        teacher_cost: float = 0.0,
    ) -> "CostModel":
        if regressor is not None and regressor.input_dim != student.config.d_emb:
            raise ValueError("regressor input width does not match the student")
        return cls(
            n_backbone=student.backbone_param_count(),
            d_student=student.config.d_emb,
            d_teacher=d_teacher,
            vocab_size=student.config.vocab_size,
            n_regressor=0 if regressor is None else regressor.param_count,
            teacher_cost=teacher_cost,
        )


def forward_costs(cm: CostModel) -> dict[str, float]:
    """Per-token forward-pass building blocks."""
    return {
        "forward": 2.0 * cm.n_backbone,
        "half_forward": 1.0 * cm.n_backbone,
        "deembedding": 2.0 * cm.d_student * cm.vocab_size,
        "regressor": 2.0 * cm.n_regressor,
    }


def cost_per_token(method: str, cm: CostModel, phase: str | int | None = None) -> float:
    """Training FLOPs per token.  HLDF needs ``phase`` (1/"hint" or 2/"kd")."""
    c_data = 6.0 * cm.n_backbone + 6.0 * cm.d_student * cm.vocab_size
    c_kd = c_data + cm.teacher_cost
    if method == "nll":
        return c_data
    if method == "kd":
        return c_kd
    if method == "hldc":
        return c_kd + 6.0 * cm.n_regressor
    if method == "hldf":
        if phase in (1, "hint"):
            return 3.0 * cm.n_backbone + 6.0 * cm.n_regressor + cm.teacher_cost / 2.0
        if phase in (2, "kd"):
            return c_kd
        raise ValueError("hldf cost needs phase 1 ('hint') or 2 ('kd')")
    raise ValueError(f"unknown method {method!r}")


def ot_tokens(k: float, cm: CostModel) -> float:
    """Tokens in ``k`` overtraining units: ``k * 20 * N``."""
    if not k > 0:
        raise ValueError("overtraining multiple must be positive")
    return k * CHINCHILLA_TOKENS_PER_PARAM * cm.n_backbone


def ot_budget(k: float, cm: CostModel) -> float:
    """FLOPs of ``k`` overtraining units, priced at the NLL per-token cost."""
    return ot_tokens(k, cm) * cost_per_token("nll", cm)


@dataclass(frozen=True)
class PhaseAllocation:
    name: str
    per_token_cost: float
    steps: int
    tokens: int

    @property
    def flops(self) -> float:
        return self.per_token_cost * self.tokens


@dataclass
class FlopsPlan:
    method: str
    total_budget_flops: float
    tokens_per_step: int
    phases: list[PhaseAllocation] = field(default_factory=list)
    ot_units: float = 0.0

    @property
    def realized_flops(self) -> float:
        return sum(p.flops for p in self.phases)

    @property
    def forfeited_flops(self) -> float:
        return self.total_budget_flops - self.realized_flops

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    def phase(self, name: str) -> PhaseAllocation | None:
        return next((p for p in self.phases if p.name == name), None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["realized_flops"] = self.realized_flops
        d["forfeited_flops"] = self.forfeited_flops
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FlopsPlan":
        phases = [PhaseAllocation(**{k: p[k] for k in ("name", "per_token_cost", "steps", "tokens")}) for p in d["phases"]]
        return cls(d["method"], d["total_budget_flops"], d["tokens_per_step"], phases, d.get("ot_units", 0.0))

    @classmethod
    def from_json(cls, path) -> "FlopsPlan":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _alloc(name: str, cost: float, budget: float, tokens_per_step: int) -> PhaseAllocation:
    steps = math.floor(budget / (tokens_per_step * cost)) if cost > 0 else 0
    if steps < 1:
        raise ValueError(f"budget {budget:.4g} FLOPs too small for one {name} step ({tokens_per_step * cost:.4g})")
    return PhaseAllocation(name, cost, steps, steps * tokens_per_step)


def plan(method: str, cm: CostModel, budget: float, tokens_per_step: int, p1: float = 0.0) -> FlopsPlan:
    """Split ``budget`` FLOPs into whole optimizer steps.

    Leftover FLOPs smaller than one step are forfeited.  For HLDF, phase 1 gets
    ``p1`` of the budget and phase 2 whatever phase 1 did not spend; with
    ``p1 == 0`` the plan is exactly the KD plan.
    """
    if tokens_per_step < 1:
        raise ValueError("tokens_per_step must be positive")
    if not 0.0 <= p1 < 1.0:
        raise ValueError("p1 must lie in [0, 1)")
    phases: list[PhaseAllocation] = []
    if method == "hldf":
        remaining = budget
        if p1 > 0:
            hint = _alloc("hint", cost_per_token("hldf", cm, "hint"), p1 * budget, tokens_per_step)
            phases.append(hint)
            remaining = budget - hint.flops
        phases.append(_alloc("kd", cost_per_token("hldf", cm, "kd"), remaining, tokens_per_step))
    else:
        phases.append(_alloc(method, cost_per_token(method, cm), budget, tokens_per_step))
    one_ot = ot_budget(1, cm) if cm.n_backbone > 0 else float("nan")
    return FlopsPlan(method, float(budget), tokens_per_step, phases, budget / one_ot)


def load_preset(name: str) -> dict:
    """A packaged cost preset (``"gemma3_123m"``, ``"gemma3_27b"`` ...)."""
    text = resources.files("hldlab.presets").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def preset_cost_model(name: str, method: str = "kd") -> CostModel:
    """Cost model for a preset, with the regressor that ``method`` trains."""
    p = load_preset(name)
    n_reg = 0
    spec = p.get("regressors", {}).get(method)
    if spec is not None:
        n_reg = regressor_param_count(spec["kind"], p["d_student"], p["d_teacher"], spec.get("expansion", 4))
    return CostModel(p["n_backbone"], p["d_student"], p["d_teacher"], p["vocab_size"], n_reg, p.get("teacher_cost", 0.0))

"""Desk-scale end-to-end experiment on a Markov source with a known entropy rate.

A teacher is trained on the chain, its top-k logits and one mid-layer
activation are cached, and four students (NLL, KD, HLDC, HLDF) are trained
compute-matched through the grid harness.  No student can beat the entropy
rate on held-out data, which gives a floor every method must respect.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from hldlab.data import MarkovSource, TokenDataset, markov_dataset
from hldlab.harness import GridSpec, RunRecord, run_grid
from hldlab.model import save_checkpoint
from hldlab.teacher_cache import cache_teacher
from hldlab.trainer import TrainConfig, held_out_eval, plan_for, run


@dataclass
class OracleSettings:
    num_states: int = 16
    entropy: float = 0.9
    context_length: int = 32
    num_train: int = 4096
    num_val: int = 4096
    data_seed: int = 0
    teacher_layers: int = 4
    teacher_d_emb: int = 128
    teacher_d_ff: int = 512
    teacher_ot: float = 0.01
    teacher_eta: float = 3e-3
    student_layers: int = 2
    student_d_emb: int = 64
    student_d_ff: int = 256
    num_heads: int = 4
    batch_size: int = 16
    top_k: int = 16
    cache_layer: int = 2
    eta: float = 3e-3
    tau: float = 1.0
    alpha: float = 0.7
    gamma: float = 0.05
    p1: float = 0.1
    student_ot: float = 0.25
    seed: int = 0
    methods: list[str] = field(default_factory=lambda: ["nll", "kd", "hldc", "hldf"])

    def student_config(self) -> TrainConfig:
        return TrainConfig(
            student_num_layers=self.student_layers,
            student_d_emb=self.student_d_emb,
            student_num_heads=self.num_heads,
            student_d_ff=self.student_d_ff,
            tie_embeddings=False,
            teacher_d_emb=self.teacher_d_emb,
            teacher_layer=self.cache_layer,
            top_k=self.top_k,
            batch_size=self.batch_size,
            eval_batch_size=512,
        )

    def teacher_config(self) -> TrainConfig:
        return TrainConfig(
            student_num_layers=self.teacher_layers,
            student_d_emb=self.teacher_d_emb,
            student_num_heads=self.num_heads,
            student_d_ff=self.teacher_d_ff,
            tie_embeddings=False,
            eta=self.teacher_eta,
            batch_size=self.batch_size,
            eval_batch_size=512,
        )


@dataclass
class OracleResult:
    entropy_rate: float
    teacher_val: float
    records: list[RunRecord]
    run_dirs: dict[str, Path]

    def val_loss(self, method: str) -> float:
        return next(r.metrics["val_logppl"] for r in self.records if r.method == method)

    def metrics_rows(self, method: str) -> list[dict]:
        with open(self.run_dirs[method] / "metrics.csv") as f:
            return list(csv.DictReader(f))

    def summary(self) -> dict:
        return {
            "entropy_rate": self.entropy_rate,
            "teacher_val": self.teacher_val,
            "students": {r.method: {"val_logppl": r.metrics.get("val_logppl"), "cum_flops": r.cum_flops} for r in self.records},
        }


def build_source(s: OracleSettings) -> MarkovSource:
    return MarkovSource.with_entropy(s.num_states, s.entropy, seed=s.data_seed)


def run_oracle(settings: OracleSettings, workdir) -> OracleResult:
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    source = build_source(settings)
    data_path = work / "markov.tokens"
    if data_path.exists():
        dataset = TokenDataset.load(data_path)
    else:
        dataset = markov_dataset(source, settings.num_train, settings.num_val, settings.context_length, settings.data_seed)
        dataset.save(data_path)

    cache_path = work / "teacher.cache"
    tcfg = settings.teacher_config()
    if not cache_path.exists():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state = run("nll", tcfg, plan_for("nll", tcfg, dataset, ot=settings.teacher_ot), dataset, seed=settings.seed)
        save_checkpoint(state.model, work / "teacher.ckpt")
        teacher_val = held_out_eval(state.model, dataset, 512)
        (work / "teacher.json").write_text(json.dumps({"val_logppl": teacher_val}))
        cache_teacher(state.model, dataset.train, settings.cache_layer, settings.top_k, cache_path, batch_size=256)
    teacher_val = json.loads((work / "teacher.json").read_text())["val_logppl"]

    spec = GridSpec(
        etas=[settings.eta],
        taus=[settings.tau],
        alphas=[settings.alpha],
        gammas=[settings.gamma],
        p1s=[settings.p1],
        methods=list(settings.methods),
        ot=settings.student_ot,
        seeds=[settings.seed],
    )
    grid_dir = work / "runs"
    records = run_grid(spec, settings.student_config(), dataset, str(cache_path), grid_dir)
    run_dirs = {r.method: grid_dir / r.run_id for r in records}
    (work / "settings.json").write_text(json.dumps(asdict(settings), indent=2))
    return OracleResult(source.entropy_rate, teacher_val, records, run_dirs)

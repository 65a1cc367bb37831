"""Hyperparameter grids over the four methods, and the CSV comparison reports."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from hldlab.data import TokenDataset
from hldlab.objectives import METHODS
from hldlab.trainer import TrainConfig, plan_for, held_out_eval, run

METHOD_LABELS = {"nll": "NLL", "kd": "KD", "hldc": "HLDC", "hldf": "HLDF"}
HP_COLUMNS = ("Method", "eta", "P1", "alpha", "tau", "gamma")
MISSING = "--"


@dataclass
class GridSpec:
    etas: list[float]
    taus: list[float] = field(default_factory=lambda: [1.0])
    alphas: list[float] = field(default_factory=lambda: [0.7])
    gammas: list[float] = field(default_factory=lambda: [0.05])
    p1s: list[float] = field(default_factory=lambda: [0.05])
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    ot: float = 1.0
    seeds: list[int] = field(default_factory=lambda: [0])
    parallelism: int = 1

    def __post_init__(self):
        for name in ("etas", "taus", "alphas", "gammas", "p1s", "seeds"):
            if not getattr(self, name):
                raise ValueError(f"grid list {name!r} is empty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    @classmethod
    def from_file(cls, path) -> "GridSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


@dataclass(frozen=True)
class Cell:
    method: str
    eta: float
    seed: int
    alpha: float | None = None
    tau: float | None = None
    gamma: float | None = None
    p1: float | None = None

    def run_id(self, base_digest: str = "") -> str:
        blob = json.dumps([asdict(self), base_digest], sort_keys=True).encode()
        return f"{self.method}-{hashlib.sha256(blob).hexdigest()[:12]}"


def grid_cells(spec: GridSpec) -> list[Cell]:
    """NLL per eta, KD per (eta, tau, alpha), HLDC adds gamma, HLDF adds P1."""
    cells = []
    for method in METHODS:
        if method not in spec.methods:
            continue
        for seed, eta in itertools.product(spec.seeds, spec.etas):
            if method == "nll":
                cells.append(Cell("nll", eta, seed))
                continue
            for tau, alpha in itertools.product(spec.taus, spec.alphas):
                if method == "kd":
                    cells.append(Cell("kd", eta, seed, alpha, tau))
                elif method == "hldc":
                    cells += [Cell("hldc", eta, seed, alpha, tau, gamma=g) for g in spec.gammas]
                else:
                    cells += [Cell("hldf", eta, seed, alpha, tau, p1=p) for p in spec.p1s]
    return cells


@dataclass
class RunRecord:
    method: str
    eta: float
    p1: float | None
    alpha: float | None
    tau: float | None
    gamma: float | None
    seed: int
    metrics: dict[str, float] = field(default_factory=dict)
    cum_flops: float = 0.0
    checkpoint: str = ""
    run_id: str = ""
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def _cell_config(base: TrainConfig, cell: Cell, ot: float) -> TrainConfig:
    changes = {"eta": cell.eta, "eta_ht": cell.eta, "ot": ot}
    if cell.alpha is not None:
        changes.update(alpha=cell.alpha, tau=cell.tau)
    if cell.gamma is not None:
        changes["gamma"] = cell.gamma
    changes["p1"] = cell.p1 or 0.0
    return base.replace(**changes)


def _record(cell: Cell, **kw) -> RunRecord:
    return RunRecord(cell.method, cell.eta, cell.p1, cell.alpha, cell.tau, cell.gamma, cell.seed, **kw)


def _run_cell(cell: Cell, base: TrainConfig, dataset: TokenDataset, cache_path, ot: float, out_dir, run_id: str):
    from hldlab.teacher_cache import open_cache

    run_dir = Path(out_dir) / run_id
    try:
        cfg = _cell_config(base, cell, ot)
        plan = plan_for(cell.method, cfg, dataset)
        cache = open_cache(cache_path) if cell.method != "nll" else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state = run(cell.method, cfg, plan, dataset, cache, seed=cell.seed, out_dir=run_dir)
        metrics = {"val_logppl": held_out_eval(state.model, dataset, cfg.eval_batch_size)}
        rec = _record(cell, metrics=metrics, cum_flops=state.cum_flops, checkpoint=str(run_dir / "model.ckpt"), run_id=run_id)
    except Exception as exc:  # a failed cell is recorded, the grid goes on
        rec = _record(cell, run_id=run_id, status="failed", error=f"{exc!r}\n{traceback.format_exc(limit=3)}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "record.json").write_text(rec.to_json())
    return rec


def run_grid(spec: GridSpec, base: TrainConfig, dataset: TokenDataset, cache_path, out_dir) -> list[RunRecord]:
    """Train every grid cell compute-matched at ``spec.ot``; completed cells are reused."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_digest = hashlib.sha256(
        json.dumps([asdict(base), dataset.digest, str(cache_path)], sort_keys=True).encode()
    ).hexdigest()
    cells = grid_cells(spec)
    records: dict[int, RunRecord] = {}
    todo = []
    for i, cell in enumerate(cells):
        run_id = cell.run_id(base_digest)
        done = out / run_id / "record.json"
        if done.exists():
            rec = RunRecord.from_json(done.read_text())
            if rec.ok:
                records[i] = rec
                continue
        todo.append((i, cell, run_id))
    if spec.parallelism > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=spec.parallelism) as pool:
            futures = {i: pool.submit(_run_cell, c, base, dataset, cache_path, spec.ot, out, rid) for i, c, rid in todo}
            for i, fut in futures.items():
                records[i] = fut.result()
    else:
        for i, cell, run_id in todo:
            records[i] = _run_cell(cell, base, dataset, cache_path, spec.ot, out, run_id)
    return [records[i] for i in range(len(cells))]


def load_records(runs_dir) -> list[RunRecord]:
    paths = sorted(Path(runs_dir).glob("*/record.json"))
    return [RunRecord.from_json(p.read_text()) for p in paths]


# ---------------------------------------------------------------------------
# comparisons


def _sort_key(row: dict):
    return tuple((v is None, v if not isinstance(v, str) else 0, str(v)) for v in row.values())


def pointwise_improvement(
    records: list[RunRecord], metric: str, baseline: str = "kd", higher_is_better: bool = False
) -> list[dict]:
    """Per shared ``(eta, tau, alpha, seed)`` point: ``delta = baseline - method``.

    Positive deltas mean the method beat the baseline.  NLL runs carry no
    ``tau``/``alpha`` and are compared with every baseline run of the same eta.
    """
    ok = [r for r in records if r.ok and metric in r.metrics]
    base = {}
    for r in ok:
        if r.method == baseline:
            base[(r.eta, r.tau, r.alpha, r.seed)] = r
    rows = []
    for r in ok:
        if r.method == baseline:
            continue
        if r.tau is None and r.alpha is None:
            matches = [b for k, b in base.items() if k[0] == r.eta and k[3] == r.seed]
        else:
            b = base.get((r.eta, r.tau, r.alpha, r.seed))
            matches = [b] if b is not None else []
        if not matches:
            warnings.warn(f"no {baseline} baseline for {r.method} at eta={r.eta}, tau={r.tau}, alpha={r.alpha}")
            continue
        for b in matches:
            delta = b.metrics[metric] - r.metrics[metric]
            rows.append(
                {
                    "Method": METHOD_LABELS[r.method],
                    "eta": r.eta,
                    "P1": r.p1,
                    "alpha": b.alpha,
                    "tau": b.tau,
                    "gamma": r.gamma,
                    "seed": r.seed,
                    "baseline": b.metrics[metric],
                    "value": r.metrics[metric],
                    "delta": -delta if higher_is_better else delta,
                }
            )
    return sorted(rows, key=_sort_key)


def best_table(records: list[RunRecord], metrics: list[str]) -> list[dict]:
    """Per method, the lowest value of each metric over its grid cells."""
    rows = []
    for method in METHODS:
        mine = [r for r in records if r.method == method and r.ok]
        if not mine:
            continue
        row = {"Method": METHOD_LABELS[method]}
        for m in metrics:
            values = [r.metrics[m] for r in mine if m in r.metrics]
            row[m] = min(values) if values else None
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if value is None:
        return MISSING
    if isinstance(value, float):
        return repr(value)
    return str(value)


def full_rows(records: list[RunRecord], metrics: list[str] | None = None) -> list[dict]:
    """The run-table layout: method and hyperparameters, then one column per metric."""
    ok = [r for r in records if r.ok]
    if metrics is None:
        metrics = sorted({m for r in ok for m in r.metrics})
    order = {m: i for i, m in enumerate(METHODS)}
    ok.sort(key=lambda r: (order[r.method], r.eta, r.p1 or 0.0, r.alpha or 0.0, r.tau or 0.0, r.gamma or 0.0, r.seed))
    rows = []
    for r in ok:
        row = {
            "Method": METHOD_LABELS[r.method],
            "eta": r.eta,
            "P1": r.p1 if r.p1 is not None else 0.0,
            "alpha": r.alpha,
            "tau": r.tau,
            "gamma": r.gamma,
        }
        row.update({m: r.metrics.get(m) for m in metrics})
        rows.append(row)
    return rows


def to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else list(HP_COLUMNS)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    """Inverse of :func:`to_csv`: numbers come back as floats, ``--`` as ``None``."""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in raw.items():
            if v == MISSING:
                row[k] = None
            else:
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
        rows.append(row)
    return rows


def report(records: list[RunRecord], kind: str, metric: str | None = None) -> str:
    """CSV text for ``kind`` in ``hist``, ``scatter``, ``best`` or ``full``."""
    metrics = sorted({m for r in records if r.ok for m in r.metrics})
    if kind == "full":
        return to_csv(full_rows(records, metrics), list(HP_COLUMNS) + metrics)
    if kind == "best":
        chosen = [metric] if metric else metrics
        return to_csv(best_table(records, chosen), ["Method"] + chosen)
    if kind in ("hist", "scatter"):
        if metric is None:
            raise ValueError(f"report kind {kind!r} needs a metric")
        rows = pointwise_improvement(records, metric)
        if kind == "hist":
            return to_csv(rows, ["Method", "eta", "P1", "alpha", "tau", "gamma", "seed", "delta"])
        return to_csv(rows, ["Method", "eta", "P1", "alpha", "tau", "gamma", "seed", "baseline", "value"])
    raise ValueError(f"unknown report kind {kind!r}")

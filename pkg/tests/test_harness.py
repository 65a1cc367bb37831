import itertools
import random

import pytest

from hldlab.data import MarkovSource, markov_dataset
from hldlab.harness import (
    HP_COLUMNS,
    GridSpec,
    RunRecord,
    best_table,
    full_rows,
    grid_cells,
    load_records,
    parse_csv,
    pointwise_improvement,
    report,
    run_grid,
    to_csv,
)
from hldlab.model import ModelConfig, init_model
from hldlab.teacher_cache import cache_teacher
from hldlab.trainer import TrainConfig


def rec(method, value, eta=1e-3, alpha=None, tau=None, gamma=None, p1=None, seed=0, **metrics):
    if method != "nll" and alpha is None:
        alpha, tau = 0.7, 1.0
    return RunRecord(method, eta, p1, alpha, tau, gamma, seed, metrics={"c4": value, **metrics})


class TestGridCells:
    def test_pairing_counts(self):
        spec = GridSpec(etas=[1e-3, 3e-3, 1e-2], taus=[1.0, 2.0], alphas=[0.7, 0.9], gammas=[0.1, 0.05], p1s=[0.01, 0.05])
        cells = grid_cells(spec)
        counts = {m: sum(c.method == m for c in cells) for m in ("nll", "kd", "hldc", "hldf")}
        assert counts == {"nll": 3, "kd": 12, "hldc": 24, "hldf": 24}

    def test_counts_match_product_oracle(self):
        spec = GridSpec(etas=[1, 2], taus=[1, 2, 3], alphas=[0.5], gammas=[0.1, 0.2], p1s=[0.1, 0.2, 0.3], seeds=[0, 1])
        expected = {
            "nll": set(itertools.product(spec.seeds, spec.etas)),
            "kd": set(itertools.product(spec.seeds, spec.etas, spec.taus, spec.alphas)),
            "hldc": set(itertools.product(spec.seeds, spec.etas, spec.taus, spec.alphas, spec.gammas)),
            "hldf": set(itertools.product(spec.seeds, spec.etas, spec.taus, spec.alphas, spec.p1s)),
        }
        got = {m: set() for m in expected}
        for c in grid_cells(spec):
            extra = {"nll": (), "kd": (c.tau, c.alpha), "hldc": (c.tau, c.alpha, c.gamma), "hldf": (c.tau, c.alpha, c.p1)}
            got[c.method].add((c.seed, c.eta) + extra[c.method])
        assert got == expected

    def test_run_ids_unique(self):
        spec = GridSpec(etas=[1e-3, 3e-3], taus=[1.0, 2.0], alphas=[0.7, 0.9], gammas=[0.1, 0.05], p1s=[0.01, 0.05], seeds=[0, 1])
        ids = [c.run_id("base") for c in grid_cells(spec)]
        assert len(set(ids)) == len(ids)

    def test_empty_methods(self):
        assert grid_cells(GridSpec(etas=[1e-3], methods=[])) == []

    def test_validation(self):
        with pytest.raises(ValueError):
            GridSpec(etas=[])
        with pytest.raises(ValueError):
            GridSpec(etas=[1e-3], methods=["fitnet"])

    def test_spec_file_round_trip(self, tmp_path):
        spec = GridSpec(etas=[1e-3], p1s=[0.01, 0.04], ot=2.0, parallelism=3)
        spec.to_file(tmp_path / "g.json")
        assert GridSpec.from_file(tmp_path / "g.json") == spec


class TestPointwiseImprovement:
    def test_identical_is_zero(self):
        rows = pointwise_improvement([rec("kd", 3.1), rec("hldc", 3.1, gamma=0.05)], "c4")
        assert rows[0]["delta"] == 0.0

    def test_table_values(self):
        rows = pointwise_improvement([rec("kd", 3.005), rec("hldf", 3.000, p1=0.01)], "c4")
        assert rows[0]["Method"] == "HLDF"
        assert rows[0]["delta"] == pytest.approx(0.005, abs=1e-12)

    def test_worse_method_is_negative(self):
        rows = pointwise_improvement([rec("kd", 3.0), rec("hldc", 3.2, gamma=0.1)], "c4")
        assert rows[0]["delta"] < 0

    def test_higher_is_better_flips_sign(self):
        rows = pointwise_improvement([rec("kd", 0.40), rec("hldc", 0.45, gamma=0.1)], "c4", higher_is_better=True)
        assert rows[0]["delta"] == pytest.approx(0.05)

    def test_nll_pairs_with_every_kd_of_its_eta(self):
        records = [rec("kd", 3.0, alpha=0.7, tau=1.0), rec("kd", 3.1, alpha=0.9, tau=1.0), rec("nll", 3.2), rec("kd", 2.0, eta=5e-3)]
        rows = [r for r in pointwise_improvement(records, "c4") if r["Method"] == "NLL"]
        assert sorted(round(r["delta"], 10) for r in rows) == [-0.2, -0.1]

    def test_missing_baseline_warns_and_skips(self):
        with pytest.warns(UserWarning, match="baseline"):
            rows = pointwise_improvement([rec("kd", 3.0, alpha=0.7), rec("hldc", 3.0, alpha=0.9, gamma=0.1)], "c4")
        assert rows == []

    def test_order_independent(self):
        rng = random.Random(0)
        records = []
        for eta, alpha, tau in itertools.product([1e-3, 3e-3], [0.7, 0.9], [1.0, 2.0]):
            records.append(rec("kd", rng.uniform(3, 4), eta=eta, alpha=alpha, tau=tau))
            for g in (0.1, 0.05):
                records.append(rec("hldc", rng.uniform(3, 4), eta=eta, alpha=alpha, tau=tau, gamma=g))
            records.append(rec("hldf", rng.uniform(3, 4), eta=eta, alpha=alpha, tau=tau, p1=0.01))
        records += [rec("nll", rng.uniform(3, 4), eta=e) for e in (1e-3, 3e-3)]
        ref = pointwise_improvement(records, "c4")
        for _ in range(5):
            shuffled = records[:]
            rng.shuffle(shuffled)
            assert pointwise_improvement(shuffled, "c4") == ref


class TestBestTable:
    def test_single_record_verbatim(self):
        rows = best_table([rec("kd", 3.2, wiki=4.1)], ["c4", "wiki"])
        assert rows == [{"Method": "KD", "c4": 3.2, "wiki": 4.1}]

    def test_argmin(self):
        rows = best_table([rec("kd", 3.01), rec("kd", 3.005, alpha=0.9), rec("hldf", 3.0, p1=0.01)], ["c4"])
        best = min(rows, key=lambda r: r["c4"])
        assert best["Method"] == "HLDF"

    def test_brute_force(self):
        rng = random.Random(3)
        methods = ["nll", "kd", "hldc", "hldf"]
        records = [rec(m, rng.uniform(2, 5), eta=rng.choice([1e-3, 3e-3]), wiki=rng.uniform(2, 5)) for m in methods * 10]
        table = {r["Method"]: r for r in best_table(records, ["c4", "wiki"])}
        for m in methods:
            for metric in ("c4", "wiki"):
                brute = float("inf")
                for r in records:
                    if r.method == m and r.metrics[metric] < brute:
                        brute = r.metrics[metric]
                assert table[m.upper()][metric] == brute


class TestCsv:
    def records(self):
        return [
            rec("nll", 3.3, eta=1e-3),
            rec("kd", 3.1, eta=1e-3, alpha=0.9, tau=2.0),
            rec("hldc", 3.05, eta=1e-3, alpha=0.9, tau=2.0, gamma=0.05),
            rec("hldf", 3.0000000001, eta=3e-3, alpha=0.7, tau=1.0, p1=0.01),
        ]

    def test_full_columns(self):
        text = report(self.records(), "full")
        header = text.splitlines()[0].split(",")
        assert header == list(HP_COLUMNS) + ["c4"]

    def test_hyperparameters_round_trip(self):
        rows = full_rows(self.records())
        assert parse_csv(to_csv(rows)) == rows
        hldf = [r for r in parse_csv(to_csv(rows)) if r["Method"] == "HLDF"][0]
        assert (hldf["eta"], hldf["P1"], hldf["alpha"], hldf["tau"], hldf["gamma"]) == (3e-3, 0.01, 0.7, 1.0, None)
        assert hldf["c4"] == 3.0000000001

    def test_nll_marks_kd_knobs_missing(self):
        line = [ln for ln in report(self.records(), "full").splitlines() if ln.startswith("NLL")][0]
        assert line == "NLL,0.001,0.0,--,--,--,3.3"

    @pytest.mark.filterwarnings("ignore:no kd baseline")
    def test_report_kinds(self):
        recs = self.records()
        assert report(recs, "best", "c4").splitlines()[0] == "Method,c4"
        assert report(recs, "hist", "c4").splitlines()[0].endswith("seed,delta")
        assert report(recs, "scatter", "c4").splitlines()[0].endswith("baseline,value")
        with pytest.raises(ValueError):
            report(recs, "hist")
        with pytest.raises(ValueError):
            report(recs, "pie", "c4")

    def test_failed_records_are_left_out(self):
        bad = rec("kd", 9.9)
        bad.status = "failed"
        assert "9.9" not in report(self.records() + [bad], "full")


@pytest.fixture(scope="module")
def tiny_grid(tmp_path_factory):
    work = tmp_path_factory.mktemp("grid")
    ds = markov_dataset(MarkovSource.with_entropy(8, 1.0, seed=0), 32, 8, 8, seed=0)
    teacher = init_model(ModelConfig(2, 24, 2, 48, 8, 8, tie_embeddings=False), seed=1)
    cache_teacher(teacher, ds.train, 1, 8, work / "t.cache")
    base = TrainConfig(
        student_num_layers=2, student_d_emb=16, student_num_heads=2, student_d_ff=32,
        tie_embeddings=False, teacher_d_emb=24, top_k=8, batch_size=4, eval_batch_size=8,
    )
    spec = GridSpec(etas=[1e-2], p1s=[0.2], ot=0.2)
    return work, ds, base, spec


class TestRunGrid:
    def test_compute_matched_and_idempotent(self, tiny_grid):
        work, ds, base, spec = tiny_grid
        first = run_grid(spec, base, ds, work / "t.cache", work / "runs")
        assert [r.method for r in first] == ["nll", "kd", "hldc", "hldf"]
        assert all(r.ok for r in first), [r.error for r in first]
        flops = [r.cum_flops for r in first]
        assert max(flops) / min(flops) - 1 < 0.01
        stamps = {p: p.stat().st_mtime_ns for p in (work / "runs").glob("*/model.ckpt")}
        again = run_grid(spec, base, ds, work / "t.cache", work / "runs")
        assert again == first
        assert {p: p.stat().st_mtime_ns for p in (work / "runs").glob("*/model.ckpt")} == stamps
        assert sorted(r.run_id for r in load_records(work / "runs")) == sorted(r.run_id for r in first)

    def test_failed_cell_recorded(self, tiny_grid):
        work, ds, base, spec = tiny_grid
        spec = GridSpec(etas=[1e-2], methods=["nll", "kd"], ot=0.2)
        records = run_grid(spec, base, ds, work / "missing.cache", work / "broken")
        status = {r.method: r.status for r in records}
        assert status == {"nll": "ok", "kd": "failed"}
        assert "missing.cache" in records[1].error

    def test_parallel_matches_serial(self, tiny_grid):
        work, ds, base, _ = tiny_grid
        spec = GridSpec(etas=[1e-2, 3e-3], methods=["nll"], ot=0.2)
        serial = run_grid(spec, base, ds, work / "t.cache", work / "serial")
        spec.parallelism = 2
        parallel = run_grid(spec, base, ds, work / "t.cache", work / "parallel")
        assert [r.metrics for r in serial] == [r.metrics for r in parallel]

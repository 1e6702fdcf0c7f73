import csv
import math
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_runner
from fedsim.engine import run
from fedsim.errors import RecordError, TuningError
from fedsim.experiment import (Grid, analyze, config_value, mean_std, run_parallel, save_records, score,
                               tune)
from fedsim.records import Record, load_record, log_metric


def fake_record(lr, seed, final, status="completed"):
    rec = Record({"config": {"algorithm": "fedavg", "seed": seed, "algo": {"lr": lr}}})
    log_metric(rec, 0, 0, "val_loss", 1.0)
    log_metric(rec, 5, 10 + seed, "val_loss", final)
    rec.status = status
    return rec


# -- records ------------------------------------------------------------------

def test_log_metric_merges_same_point():
    rec = Record({})
    log_metric(rec, 1, 4, "a", 1.0)
    log_metric(rec, 1, 4, "b", 2.0)
    assert rec.entries == [{"round": 1, "virtual_time": 4, "metrics": {"a": 1.0, "b": 2.0}}]


def test_log_metric_rejects_going_backwards():
    rec = Record({})
    log_metric(rec, 2, 5, "a", 1.0)
    with pytest.raises(RecordError):
        log_metric(rec, 1, 6, "a", 1.0)
    with pytest.raises(RecordError):
        log_metric(rec, 3, 5, "a", 1.0)


def test_nan_is_null_and_marks_divergence():
    rec = Record({})
    log_metric(rec, 0, 0, "loss", float("nan"))
    assert rec.status == "diverged"
    assert rec.entries[0]["metrics"]["loss"] is None
    assert '"loss": null' in rec.to_jsonl()


def test_record_round_trip(tmp_path):
    rec = fake_record(0.1, 1, 0.25)
    path = rec.save(tmp_path / "r.jsonl")
    assert load_record(path) == rec
    lines = path.read_text().splitlines()
    assert '"type": "header"' in lines[0] and '"type": "status"' in lines[-1]


def test_malformed_record():
    with pytest.raises(RecordError):
        Record.from_jsonl('{"type": "entry", "round": 0, "virtual_time": 0, "metrics": {}}\n')


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=20))
def test_logged_entries_are_ordered(steps):
    rec = Record({})
    rnd, t = 0, 0
    for dr, dt in steps:
        rnd, t = rnd + dr, t + dt
        last = rec.entries[-1] if rec.entries else None
        try:
            log_metric(rec, rnd, t, "m", 1.0)
        except RecordError:
            assert (rnd, t) != (last["round"], last["virtual_time"]) and t <= last["virtual_time"]
    times = [e["virtual_time"] for e in rec.entries]
    assert all(a < b for a, b in zip(times, times[1:]))


# -- parallel execution ---------------------------------------------------------

def test_parallel_matches_serial(qp_task):
    runners = [make_runner(qp_task, algo, seed=s, rounds=8,
                           simulator={"availability": 0.8, "latency": {"kind": "uniform", "lo": 1, "hi": 5}})
               for algo in ("fedavg", "fedasync") for s in range(2)]
    serial = run_parallel(runners, 1)
    parallel = run_parallel(runners, 4)
    assert [r.to_jsonl() for r in serial] == [r.to_jsonl() for r in parallel]


class Flaky:
    """Fails with MemoryError the first ``n`` calls for each runner seed."""

    def __init__(self, n):
        self.n = n
        self.calls = {}

    def __call__(self, runner):
        c = self.calls.get(runner.seed, 0)
        self.calls[runner.seed] = c + 1
        if c < self.n:
            raise MemoryError("simulated")
        return run(runner)


def test_retryable_fault_is_requeued(qp_task):
    runners = [make_runner(qp_task, seed=s, rounds=2) for s in range(3)]
    fn = Flaky(2)
    recs = run_parallel(runners, 1, fn=fn)
    assert [r.status for r in recs] == ["completed"] * 3
    assert fn.calls == {0: 3, 1: 3, 2: 3}


def test_retry_budget_then_aborted(qp_task):
    runners = [make_runner(qp_task, rounds=2)]
    fn = Flaky(10)
    recs = run_parallel(runners, 1, fn=fn, max_retries=3)
    assert recs[0].status == "aborted" and "MemoryError" in recs[0].error
    assert fn.calls[0] == 4


def crash_on_seed_one(runner):
    if runner.seed == 1:
        raise RuntimeError("boom")
    return run(runner)


@pytest.mark.parametrize("workers", [1, 2])
def test_failing_runner_gives_aborted_record(qp_task, workers):
    runners = [make_runner(qp_task, seed=s, rounds=2) for s in range(3)]
    recs = run_parallel(runners, workers, fn=crash_on_seed_one)
    assert [r.status for r in recs] == ["completed", "aborted", "completed"]
    assert "boom" in recs[1].error
    assert recs[1].config["seed"] == 1


# -- analysis ---------------------------------------------------------------------

def test_mean_std_population():
    mu, sd = mean_std([0.4, 0.6])
    assert mu == pytest.approx(0.5, abs=1e-15) and sd == pytest.approx(0.1, abs=1e-15)


def test_analyze_summary_mean_and_std(tmp_path):
    paths = [fake_record(0.1, s, v).save(tmp_path / f"r{s}.jsonl") for s, v in ((0, 0.4), (1, 0.6))]
    out = analyze(paths, [], tmp_path / "out")
    h = out["header"]
    assert len(out["rows"]) == 1
    row = dict(zip(h, out["rows"][0]))
    assert float(row["val_loss_mean"]) == pytest.approx(0.5, abs=1e-12)
    assert float(row["val_loss_std"]) == pytest.approx(0.1, abs=1e-12)
    with open(tmp_path / "out" / "summary.csv") as fh:
        assert list(csv.reader(fh))[1] == out["rows"][0]


def test_analyze_groups_by_config_key(tmp_path):
    paths = [fake_record(lr, s, lr * 10).save(tmp_path / f"r{lr}_{s}.jsonl")
             for lr in (0.1, 0.2, 0.3) for s in range(2)]
    out = analyze(paths, ["lr"], tmp_path / "out", plot=True)
    assert [r[0] for r in out["rows"]] == ["0.1", "0.2", "0.3"]
    assert all(r[1] == "2" for r in out["rows"])
    assert (tmp_path / "out" / "curves_0.1.csv").is_file()
    assert (tmp_path / "out" / "curves_0.1_time.svg").is_file()


def test_time_curve_carries_values_forward(tmp_path):
    paths = [fake_record(0.1, s, float(s)).save(tmp_path / f"r{s}.jsonl") for s in range(2)]
    analyze(paths, [], tmp_path / "out")
    with open(tmp_path / "out" / "curves_all_time.csv") as fh:
        rows = list(csv.DictReader(fh))
    # times 0, 10, 11: at t=10 seed 0 has finished (0.0) while seed 1 still holds 1.0
    assert [r["virtual_time"] for r in rows] == ["0", "10", "11"]
    assert float(rows[1]["val_loss_mean"]) == pytest.approx(0.5)
    assert float(rows[2]["val_loss_mean"]) == pytest.approx(0.5)


def test_config_value_suffix_lookup():
    rec = fake_record(0.3, 0, 1.0)
    assert config_value(rec, "lr") == 0.3
    assert config_value(rec, "algo.lr") == 0.3
    with pytest.raises(RecordError):
        config_value(rec, "mu")


def test_analyze_without_records():
    with pytest.raises(RecordError):
        analyze([], [])


# -- tuning ------------------------------------------------------------------------

def test_score_only_counts_completed_runs():
    assert score(fake_record(0.1, 0, 0.2), "val_loss", "min") == 0.2
    assert score(fake_record(0.1, 0, 0.2, status="aborted"), "val_loss", "min") is None
    assert score(fake_record(0.1, 0, 0.2), "val_loss", "max", best_over_rounds=True) == 1.0


def test_single_point_grid(qp_task):
    base = make_runner(qp_task, rounds=3)
    res = tune(base, Grid({"lr": [0.05]}))
    assert len(res.records) == 1 and res.best == {"lr": 0.05}
    assert res.best_runner.algo.lr == 0.05


def test_tune_skips_divergent_learning_rate(qp_task, tmp_path):
    base = make_runner(qp_task, rounds=200)
    res = tune(base, Grid({"lr": [0.05, 0.2, 50.0]}))
    assert [r.status for r in res.records] == ["completed", "completed", "diverged"]
    assert res.best != {"lr": 50.0} and res.scores[2] is None
    assert res.best_score == min(res.scores[:2])
    paths = save_records(res.records, res.runners, tmp_path)
    assert len({Path(p).name for p in paths}) == 3


def test_tune_fails_when_nothing_is_usable(qp_task):
    with pytest.raises(TuningError):
        tune(make_runner(qp_task, rounds=200), Grid({"lr": [50.0]}))


def test_grid_validation():
    with pytest.raises(TuningError):
        Grid({})
    with pytest.raises(TuningError):
        Grid({"lr": []})
    assert len(Grid({"lr": [1, 2], "mu": [0, 1, 2]}).points()) == 6
    assert math.isclose(0.1, 0.1)

"""Acceptance gate: ten criteria, each reported on its own PASS/FAIL line.

Every test is tagged with ``@criterion(n, title, budget)``; the budget is the
allowed wall-clock runtime in seconds and is asserted alongside the property.
The terminal summary (see conftest.py) prints one line per criterion.
"""

import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import const, make_runner, qp_engine
from fedsim.benchmark import FederatedTask, gen_task, load_task
from fedsim.cli import main as cli
from fedsim.core import Batch, Model, gradient, loss, num_params
from fedsim.engine import build_engine, run
from fedsim.errors import TraceError
from fedsim.partition import partition_dirichlet, partition_diversity
from fedsim.records import Record, load_record
from fedsim.simulator import ClientProfile, load_trace

FIXTURES = Path(__file__).parent / "fixtures" / "traces"


def criterion(number, title, budget):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            fn(*args, **kwargs)
            elapsed = time.perf_counter() - start
            assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
        return pytest.mark.acceptance(number=number, title=title)(wrapper)
    return deco


@pytest.fixture(scope="module")
def qp20(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc") / "qp20"
    gen_task({"name": "qp", "N": 8, "d": 20}, {"kind": "iid", "num_clients": 8}, out, seed=0)
    return out


@pytest.fixture(scope="module")
def blobs_iid(tmp_path_factory):
    out = tmp_path_factory.mktemp("acc") / "blobs"
    # 500 samples -> 400 training samples, 50 per client
    gen_task({"name": "blobs", "n": 500, "dim": 4, "num_classes": 3}, {"kind": "iid", "num_clients": 8}, out)
    return out


# ---------------------------------------------------------------------------
# 1. QP convergence against the closed-form optimum

@pytest.mark.parametrize("algorithm", ["fedavg", "fedprox", "scaffold", "fednova"])
@criterion(1, "QP convergence oracle", budget=30)
def test_c1_qp_convergence(qp20, algorithm):
    rec = run(make_runner(qp20, algorithm, rounds=200, lr=0.1, mu=0.0))
    assert rec.status == "completed"
    assert rec.final()["rel_dist"] < 1e-3


# ---------------------------------------------------------------------------
# 2. Degeneracy identities

@criterion(2, "degeneracy identities", budget=10)
def test_c2_degeneracy(blobs_iid):
    sim = {"availability": 0.8, "latency": {"kind": "uniform", "lo": 1, "hi": 6}, "drop_prob": 0.1}
    kw = dict(rounds=15, lr=0.2, epochs=2, batch_size=10, proportion=0.5, simulator=sim)
    avg = run(make_runner(blobs_iid, "fedavg", **kw))
    prox = run(make_runner(blobs_iid, "fedprox", mu=0.0, **kw))
    lines = lambda r: r.to_jsonl().splitlines()[1:]  # the header names the algorithm
    assert lines(avg) == lines(prox)

    # equal client sizes and full completeness -> equal local step counts
    eng_avg, _, _ = build_engine(make_runner(blobs_iid, "fedavg", **kw))
    eng_nova, _, _ = build_engine(make_runner(blobs_iid, "fednova", **kw))
    assert len({len(b) for b in eng_avg.clients}) == 1
    for _ in range(15):
        eng_avg.run_sync_round()
        eng_nova.run_sync_round()
        assert np.max(np.abs(eng_avg.theta - eng_nova.theta)) <= 1e-12


# ---------------------------------------------------------------------------
# 3. Gradient checks

def _case(kind, seed):
    rng = np.random.default_rng(seed)
    d, c, h, n = 4, 3, 5, 6
    if kind == "linreg":
        return Model(kind, d, params=rng.normal(size=d + 1)), Batch(rng.normal(size=(n, d)), rng.normal(size=n))
    p = rng.normal(size=num_params(kind, d, c, h if kind == "mlp1" else 0))
    m = Model(kind, d, c, h if kind == "mlp1" else 0, params=p)
    return m, Batch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))


@criterion(3, "gradient checks", budget=10)
def test_c3_gradient_checks():
    h = 1e-5
    for kind in ("linreg", "logreg", "mlp1"):
        for seed in range(100):
            m, b = _case(kind, seed)
            fd = np.empty(m.dim)
            for i in range(m.dim):
                e = np.zeros(m.dim)
                e[i] = h
                fd[i] = (loss(m.with_params(m.params + e), b) - loss(m.with_params(m.params - e), b)) / (2 * h)
            np.testing.assert_allclose(gradient(m, b), fd, rtol=1e-4, atol=0,
                                       err_msg=f"{kind} seed {seed}")


# ---------------------------------------------------------------------------
# 4. Virtual-time law

@criterion(4, "virtual-time law", budget=20)
def test_c4_virtual_time_law():
    assert qp_engine([const(3), const(4)]).run_sync_round().round_duration == 4
    assert qp_engine([const(2), const(2), const(5)]).run_sync_round().round_duration == 5
    assert qp_engine([const(3), const(3), const(3)]).run_sync_round().round_duration == 3

    def total_time(var, seed):
        lat = {"kind": "lognormal", "mean": 200, "var": var}
        eng = qp_engine([ClientProfile(latency=lat) for _ in range(10)], seed=seed)
        for _ in range(20):
            eng.run_sync_round()
        return eng.clock.now

    wins = sum(total_time(50, s) < total_time(2000, s) for s in range(100))
    assert wins >= 95, wins


# ---------------------------------------------------------------------------
# 5. Dropout penalty

@criterion(5, "dropout penalty", budget=20)
def test_c5_dropout_penalty():
    def mean_duration(drop, timeout):
        # client 0 never drops; only client 1 carries the drop probability
        eng = qp_engine([const(4), const(4, drop=drop)], seed=1, drop_timeout=timeout)
        return np.mean([eng.run_sync_round().round_duration for _ in range(500)])

    for timeout in (1, 3):
        excess = mean_duration(0.5, timeout) - mean_duration(0.0, timeout)
        assert abs(excess - 0.5 * timeout) <= 0.1 * 0.5 * timeout, (timeout, excess)


# ---------------------------------------------------------------------------
# 6. Async vs sync time efficiency

@criterion(6, "async vs sync time efficiency", budget=60)
def test_c6_async_beats_sync(qp20):
    sim = {"availability": 1.0, "latency": {"kind": "lognormal", "mean": 200, "var": 50}}
    target = 40
    times = {}
    for algo in ("fedavg", "fedasync"):
        rec = run(make_runner(qp20, algo, rounds=target, lr=0.05, simulator=sim))
        assert rec.entries[-1]["round"] == target
        times[algo] = rec.entries[-1]["virtual_time"]
    assert times["fedasync"] < times["fedavg"], times


# ---------------------------------------------------------------------------
# 7. Partitioner statistics

@criterion(7, "partitioner statistics", budget=30)
def test_c7_partitioner_statistics():
    labels = np.repeat(np.arange(10), 100)
    glob = np.full(10, 0.1)

    def mean_tv(alpha, seed):
        part = partition_dirichlet(labels, 10, alpha, seed)
        return np.mean([0.5 * np.abs(np.bincount(labels[i], minlength=10) / len(i) - glob).sum()
                        for i in part.clients])

    means = [np.mean([mean_tv(a, s) for s in range(20)]) for a in (0.1, 1, 10, 10000)]
    assert all(x >= y for x, y in zip(means, means[1:])), means

    for seed in range(20):
        part = partition_diversity(labels, 10, 0.2, seed)
        assert all(len(set(labels[i])) == 2 for i in part.clients)


# ---------------------------------------------------------------------------
# 8. Determinism

@criterion(8, "determinism suite", budget=60)
def test_c8_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)
    gen = ["gen-task", "--benchmark", "blobs:n=200", "--partitioner", "dirichlet:alpha=0.3", "--num-clients", "4"]
    for name in ("a", "b"):
        assert cli(gen + ["--out", str(tmp_path / name / "task")]) == 0
    assert (tmp_path / "a" / "task" / "task.json").read_bytes() == (tmp_path / "b" / "task" / "task.json").read_bytes()
    task = str(tmp_path / "a" / "task")

    sim = tmp_path / "sim.json"
    sim.write_text(json.dumps({"availability": 0.7, "latency": {"kind": "lognormal", "mean": 20, "var": 30},
                               "drop_prob": 0.2, "completeness": {"kind": "uniform"}}))
    for algo in ("fedavg", "fedprox", "scaffold", "fednova", "fedasync"):
        args = ["run", "--task", task, "--algorithm", algo, "--rounds", "8", "--sim", str(sim), "--epochs", "2"]
        assert cli(args + ["--records", str(tmp_path / "ra")]) == 0
        assert cli(args + ["--records", str(tmp_path / "rb")]) == 0
    assert _tree(tmp_path / "ra") == _tree(tmp_path / "rb")

    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"grid": {"lr": [0.05, 0.1, 0.2, 0.4], "seed": [0, 1]}}))
    for workers in (1, 4):
        assert cli(["tune", "--task", task, "--rounds", "6", "--sim", str(sim), "--grid", str(grid),
                    "--workers", str(workers), "--records", str(tmp_path / f"tune{workers}")]) == 0
    assert _tree(tmp_path / "tune1") == _tree(tmp_path / "tune4")
    assert len(_tree(tmp_path / "tune1")) == 8


def _tree(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


# ---------------------------------------------------------------------------
# 9. Scaffold bookkeeping

@criterion(9, "scaffold bookkeeping", budget=10)
def test_c9_scaffold_bookkeeping(qp20):
    engine, _, _ = build_engine(make_runner(qp20, "scaffold", rounds=50, lr=0.05, epochs=3, proportion=1.0))
    algo = engine.algorithm
    for _ in range(50):
        out = engine.run_sync_round()
        assert len(out.responded) == engine.num_clients
        assert np.max(np.abs(algo.c - algo.c_clients.mean(axis=0))) <= 1e-10
        for k in range(engine.num_clients):
            np.testing.assert_allclose(algo.c_clients[k], engine.network.parties[k].memory["c_i"],
                                       rtol=0, atol=1e-10)


# ---------------------------------------------------------------------------
# 10. Round trips and trace schema

@criterion(10, "round-trip and schema", budget=5)
def test_c10_round_trip_and_schema(qp_task, tmp_path):
    text = (Path(qp_task) / "task.json").read_text()
    assert FederatedTask.from_json(text).to_json() == text
    assert load_task(qp_task).to_json() == text

    rec = run(make_runner(qp_task, "fedasync", rounds=4, simulator={"latency": {"kind": "uniform", "lo": 1, "hi": 4}}))
    path = rec.save(tmp_path / "r.jsonl")
    again = load_record(path)
    assert again == rec and again.to_jsonl() == path.read_text()
    assert Record.from_jsonl(rec.to_jsonl()).to_jsonl() == rec.to_jsonl()

    bad = sorted(FIXTURES.glob("bad_*.json"))
    assert len(bad) == 5
    for f in bad:
        with pytest.raises(TraceError) as info:
            load_trace(f)
        assert info.value.line is not None and str(info.value).startswith(f"line {info.value.line}:")

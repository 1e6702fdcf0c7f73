import numpy as np
import pytest

from fedsim.algorithms import ALGORITHMS, AlgoConfig
from fedsim.benchmark import gen_qp, gen_task
from fedsim.core import Model
from fedsim.engine import Engine
from fedsim.runner import EngineConfig, Runner
from fedsim.simulator import ClientProfile, Simulator


def make_runner(task, algorithm="fedavg", seed=0, simulator=None, engine=None, **algo):
    algo = {"lr": 0.1, "rounds": 5, "epochs": 1, "batch_size": 1, **algo}
    return Runner.from_dict({"algorithm": algorithm, "task": str(task), "seed": seed, "algo": algo,
                             "engine": engine or {}, "simulator": simulator})


def qp_engine(profiles, algorithm="fedavg", seed=0, d=3, **engine_kw):
    """An engine over a distributed QP with one component per client."""
    n = len(profiles)
    ds = gen_qp(n, d, conditioning=4, seed=seed).to_dataset()
    clients = [ds.batch([k]) for k in range(n)]
    algo = ALGORITHMS[algorithm](AlgoConfig(algorithm, lr=0.1, batch_size=1), n, d)
    return Engine(algo, Model("quadratic", d), clients, Simulator(profiles, seed),
                  EngineConfig(**engine_kw), seed, audit=True)


def const(value, drop=0.0, p=1.0):
    return ClientProfile(p_avail=p, latency={"kind": "constant", "value": value}, drop_prob=drop)


@pytest.fixture(scope="session")
def qp_task(tmp_path_factory):
    out = tmp_path_factory.mktemp("tasks") / "qp8"
    gen_task({"name": "qp", "N": 8, "d": 5, "conditioning": 5}, {"kind": "iid", "num_clients": 8}, out)
    return out


@pytest.fixture(scope="session")
def blobs_task(tmp_path_factory):
    out = tmp_path_factory.mktemp("tasks") / "blobs"
    gen_task({"name": "blobs", "n": 300}, {"kind": "dirichlet", "alpha": 0.5, "num_clients": 5}, out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    entry = _ACCEPTANCE.setdefault(mark.kwargs["number"], {"title": mark.kwargs["title"], "ok": True, "n": 0})
    if call.when == "call":
        entry["n"] += 1
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e["ok"] and e["n"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['title']}")

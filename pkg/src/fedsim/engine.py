"""Round loops over a global virtual clock, plus the key-value messaging layer.

Synchronous rounds wait for the slowest responder; asynchronous runs step the
clock one unit at a time, mixing each arriving update into the global model
as soon as it lands.  Both report metrics against the same clock, so their
curves share a time axis.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import __version__
from . import rng as rngmod
from .algorithms import ALGORITHMS, ClientUpdate, local_seed, planned_steps
from .benchmark import Dataset, client_batches, load_task_data
from .core import Batch, Model, init_model, loss, predict
from .errors import ConfigError, DispatchError
from .records import Record, log_metric
from .runner import EngineConfig, Runner
from .simulator import ClientState, Simulator, StateMachine, build_simulator

log = logging.getLogger(__name__)
S = ClientState


# ---------------------------------------------------------------------------
# Messaging


@dataclass
class Message:
    mtype: str
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mtype:
            raise ValueError("message type must be non-empty")

    def __getitem__(self, key: str) -> Any:
        return self.payload[key]


class Party:
    """A server or client endpoint holding handlers keyed by message type."""

    def __init__(self, party_id):
        self.id = party_id
        self.actions: dict[str, Callable[[Message], dict[str, Any] | Message]] = {}

    def register_action(self, mtype: str, handler) -> None:
        self.actions[mtype] = handler

    def handle(self, message: Message) -> Message:
        handler = self.actions.get(message.mtype)
        if handler is None:
            raise DispatchError(f"party {self.id!r} has no action registered for {message.mtype!r}")
        out = handler(message)
        if isinstance(out, Message):
            return out
        return Message(f"{message.mtype}:reply", dict(out or {}))


def register_action(party: Party, mtype: str, handler) -> None:
    party.register_action(mtype, handler)


class Network:
    """In-process request/response transport between parties."""

    def __init__(self):
        self.parties: dict[Any, Party] = {}

    def add(self, party: Party) -> Party:
        self.parties[party.id] = party
        return party

    def communicate(self, sender: Party, receiver_id, message: Message) -> Message:
        receiver = self.parties.get(receiver_id)
        if receiver is None:
            raise DispatchError(f"no party with id {receiver_id!r}")
        return receiver.handle(message)


def make_client_party(k: int, data: Batch, algorithm, template: Model) -> Party:
    party = Party(k)
    memory: dict[str, Any] = {}

    def train(msg: Message) -> dict[str, Any]:
        update = algorithm.local(msg["model"], template, data, msg["steps"], msg["seed"], k,
                                 msg["round"], msg.payload, memory)
        return {"update": update}

    party.register_action("train", train)
    party.memory = memory
    return party


# ---------------------------------------------------------------------------
# Engine


class VirtualClock:
    def __init__(self, start: int = 0):
        self.now = int(start)

    def advance(self, units: int = 1) -> int:
        if units < 0:
            raise ValueError("the virtual clock cannot run backwards")
        self.now += int(units)
        return self.now

    def advance_to(self, t: int) -> int:
        return self.advance(int(t) - self.now)


@dataclass
class RoundOutcome:
    round: int
    selected: list[int]
    responded: list[int]
    dropped: list[int]
    round_duration: int
    virtual_time_end: int


@dataclass
class Job:
    client_id: int
    finish_at: int
    base: np.ndarray | None = None
    update: ClientUpdate | None = None  # None for a dropped dispatch


class Engine:
    """Drives one runner's global model over the virtual clock."""

    def __init__(self, algorithm, model: Model, clients: list[Batch], simulator: Simulator,
                 cfg: EngineConfig = EngineConfig(), seed: int = 0, audit: bool = False):
        if simulator.num_clients != len(clients):
            raise ConfigError(f"simulator has {simulator.num_clients} clients, task has {len(clients)}")
        self.algorithm = algorithm
        self.model = model
        self.theta = model.params.copy()
        self.clients = clients
        self.sim = simulator
        self.cfg = cfg
        self.seed = seed
        self.mode = cfg.mode or algorithm.mode
        self.clock = VirtualClock()
        self.states = StateMachine(len(clients), audit=audit)
        self.round = 0
        self.network = Network()
        self.server = self.network.add(Party("server"))
        for k, data in enumerate(clients):
            self.network.add(make_client_party(k, data, algorithm, model))
        self.jobs: dict[int, Job] = {}
        self.dispatches = [0] * len(clients)
        self.stalled = False

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def _train(self, k: int, steps: int, counter: int) -> ClientUpdate:
        msg = Message("train", {
            "model": self.theta, "steps": steps, "seed": local_seed(self.seed, k, counter),
            "round": self.round, **self.algorithm.server_payload(k),
        })
        return self.network.communicate(self.server, k, msg)["update"]

    def _steps(self, k: int, counter: int) -> int:
        cfg = self.algorithm.cfg
        planned = planned_steps(len(self.clients[k]), cfg.epochs, cfg.batch_size)
        return self.sim.completeness(k, planned, counter)

    def _time_left(self) -> bool:
        return self.cfg.max_time is None or self.clock.now < self.cfg.max_time

    # -- synchronous -------------------------------------------------------

    def _select(self, idle: list[int]) -> list[int]:
        if self.cfg.sample == "full":
            return idle
        m = math.ceil(self.algorithm.cfg.proportion * self.num_clients)
        if len(idle) <= m:
            return idle
        pick = rngmod.stream(self.seed, rngmod.SELECT, self.round).choice(len(idle), m, replace=False)
        return sorted(idle[i] for i in pick)

    def run_sync_round(self) -> RoundOutcome | None:
        """One round; returns None if the time horizon passes while waiting for clients."""
        waited = 0
        while True:
            self.sim.tick_availability(self.states, self.clock.now)
            idle = self.states.with_state(S.IDLE)
            if idle:
                break
            if not self._time_left() or waited >= self.cfg.max_wait:
                self.stalled = waited >= self.cfg.max_wait
                return None
            self.clock.advance(1)
            waited += 1

        r = self.round
        start = self.clock.now
        selected = self._select(idle)
        responded, dropped, finish, updates = [], [], {}, []
        for k in selected:
            self.states.set(k, S.SELECTED, start)
            if self.sim.drops(k, r):
                self.states.set(k, S.DROPPED, start)
                dropped.append(k)
                continue
            latency = self.sim.latency(k, r)
            self.states.set(k, S.WORKING, start, finish_at=start + latency)
            finish[k] = start + latency
            updates.append(self._train(k, self._steps(k, r), r))
            responded.append(k)

        duration = max(finish.values(), default=start) - start
        if dropped:
            duration += self.cfg.drop_timeout
        end = start + duration
        for k in responded:
            self.sim.release(self.states, k, finish[k])
        for k in dropped:
            self.sim.release(self.states, k, end)
        self.clock.advance_to(end)

        if updates:
            self.theta = self.algorithm.aggregate(self.theta, updates)
        else:
            log.warning("round %d: every selected client dropped; no aggregation", r + 1)
        self.round += 1
        return RoundOutcome(self.round, selected, responded, dropped, duration, end)

    # -- asynchronous -----------------------------------------------------

    def run_async_step(self) -> list[tuple]:
        """Advance one time unit: deliver finished work, dispatch to idle clients, tick."""
        now = self.clock.now
        events: list[tuple] = []
        arrivals = []
        for k in sorted(self.jobs):
            job = self.jobs[k]
            if job.finish_at != now:
                continue
            del self.jobs[k]
            self.sim.release(self.states, k, now)
            if job.update is not None:
                arrivals.append((job.update, job.base))
        if arrivals:
            staleness = [self.round - u.round_sent for u, _ in arrivals]
            self.theta = self.algorithm.mix(self.theta, arrivals, self.round)
            self.round += 1
            events.append(("aggregate", now, [u.client_id for u, _ in arrivals], staleness))

        self.sim.tick_availability(self.states, now)
        cap = self.cfg.max_concurrency
        for k in self.states.with_state(S.IDLE):
            if cap is not None and len(self.jobs) >= cap:
                break
            counter = self.dispatches[k]
            self.dispatches[k] += 1
            self.states.set(k, S.SELECTED, now)
            latency = self.sim.latency(k, counter)
            if self.sim.drops(k, counter):
                self.states.set(k, S.DROPPED, now)
                self.jobs[k] = Job(k, now + latency)
                events.append(("drop", now, k))
                continue
            self.states.set(k, S.WORKING, now, finish_at=now + latency)
            update = self._train(k, self._steps(k, counter), counter)
            self.jobs[k] = Job(k, now + latency, self.theta.copy(), update)
            events.append(("dispatch", now, k, now + latency))
        self.clock.advance(1)
        return events


# ---------------------------------------------------------------------------
# Evaluation and the full run


def default_model_kind(dataset: Dataset) -> str:
    return {"quadratic": "quadratic", "classification": "logreg", "regression": "linreg"}[dataset.task_kind]


class Evaluator:
    """Centralised evaluation on the benchmark's held-out splits.

    QP tasks have no held-out samples; their validation and test losses are
    the mean per-component objective, and ``dist_to_opt`` / ``rel_dist`` measure the
    distance to the closed-form optimum.
    """

    def __init__(self, dataset: Dataset, clients: list[Batch], model: Model):
        self.dataset = dataset
        self.model = model
        self.train = Batch(np.vstack([b.features for b in clients]), np.concatenate([b.targets for b in clients]))
        self.qp = dataset.meta.get("qp") if dataset.task_kind == "quadratic" else None
        if self.qp is not None:
            self.x_star = self.qp.optimum()
            self.init_dist = float(np.linalg.norm(model.params - self.x_star))

    def _split(self, idx) -> Batch | None:
        return self.dataset.batch(idx) if len(idx) else None

    def __call__(self, theta: np.ndarray) -> dict[str, float]:
        m = self.model.with_params(theta)
        with np.errstate(all="ignore"):
            out = {"train_loss": loss(m, self.train)}
            if self.qp is not None:
                objective = self.qp.objective(theta) / self.qp.num_clients
                dist = float(np.linalg.norm(theta - self.x_star))
                out.update(val_loss=objective, test_loss=objective, dist_to_opt=dist,
                           rel_dist=dist / self.init_dist if self.init_dist > 0 else dist)
                return out
            for prefix, idx in (("val", self.dataset.val_idx), ("test", self.dataset.test_idx)):
                b = self._split(idx)
                if b is None:
                    continue
                out[f"{prefix}_loss"] = loss(m, b)
                if self.dataset.task_kind == "classification":
                    pred = np.argmax(predict(m, b.features), axis=1)
                    out[f"{prefix}_accuracy"] = float(np.mean(pred == b.targets))
        return out


def started_at() -> str | None:
    """Reproducible-build timestamp: only set when SOURCE_DATE_EPOCH is defined."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return None if epoch is None else str(int(epoch))


def build_engine(runner: Runner, audit: bool = False):
    task, dataset = load_task_data(runner.task)
    clients = client_batches(task, dataset)
    kind = runner.model.kind or default_model_kind(dataset)
    if (kind == "quadratic") != (dataset.task_kind == "quadratic"):
        raise ConfigError(f"model kind {kind!r} does not fit a {dataset.task_kind} benchmark")
    if kind == "linreg" and dataset.task_kind != "regression":
        raise ConfigError("linreg needs a regression benchmark")
    model = init_model(kind, dataset.input_dim, dataset.num_classes,
                       runner.model.hidden_dim if kind == "mlp1" else 0, runner.model.init_seed)
    sim = build_simulator(runner.simulator, task.num_clients, runner.seed)
    algorithm = ALGORITHMS[runner.algorithm](runner.algo, task.num_clients, model.dim)
    engine = Engine(algorithm, model, clients, sim, runner.engine, runner.seed, audit=audit)
    return engine, Evaluator(dataset, clients, model), task


def _log_all(record: Record, round_idx: int, t: int, metrics: dict[str, float]) -> None:
    for name in sorted(metrics):
        log_metric(record, round_idx, t, name, metrics[name])


def run(runner: Runner, engine_hook=None) -> Record:
    """Execute ``runner`` to its horizon and return the record."""
    engine, evaluate, task = build_engine(runner)
    if engine_hook is not None:
        engine_hook(engine)
    record = Record({
        "config": runner.to_dict(),
        "started_at": started_at(),
        "version": __version__,
        "task_sha256": task.benchmark["sha256"],
    })
    rounds = runner.algo.rounds
    interval = runner.engine.eval_interval
    _log_all(record, 0, 0, evaluate(engine.theta))

    def diverged() -> bool:
        return record.status == "diverged" or not np.all(np.isfinite(engine.theta))

    last_logged = 0
    idle_ticks = 0
    while engine.round < rounds and engine._time_left():
        if engine.mode == "sync":
            if engine.run_sync_round() is None:
                break
        else:
            before = engine.round
            engine.run_async_step()
            if engine.round == before:
                idle_ticks = idle_ticks + 1 if not engine.jobs else 0
                if idle_ticks >= runner.engine.max_wait:
                    engine.stalled = True
                    break
                continue
            idle_ticks = 0
        t = engine.clock.now if engine.mode == "sync" else engine.clock.now - 1
        if engine.round % interval == 0 or engine.round == rounds or diverged():
            _log_all(record, engine.round, t, evaluate(engine.theta))
            last_logged = engine.round
        if diverged():
            record.status = "diverged"
            record.error = f"non-finite model or loss at round {engine.round}"
            return record
    if engine.round != last_logged:
        t = engine.clock.now if engine.mode == "sync" else engine.clock.now - 1
        _log_all(record, engine.round, t, evaluate(engine.theta))
    if record.status == "diverged":
        record.error = record.error or "non-finite metric"
        return record
    record.status = "completed"
    if engine.stalled:
        record.error = "stopped: no client became available within max_wait"
    return record

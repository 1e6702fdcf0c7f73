"""Client procedures and server aggregation rules.

Implemented strategies: FedAvg, FedProx, Scaffold, FedNova (synchronous) and
FedAsync (asynchronous, polynomial staleness discount).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Any

import numpy as np

from . import rng as rngmod
from .core import Batch, Model, sgd_steps
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlgoConfig:
    name: str = "fedavg"
    lr: float = 0.1
    rounds: int = 10
    proportion: float = 1.0
    epochs: int = 1
    batch_size: int = 50
    mu: float = 0.0
    server_lr: float = 1.0
    alpha: float = 0.6
    staleness_exponent: float = 0.5

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.name!r}; available: {sorted(ALGORITHMS)}")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0.0 < self.proportion <= 1.0:
            raise ConfigError(f"proportion must lie in (0, 1], got {self.proportion}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.mu < 0 or self.server_lr <= 0:
            raise ConfigError("mu must be >= 0 and server_lr > 0")
        if not 0.0 <= self.alpha <= 1.0 or self.staleness_exponent < 0:
            raise ConfigError("alpha must lie in [0, 1] and staleness_exponent >= 0")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AlgoConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown algorithm keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    num_steps: int
    num_samples: int
    round_sent: int
    aux: np.ndarray | None = None


def planned_steps(num_samples: int, epochs: int, batch_size: int) -> int:
    return epochs * math.ceil(num_samples / batch_size)


def local_seed(seed: int, client_id: int, counter: int) -> tuple[int, ...]:
    """Entropy for a client's minibatch order at a given round/dispatch."""
    return (seed & 0xFFFFFFFFFFFFFFFF, rngmod.tag_id(rngmod.SHUFFLE), client_id, counter)


# ---------------------------------------------------------------------------
# Client side


def local_train_fedavg(global_params: np.ndarray, model: Model, data: Batch, cfg: AlgoConfig,
                       completed_steps: int, seed, client_id: int = 0,
                       round_sent: int = 0) -> ClientUpdate:
    if completed_steps < 1:
        raise ValueError("completed_steps must be >= 1")
    start = model.with_params(global_params)
    end = sgd_steps(start, data, cfg.lr, completed_steps, cfg.batch_size, seed)
    return ClientUpdate(client_id, end.params - global_params, completed_steps, len(data), round_sent)


def local_train_fedprox(global_params: np.ndarray, model: Model, data: Batch, cfg: AlgoConfig,
                        completed_steps: int, seed, client_id: int = 0,
                        round_sent: int = 0) -> ClientUpdate:
    """FedAvg local SGD with ``(mu/2)||w - w_global||^2`` added to the objective."""
    if completed_steps < 1:
        raise ValueError("completed_steps must be >= 1")
    start = model.with_params(global_params)
    end = sgd_steps(start, data, cfg.lr, completed_steps, cfg.batch_size, seed,
                    prox=(cfg.mu, global_params))
    return ClientUpdate(client_id, end.params - global_params, completed_steps, len(data), round_sent)


def local_train_scaffold(global_params: np.ndarray, model: Model, data: Batch, cfg: AlgoConfig,
                         completed_steps: int, seed, c_server: np.ndarray, c_client: np.ndarray,
                         client_id: int = 0, round_sent: int = 0) -> tuple[ClientUpdate, np.ndarray]:
    """Corrected local steps ``y <- y - lr (g(y) - c_i + c)``.

    Returns the update (``aux`` holds ``c_i+ - c_i``) and the new ``c_i+``.
    """
    start = model.with_params(global_params)
    end = sgd_steps(start, data, cfg.lr, completed_steps, cfg.batch_size, seed,
                    correction=c_server - c_client)
    delta = end.params - global_params
    if cfg.lr > 0:
        c_new = c_client - c_server - delta / (completed_steps * cfg.lr)
    else:
        c_new = c_client.copy()
    return (ClientUpdate(client_id, delta, completed_steps, len(data), round_sent, aux=c_new - c_client),
            c_new)


# ---------------------------------------------------------------------------
# Server side


def _weights(updates: list[ClientUpdate]) -> np.ndarray:
    n = np.array([u.num_samples for u in updates], dtype=np.float64)
    return n / n.sum()


def aggregate_weighted(theta: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
    """theta + sum_k (n_k / sum n) delta_k over the received updates."""
    if not updates:
        log.warning("no updates received; global model unchanged")
        return theta
    p = _weights(updates)
    step = np.zeros_like(theta)
    for pk, u in zip(p, updates):
        step += pk * u.delta
    return theta + step


def fednova_aggregate(theta: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
    """theta + tau_eff * sum_k p_k delta_k / tau_k with tau_eff = sum_k p_k tau_k."""
    if not updates:
        log.warning("no updates received; global model unchanged")
        return theta
    p = _weights(updates)
    tau = np.array([u.num_steps for u in updates], dtype=np.float64)
    tau_eff = float(p @ tau)
    step = np.zeros_like(theta)
    for pk, tk, u in zip(p, tau, updates):
        step += pk * (u.delta / tk)
    return theta + tau_eff * step


def staleness_weight(alpha: float, staleness: int, exponent: float) -> float:
    return alpha * (1.0 + staleness) ** (-exponent)


def fedasync_apply(theta: np.ndarray, update: ClientUpdate, base: np.ndarray, current_round: int,
                   alpha: float = 0.6, exponent: float = 0.5) -> np.ndarray:
    """Mix one arriving model into the global one.

    ``base`` is the global model the client started from, so the client model
    is ``base + delta``; staleness counts server aggregations since dispatch.
    """
    staleness = current_round - update.round_sent
    if staleness < 0:
        raise ValueError(f"negative staleness {staleness}")
    a_t = staleness_weight(alpha, staleness, exponent)
    return (1.0 - a_t) * theta + a_t * (base + update.delta)


# ---------------------------------------------------------------------------
# Strategy objects used by the engine


class FedAvg:
    name = "fedavg"
    mode = "sync"

    def __init__(self, cfg: AlgoConfig, num_clients: int, dim: int):
        self.cfg = cfg
        self.num_clients = num_clients
        self.dim = dim

    def server_payload(self, client_id: int) -> dict[str, Any]:
        return {}

    def local(self, theta, model, data, steps, seed, client_id, round_sent, payload, memory):
        return local_train_fedavg(theta, model, data, self.cfg, steps, seed, client_id, round_sent)

    def aggregate(self, theta: np.ndarray, updates: list[ClientUpdate]) -> np.ndarray:
        return aggregate_weighted(theta, updates)


class FedProx(FedAvg):
    name = "fedprox"

    def local(self, theta, model, data, steps, seed, client_id, round_sent, payload, memory):
        return local_train_fedprox(theta, model, data, self.cfg, steps, seed, client_id, round_sent)


class FedNova(FedAvg):
    name = "fednova"

    def aggregate(self, theta, updates):
        return fednova_aggregate(theta, updates)


class Scaffold(FedAvg):
    """Server keeps ``c`` and a mirror of every client's ``c_i``."""

    name = "scaffold"

    def __init__(self, cfg: AlgoConfig, num_clients: int, dim: int):
        super().__init__(cfg, num_clients, dim)
        self.c = np.zeros(dim)
        self.c_clients = np.zeros((num_clients, dim))

    def server_payload(self, client_id):
        return {"c": self.c}

    def local(self, theta, model, data, steps, seed, client_id, round_sent, payload, memory):
        c_i = memory.get("c_i")
        if c_i is None:
            c_i = np.zeros_like(theta)
        update, c_new = local_train_scaffold(theta, model, data, self.cfg, steps, seed,
                                             payload["c"], c_i, client_id, round_sent)
        memory["c_i"] = c_new
        return update

    def aggregate(self, theta, updates):
        if not updates:
            log.warning("no updates received; global model unchanged")
            return theta
        mean_dx = np.mean([u.delta for u in updates], axis=0)
        mean_dc = np.mean([u.aux for u in updates], axis=0)
        for u in updates:
            self.c_clients[u.client_id] += u.aux
        self.c = self.c + (len(updates) / self.num_clients) * mean_dc
        return theta + self.cfg.server_lr * mean_dx


class FedAsync(FedAvg):
    name = "fedasync"
    mode = "async"

    def mix(self, theta: np.ndarray, arrivals: list[tuple[ClientUpdate, np.ndarray]],
            current_round: int) -> np.ndarray:
        """Apply the updates that arrived in one tick; simultaneous arrivals are averaged."""
        mixed = [fedasync_apply(theta, u, base, current_round, self.cfg.alpha, self.cfg.staleness_exponent)
                 for u, base in arrivals]
        if len(mixed) == 1:
            return mixed[0]
        return np.mean(mixed, axis=0)


ALGORITHMS = {cls.name: cls for cls in (FedAvg, FedProx, Scaffold, FedNova, FedAsync)}


def scaffold_round(algo: Scaffold, theta: np.ndarray, model: Model, clients: list[Batch],
                   sampled: list[int], memories: list[dict], round_idx: int, seed: int,
                   steps: list[int] | None = None) -> np.ndarray:
    """One synchronous Scaffold round over ``sampled`` clients (full completeness by default)."""
    updates = []
    for k in sorted(sampled):
        planned = planned_steps(len(clients[k]), algo.cfg.epochs, algo.cfg.batch_size)
        updates.append(algo.local(theta, model, clients[k], steps[k] if steps else planned,
                                  local_seed(seed, k, round_idx), k, round_idx,
                                  algo.server_payload(k), memories[k]))
    return algo.aggregate(theta, updates)

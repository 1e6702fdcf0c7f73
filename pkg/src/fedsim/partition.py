"""Partitioners that map a training set onto per-client index lists."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, PartitionError

KINDS = ("iid", "diversity", "dirichlet", "gaussian_perturb", "id")
RESERVED = ("vertical", "louvain")


@dataclass(frozen=True)
class PartitionerConfig:
    kind: str = "iid"
    num_clients: int | None = None
    div: float = 1.0
    alpha: float = 1.0
    sigma_feature: float = 0.0
    imbalance_sigma: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.kind in RESERVED:
            raise ConfigError(f"partitioner {self.kind!r} is not supported by this build")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown partitioner {self.kind!r}; expected one of {KINDS}")
        if self.num_clients is not None and self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 0.0 < self.div <= 1.0:
            raise ConfigError(f"div must lie in (0, 1], got {self.div}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.sigma_feature < 0 or self.imbalance_sigma < 0:
            raise ConfigError("sigma values must be >= 0")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PartitionerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown partitioner keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        """Only the keys that matter for ``kind`` (keeps task.json readable)."""
        keep = {"kind", "num_clients", "seed"}
        keep |= {
            "iid": {"imbalance_sigma"},
            "diversity": {"div"},
            "dirichlet": {"alpha"},
            "gaussian_perturb": {"sigma_feature"},
            "id": set(),
        }[self.kind]
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name in keep}


@dataclass
class Partition:
    clients: list[list[int]]
    feature_noise: list[list[float]] | None = field(default=None)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]


def _finish(groups: list[np.ndarray]) -> list[list[int]]:
    return [sorted(int(i) for i in g) for g in groups]


def _repair_empty(groups: list[list[int]]) -> list[list[int]]:
    """Give each empty client one sample taken from the currently largest client."""
    total = sum(len(g) for g in groups)
    if total < len(groups):
        raise PartitionError(f"{total} samples cannot fill {len(groups)} clients")
    for k, g in enumerate(groups):
        if g:
            continue
        donor = max(range(len(groups)), key=lambda j: (len(groups[j]), -j))
        g.append(groups[donor].pop())
    return groups


def _indices(indices, n) -> np.ndarray:
    if indices is None:
        return np.arange(n)
    return np.asarray(indices, dtype=np.int64)


def partition_iid(indices, num_clients: int, imbalance_sigma: float = 0.0,
                  seed: int = 0) -> Partition:
    """Shuffle and split; client sizes follow lognormal(0, imbalance_sigma) weights."""
    idx = np.asarray(indices, dtype=np.int64)
    n = idx.shape[0]
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if n < num_clients:
        raise PartitionError(f"{n} samples cannot fill {num_clients} clients")
    gen = rngmod.stream(seed, "partition_iid")
    perm = gen.permutation(idx)
    if imbalance_sigma > 0:
        w = gen.lognormal(0.0, imbalance_sigma, size=num_clients)
    else:
        w = np.ones(num_clients)
    sizes = np.floor(w / w.sum() * n).astype(np.int64)
    for k in range(int(n - sizes.sum())):
        sizes[k % num_clients] += 1
    # every client needs >= 1 sample
    for k in range(num_clients):
        if sizes[k] == 0:
            donor = int(np.argmax(sizes))
            sizes[donor] -= 1
            sizes[k] += 1
    return Partition(_finish(np.split(perm, np.cumsum(sizes)[:-1])))


def partition_dirichlet(labels, num_clients: int, alpha: float, seed: int = 0,
                        indices=None) -> Partition:
    """Per-class client proportions drawn from Dir(alpha); samples split by rounded cumulative shares."""
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    labels = np.asarray(labels)
    idx = _indices(indices, labels.shape[0])
    gen = rngmod.stream(seed, "partition_dirichlet")
    groups: list[list[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        members = gen.permutation(idx[labels == c])
        p = gen.dirichlet(np.full(num_clients, float(alpha)))
        cuts = np.round(np.cumsum(p)[:-1] * members.shape[0]).astype(np.int64)
        for k, part in enumerate(np.split(members, cuts)):
            groups[k].extend(int(i) for i in part)
    return Partition(_finish(_repair_empty(groups)))


def diversity_classes(num_classes: int, div: float) -> int:
    """Number of classes each client holds: max(1, round-half-up(div * num_classes))."""
    return min(num_classes, max(1, math.floor(div * num_classes + 0.5)))


def partition_diversity(labels, num_clients: int, div: float, seed: int = 0,
                        indices=None) -> Partition:
    if not 0.0 < div <= 1.0:
        raise ConfigError(f"div must lie in (0, 1], got {div}")
    labels = np.asarray(labels)
    idx = _indices(indices, labels.shape[0])
    classes = np.unique(labels)
    n_cls = classes.shape[0]
    k = diversity_classes(n_cls, div)
    gen = rngmod.stream(seed, "partition_diversity")
    order = gen.permutation(n_cls)
    holders: dict[int, list[int]] = {c: [] for c in range(n_cls)}
    for client in range(num_clients):
        for j in range(k):
            holders[int(order[(client * k + j) % n_cls])].append(client)
    groups: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(n_cls):
        owners = sorted(holders[c])
        if not owners:
            continue
        members = gen.permutation(idx[labels == classes[c]])
        for client, part in zip(owners, np.array_split(members, len(owners))):
            groups[client].extend(int(i) for i in part)
    return Partition(_finish(_repair_empty(groups)))


def partition_gaussian_perturb(indices, num_clients: int, sigma_feature: float, dim: int,
                               seed: int = 0) -> Partition:
    """IID split plus one additive feature-noise vector per client."""
    if sigma_feature < 0:
        raise ConfigError("sigma_feature must be >= 0")
    base = partition_iid(indices, num_clients, 0.0, seed)
    if sigma_feature == 0:
        return base
    noise = rngmod.stream(seed, "partition_noise").normal(0.0, sigma_feature, size=(num_clients, dim))
    return Partition(base.clients, noise.tolist())


def partition_by_id(owner_ids, indices=None) -> Partition:
    """One client per distinct owner, ordered by sorted owner id."""
    if owner_ids is None:
        raise PartitionError("benchmark does not provide owner ids; IDPartitioner is unsupported")
    owners = np.asarray(owner_ids)
    idx = _indices(indices, owners.shape[0])
    groups = [idx[owners == o] for o in np.unique(owners)]
    return Partition(_finish(groups))


def make_partition(cfg: PartitionerConfig, dataset) -> Partition:
    """Apply ``cfg`` to the training split of ``dataset``."""
    train = np.asarray(dataset.train_idx, dtype=np.int64)
    seed = 0 if cfg.seed is None else cfg.seed
    n = cfg.num_clients
    if cfg.kind == "id":
        if dataset.owner_ids is None:
            raise PartitionError(f"benchmark {dataset.name!r} has no owner ids")
        return partition_by_id(np.asarray(dataset.owner_ids)[train], train)
    if n is None:
        raise ConfigError(f"partitioner {cfg.kind!r} needs num_clients")
    if cfg.kind == "iid":
        return partition_iid(train, n, cfg.imbalance_sigma, seed)
    if cfg.kind == "gaussian_perturb":
        return partition_gaussian_perturb(train, n, cfg.sigma_feature, dataset.features.shape[1], seed)
    if dataset.task_kind != "classification":
        raise PartitionError(f"{cfg.kind} partitioning needs class labels")
    labels = dataset.targets[train].astype(np.int64)
    if cfg.kind == "dirichlet":
        return partition_dirichlet(labels, n, cfg.alpha, seed, indices=train)
    return partition_diversity(labels, n, cfg.div, seed, indices=train)

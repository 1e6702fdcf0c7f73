"""Dataset providers and static federated task generation.

A federated task is a directory holding ``task.json`` (client index lists plus
the benchmark's regeneration config and a content hash) and a short
``README.txt``.  Raw data is never copied; :func:`load_task_data` regenerates
the dataset from its config and refuses to continue if the hash drifted.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import rng as rngmod
from .core import Batch
from .errors import ConfigError, IngestionError, TaskExistsError, TaskLoadError
from .partition import Partition, PartitionerConfig, make_partition

SCHEMA_VERSION = 1
EPSILON_SPD = 1e-6
MISSING = {"", "?", "na", "nan", "null"}


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    task_kind: str  # regression | classification | quadratic
    num_classes: int = 1
    input_dim: int = 0
    owner_ids: np.ndarray | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        for name in ("train_idx", "val_idx", "test_idx"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not self.input_dim:
            self.input_dim = self.features.shape[1]
        n = self.features.shape[0]
        allidx = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if allidx.shape[0] != n or not np.array_equal(np.sort(allidx), np.arange(n)):
            raise ConfigError(f"dataset {self.name!r}: splits must be disjoint and cover all {n} rows")
        if self.task_kind == "classification":
            y = self.targets
            if np.any(y < 0) or np.any(y >= self.num_classes) or np.any(y != np.floor(y)):
                raise ConfigError(f"dataset {self.name!r}: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    def batch(self, idx) -> Batch:
        return Batch(self.features[idx], self.targets[idx])

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(self.task_kind.encode())
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.targets).tobytes())
        for part in (self.train_idx, self.val_idx, self.test_idx):
            h.update(np.ascontiguousarray(part).tobytes())
            h.update(b"|")
        if self.owner_ids is not None:
            h.update(json.dumps([str(o) for o in self.owner_ids]).encode())
        return h.hexdigest()


def split_indices(n: int, seed: int, val_frac: float = 0.1, test_frac: float = 0.1):
    """Seeded shuffle, then val/test take floor(frac * n) rows each; the rest is train."""
    perm = rngmod.stream(seed, "split").permutation(n)
    n_val = int(math.floor(val_frac * n))
    n_test = int(math.floor(test_frac * n))
    return perm[n_val + n_test:], perm[:n_val], perm[n_val:n_val + n_test]


def _split_by_owner(owners: np.ndarray, seed: int, val_frac: float, test_frac: float):
    train, val, test = [], [], []
    for o in np.unique(owners):
        members = np.flatnonzero(owners == o)
        tr, va, te = split_indices(members.shape[0], seed + int(o) + 1, val_frac, test_frac)
        train.append(members[tr]); val.append(members[va]); test.append(members[te])
    return np.concatenate(train), np.concatenate(val), np.concatenate(test)


# ---------------------------------------------------------------------------
# Synthetic(alpha, beta)


def _client_sizes(samples, num_clients: int, gen: np.random.Generator) -> list[int]:
    if isinstance(samples, (int, np.integer)):
        sizes = [int(samples)] * num_clients
    elif isinstance(samples, dict):
        mean = float(samples.get("mean", 50))
        sigma = float(samples.get("sigma", 0.5))
        raw = gen.lognormal(np.log(mean) - sigma ** 2 / 2, sigma, size=num_clients)
        sizes = [max(1, int(round(v))) for v in raw]
    else:
        sizes = [int(s) for s in samples]
        if len(sizes) != num_clients:
            raise ConfigError(f"got {len(sizes)} sample counts for {num_clients} clients")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"sample counts must be positive, got {sizes}")
    return sizes


def gen_synthetic(alpha: float, beta: float, num_clients: int, samples_per_client=50,
                  seed: int = 0, dim: int = 60, num_classes: int = 10,
                  val_frac: float = 0.1, test_frac: float = 0.1) -> Dataset:
    """Synthetic(alpha, beta) classification data, one generating model per client.

    Client k draws ``u_k ~ N(0, alpha)``, ``W_k, b_k ~ N(u_k, 1)``,
    ``B_k ~ N(0, beta)``, ``v_k ~ N(B_k, 1)`` and samples
    ``x ~ N(v_k, diag(j^-1.2))``, ``y = argmax(W_k x + b_k)``.
    """
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if alpha < 0 or beta < 0:
        raise ConfigError("alpha and beta must be >= 0")
    gen = rngmod.stream(seed, "synthetic")
    sizes = _client_sizes(samples_per_client, num_clients, gen)
    cov_diag = np.arange(1, dim + 1, dtype=np.float64) ** -1.2
    xs, ys, owners, models = [], [], [], []
    for k, n_k in enumerate(sizes):
        u = gen.normal(0.0, np.sqrt(alpha))
        big_b = gen.normal(0.0, np.sqrt(beta))
        w = gen.normal(u, 1.0, size=(num_classes, dim))
        b = gen.normal(u, 1.0, size=num_classes)
        v = gen.normal(big_b, 1.0, size=dim)
        x = gen.normal(v, np.sqrt(cov_diag), size=(n_k, dim))
        xs.append(x)
        ys.append(np.argmax(x @ w.T + b, axis=1))
        owners.append(np.full(n_k, k))
        models.append(np.concatenate([w.ravel(), b]))
    owner_ids = np.concatenate(owners)
    train, val, test = _split_by_owner(owner_ids, seed, val_frac, test_frac)
    return Dataset(
        name="synthetic", features=np.vstack(xs), targets=np.concatenate(ys),
        train_idx=train, val_idx=val, test_idx=test, task_kind="classification",
        num_classes=num_classes, owner_ids=owner_ids,
        meta={"generating_models": np.array(models)},
    )


def model_divergence(dataset: Dataset) -> float:
    """Mean squared distance of each client's generating model from their average."""
    m = dataset.meta["generating_models"]
    return float(np.mean(np.sum((m - m.mean(axis=0)) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# Distributed QP


@dataclass
class QPSpec:
    A: np.ndarray  # (N, d, d)
    b: np.ndarray  # (N, d)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.A.ndim != 3 or self.A.shape[1] != self.A.shape[2]:
            raise ConfigError(f"A must have shape (N, d, d), got {self.A.shape}")
        if self.b.shape != self.A.shape[:2]:
            raise ConfigError(f"b must have shape {self.A.shape[:2]}, got {self.b.shape}")
        for i, a in enumerate(self.A):
            if not np.array_equal(a, a.T):
                raise ConfigError(f"A[{i}] is not symmetric")
            if np.linalg.eigvalsh(a).min() < EPSILON_SPD:
                raise ConfigError(f"A[{i}] is not positive definite")

    @property
    def num_clients(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def optimum(self) -> np.ndarray:
        """Minimiser of sum_i 0.5 x'A_i x + b_i'x."""
        return -np.linalg.solve(self.A.sum(axis=0), self.b.sum(axis=0))

    def objective(self, x: np.ndarray) -> float:
        return float(sum(0.5 * x @ a @ x + bi @ x for a, bi in zip(self.A, self.b)))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.A.sum(axis=0) @ x + self.b.sum(axis=0)

    def to_dataset(self) -> Dataset:
        n, d = self.b.shape
        feats = np.hstack([self.A.reshape(n, d * d), self.b])
        return Dataset(
            name="qp", features=feats, targets=np.zeros(n), train_idx=np.arange(n),
            val_idx=np.array([], dtype=np.int64), test_idx=np.array([], dtype=np.int64),
            task_kind="quadratic", input_dim=d, owner_ids=np.arange(n),
            meta={"qp": self},
        )


def gen_qp(N: int, d: int, conditioning: float = 10.0, seed: int = 0) -> QPSpec:
    """Random SPD A_i = Q diag(lam) Q' with log-uniform eigenvalues in [1, conditioning]."""
    if N < 1 or d < 1:
        raise ConfigError("N and d must be >= 1")
    if conditioning < 1:
        raise ConfigError(f"conditioning must be >= 1, got {conditioning}")
    gen = rngmod.stream(seed, "qp")
    As, bs = [], []
    for _ in range(N):
        q, r = np.linalg.qr(gen.normal(size=(d, d)))
        q = q * np.sign(np.diag(r))
        lam = np.exp(gen.uniform(0.0, np.log(conditioning), size=d))
        if conditioning == 1:
            a = np.eye(d)
        else:
            a = (q * lam) @ q.T
            a = 0.5 * (a + a.T)
        As.append(a)
        bs.append(gen.normal(size=d))
    return QPSpec(np.array(As), np.array(bs))


# ---------------------------------------------------------------------------
# Blobs and linear regression toys


def gen_blobs(n: int = 600, dim: int = 5, num_classes: int = 3, spread: float = 1.0,
              seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters with balanced labels."""
    gen = rngmod.stream(seed, "blobs")
    centers = gen.normal(0.0, 3.0, size=(num_classes, dim))
    y = np.arange(n) % num_classes
    x = centers[y] + gen.normal(0.0, spread, size=(n, dim))
    train, val, test = split_indices(n, seed)
    return Dataset("blobs", x, y, train, val, test, "classification", num_classes=num_classes)


def gen_regression(n: int = 600, dim: int = 5, noise: float = 0.1, seed: int = 0) -> Dataset:
    gen = rngmod.stream(seed, "regression")
    w = gen.normal(size=dim)
    x = gen.normal(size=(n, dim))
    y = x @ w + 0.5 + gen.normal(0.0, noise, size=n)
    train, val, test = split_indices(n, seed)
    return Dataset("regression", x, y, train, val, test, "regression", meta={"true_w": w})


# ---------------------------------------------------------------------------
# CSV ingestion


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise IngestionError(f"non-numeric value {cell!r}", row=row, column=col) from None
    if not math.isfinite(v):
        raise IngestionError(f"non-finite value {cell!r}", row=row, column=col)
    return v


def load_csv(path, target_column: str, categorical=(), task_kind: str = "classification",
             seed: int = 0) -> Dataset:
    """Read a headed CSV file into a dataset.

    Columns listed in ``categorical`` are one-hot encoded with categories in
    lexicographic order; every other feature column must be numeric.  Rows
    with any missing cell are dropped.  Rows split 80/10/10 after a seeded
    shuffle.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise IngestionError(f"{path}: empty file")
        header = [h.strip() for h in header]
        rows = []
        for line_no, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise IngestionError(f"expected {len(header)} cells, got {len(raw)}", row=line_no)
            cells = [c.strip() for c in raw]
            if any(c.lower() in MISSING for c in cells):
                continue
            rows.append((line_no, cells))
    if target_column not in header:
        raise IngestionError(f"unknown target column {target_column!r}; columns are {header}")
    categorical = list(categorical)
    for c in categorical:
        if c not in header:
            raise IngestionError(f"unknown categorical column {c!r}")
    if not rows:
        raise IngestionError(f"{path}: no complete data rows")
    t = header.index(target_column)
    feature_cols = [i for i in range(len(header)) if i != t]

    levels = {i: sorted({cells[i] for _, cells in rows}) for i in feature_cols if header[i] in categorical}
    matrix = []
    for line_no, cells in rows:
        out = []
        for i in feature_cols:
            if i in levels:
                out.extend(1.0 if cells[i] == lv else 0.0 for lv in levels[i])
            else:
                out.append(_parse_float(cells[i], line_no, header[i]))
        matrix.append(out)

    if task_kind == "classification":
        raw_targets = [cells[t] for _, cells in rows]
        try:
            numeric = {v: float(v) for v in set(raw_targets)}
            classes = sorted(numeric, key=lambda v: numeric[v])
        except ValueError:
            classes = sorted(set(raw_targets))
        lookup = {c: i for i, c in enumerate(classes)}
        y = np.array([lookup[v] for v in raw_targets], dtype=np.float64)
        num_classes = len(classes)
    elif task_kind == "regression":
        y = np.array([_parse_float(cells[t], ln, target_column) for ln, cells in rows])
        num_classes = 1
    else:
        raise ConfigError(f"task_kind must be classification or regression, got {task_kind!r}")

    x = np.array(matrix, dtype=np.float64).reshape(len(rows), -1)
    train, val, test = split_indices(len(rows), seed)
    return Dataset(path.stem, x, y, train, val, test, task_kind, num_classes=num_classes,
                   meta={"columns": [header[i] for i in feature_cols]})


# ---------------------------------------------------------------------------
# Registry


BENCHMARKS: dict[str, Callable[..., Dataset]] = {}


def register_benchmark(name: str):
    """Decorator adding a ``(seed, **config) -> Dataset`` builder to the registry."""
    def deco(fn):
        BENCHMARKS[name] = fn
        return fn
    return deco


@register_benchmark("synthetic")
def _synthetic(seed, alpha=0.0, beta=0.0, num_clients=10, samples_per_client=50, dim=60,
               num_classes=10):
    return gen_synthetic(alpha, beta, num_clients, samples_per_client, seed, dim, num_classes)


@register_benchmark("qp")
def _qp(seed, N=8, d=10, conditioning=10.0):
    return gen_qp(N, d, conditioning, seed).to_dataset()


@register_benchmark("blobs")
def _blobs(seed, n=600, dim=5, num_classes=3, spread=1.0):
    return gen_blobs(n, dim, num_classes, spread, seed)


@register_benchmark("regression")
def _regression(seed, n=600, dim=5, noise=0.1):
    return gen_regression(n, dim, noise, seed)


@register_benchmark("csv")
def _csv(seed, path, target, categorical=(), task_kind="classification"):
    return load_csv(path, target, categorical, task_kind, seed)


def make_dataset(config: dict[str, Any]) -> Dataset:
    """Build a dataset from ``{"name": ..., "seed": ..., **params}``."""
    cfg = dict(config)
    name = cfg.pop("name", None)
    if name not in BENCHMARKS:
        raise ConfigError(f"unknown benchmark {name!r}; available: {sorted(BENCHMARKS)}")
    seed = int(cfg.pop("seed", 0))
    try:
        return BENCHMARKS[name](seed, **cfg)
    except TypeError as exc:
        raise ConfigError(f"bad config for benchmark {name!r}: {exc}") from None


def default_num_clients(dataset: Dataset) -> int | None:
    if dataset.owner_ids is None:
        return None
    return int(np.unique(dataset.owner_ids).shape[0])


# ---------------------------------------------------------------------------
# Federated tasks


@dataclass
class FederatedTask:
    task_name: str
    benchmark: dict[str, Any]  # {name, config, sha256}
    partitioner: dict[str, Any]
    partition: list[list[int]]
    num_clients: int
    seed: int
    schema_version: int = SCHEMA_VERSION
    feature_noise: list[list[float]] | None = None

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "task_name": self.task_name,
            "benchmark": self.benchmark,
            "partitioner": self.partitioner,
            "num_clients": self.num_clients,
            "seed": self.seed,
            "partition": self.partition,
        }
        if self.feature_noise is not None:
            doc["feature_noise"] = self.feature_noise
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FederatedTask":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TaskLoadError(f"task.json is not valid JSON: {exc}") from None
        required = ("schema_version", "task_name", "benchmark", "partitioner", "num_clients",
                    "seed", "partition")
        missing = [k for k in required if k not in doc]
        if missing:
            raise TaskLoadError(f"task.json missing keys {missing}")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise TaskLoadError(f"unsupported schema_version {doc['schema_version']}")
        bench = doc["benchmark"]
        if not isinstance(bench, dict) or not {"name", "config", "sha256"} <= set(bench):
            raise TaskLoadError("benchmark must hold name, config and sha256")
        task = cls(
            task_name=doc["task_name"], benchmark=bench, partitioner=doc["partitioner"],
            partition=doc["partition"], num_clients=doc["num_clients"], seed=doc["seed"],
            schema_version=doc["schema_version"], feature_noise=doc.get("feature_noise"),
        )
        task.validate()
        return task

    def validate(self, dataset: Dataset | None = None) -> None:
        part = self.partition
        if not isinstance(part, list) or len(part) != self.num_clients:
            raise TaskLoadError(f"partition must list {self.num_clients} clients")
        seen: set[int] = set()
        for k, lst in enumerate(part):
            if not isinstance(lst, list) or not lst:
                raise TaskLoadError(f"client {k} has an empty or malformed index list")
            for i in lst:
                if not isinstance(i, int) or isinstance(i, bool) or i < 0:
                    raise TaskLoadError(f"client {k}: invalid index {i!r}")
                if i in seen:
                    raise TaskLoadError(f"client {k}: index {i} assigned twice")
                seen.add(i)
        if self.feature_noise is not None and len(self.feature_noise) != self.num_clients:
            raise TaskLoadError("feature_noise must have one vector per client")
        if dataset is not None:
            train = set(int(i) for i in dataset.train_idx)
            stray = seen - train
            if stray:
                raise TaskLoadError(f"{len(stray)} indices are not training samples, e.g. {min(stray)}")
            if self.feature_noise is not None and any(len(v) != dataset.features.shape[1]
                                                      for v in self.feature_noise):
                raise TaskLoadError("feature_noise vectors do not match feature width")


def _readme(task: FederatedTask, dataset: Dataset) -> str:
    sizes = [len(c) for c in task.partition]
    lines = [
        f"Federated task {task.task_name}",
        f"benchmark: {task.benchmark['name']} ({len(dataset)} samples, kind={dataset.task_kind})",
        f"partitioner: {json.dumps(task.partitioner, sort_keys=True)}",
        f"clients: {task.num_clients}",
        f"client sizes: {sizes}",
        f"seed: {task.seed}",
    ]
    return "\n".join(lines) + "\n"


def gen_task(benchmark: dict[str, Any], partitioner: dict[str, Any], out, seed: int = 0,
             task_name: str | None = None) -> FederatedTask:
    """Generate a dataset, partition it and write the task directory ``out``."""
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise TaskExistsError(f"{out} already exists and is not an empty directory")
    bench_cfg = dict(benchmark)
    bench_cfg.setdefault("seed", seed)
    dataset = make_dataset(bench_cfg)

    part_dict = dict(partitioner)
    part_dict.setdefault("seed", seed)
    if part_dict.get("num_clients") is None and part_dict.get("kind", "iid") != "id":
        part_dict["num_clients"] = default_num_clients(dataset)
    pcfg = PartitionerConfig.from_dict(part_dict)
    part: Partition = make_partition(pcfg, dataset)

    name = bench_cfg.pop("name")
    task = FederatedTask(
        task_name=task_name or out.name,
        benchmark={"name": name, "config": bench_cfg, "sha256": dataset.sha256()},
        partitioner=pcfg.to_dict(), partition=part.clients, num_clients=part.num_clients,
        seed=seed, feature_noise=part.feature_noise,
    )
    task.validate(dataset)
    out.mkdir(parents=True, exist_ok=True)
    (out / "task.json").write_text(task.to_json(), encoding="utf-8")
    (out / "README.txt").write_text(_readme(task, dataset), encoding="utf-8")
    return load_task(out)


def load_task(path) -> FederatedTask:
    path = Path(path)
    f = path / "task.json"
    if not f.is_file():
        raise TaskLoadError(f"{f} not found")
    return FederatedTask.from_json(f.read_text(encoding="utf-8"))


def load_task_data(path) -> tuple[FederatedTask, Dataset]:
    """Load a task and regenerate its dataset, verifying the content hash."""
    task = load_task(path)
    cfg = dict(task.benchmark["config"], name=task.benchmark["name"])
    dataset = make_dataset(cfg)
    digest = dataset.sha256()
    if digest != task.benchmark["sha256"]:
        raise TaskLoadError(
            f"dataset drift: regenerated hash {digest[:12]} != recorded {task.benchmark['sha256'][:12]}"
        )
    task.validate(dataset)
    return task, dataset


def client_batches(task: FederatedTask, dataset: Dataset) -> list[Batch]:
    """Per-client training batches with any feature noise applied."""
    out = []
    for k, idx in enumerate(task.partition):
        x = dataset.features[idx]
        if task.feature_noise is not None:
            x = x + np.asarray(task.feature_noise[k])
        out.append(Batch(x, dataset.targets[idx]))
    return out


def label_histograms(task: FederatedTask, dataset: Dataset) -> list[list[int]]:
    if dataset.task_kind != "classification":
        return []
    return [np.bincount(dataset.targets[idx].astype(np.int64), minlength=dataset.num_classes).tolist()
            for idx in task.partition]


def is_task_dir(path) -> bool:
    return os.path.isfile(os.path.join(path, "task.json"))

"""Runner configuration: algorithm, initial model, hyperparameters, task and simulator."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .algorithms import ALGORITHMS, AlgoConfig
from .errors import ConfigError

SAMPLE_POLICIES = ("uniform-available", "full")


@dataclass(frozen=True)
class ModelSpec:
    kind: str | None = None  # None: chosen from the benchmark's task kind
    hidden_dim: int = 16
    init_seed: int = 0


@dataclass(frozen=True)
class EngineConfig:
    mode: str | None = None  # None: the algorithm's native mode
    drop_timeout: int = 1
    sample: str = "uniform-available"
    max_time: int | None = None
    max_concurrency: int | None = None
    eval_interval: int = 1
    max_wait: int = 100_000

    def __post_init__(self):
        if self.mode not in (None, "sync", "async"):
            raise ConfigError(f"mode must be sync or async, got {self.mode!r}")
        if self.drop_timeout < 1:
            raise ConfigError("drop_timeout must be >= 1")
        if self.sample not in SAMPLE_POLICIES:
            raise ConfigError(f"sample policy must be one of {SAMPLE_POLICIES}")
        if self.max_time is not None and self.max_time < 0:
            raise ConfigError("max_time must be >= 0")
        if self.max_concurrency is not None and self.max_concurrency < 1:
            raise ConfigError("max_concurrency must be >= 1")
        if self.eval_interval < 1 or self.max_wait < 1:
            raise ConfigError("eval_interval and max_wait must be >= 1")


def _build(cls, d: dict[str, Any], where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {where} keys {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class Runner:
    algorithm: str
    task: str
    seed: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)
    algo: AlgoConfig = None
    engine: EngineConfig = field(default_factory=EngineConfig)
    simulator: dict[str, Any] | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; available: {sorted(ALGORITHMS)}")
        if self.algo is None:
            object.__setattr__(self, "algo", AlgoConfig(name=self.algorithm))
        elif self.algo.name != self.algorithm:
            object.__setattr__(self, "algo", AlgoConfig(**{**asdict(self.algo), "name": self.algorithm}))
        native = ALGORITHMS[self.algorithm].mode
        if self.engine.mode is not None and self.engine.mode != native:
            raise ConfigError(f"{self.algorithm} runs in {native} mode, not {self.engine.mode}")

    @property
    def mode(self) -> str:
        return ALGORITHMS[self.algorithm].mode

    def to_dict(self) -> dict[str, Any]:
        algo = asdict(self.algo)
        algo.pop("name")
        return {
            "algorithm": self.algorithm,
            "task": self.task,
            "seed": self.seed,
            "model": asdict(self.model),
            "algo": algo,
            "engine": asdict(self.engine),
            "simulator": copy.deepcopy(self.simulator),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Runner":
        unknown = set(d) - {"algorithm", "task", "seed", "model", "algo", "engine", "simulator"}
        if unknown:
            raise ConfigError(f"unknown runner keys {sorted(unknown)}")
        if "algorithm" not in d or "task" not in d:
            raise ConfigError("runner needs 'algorithm' and 'task'")
        algo = dict(d.get("algo") or {})
        if "name" in algo and algo["name"] != d["algorithm"]:
            raise ConfigError("algo.name disagrees with algorithm")
        algo["name"] = d["algorithm"]
        if d["algorithm"] not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {d['algorithm']!r}; available: {sorted(ALGORITHMS)}")
        return cls(
            algorithm=d["algorithm"], task=str(d["task"]), seed=int(d.get("seed", 0)),
            model=_build(ModelSpec, d.get("model") or {}, "model"),
            algo=_build(AlgoConfig, algo, "algo"),
            engine=_build(EngineConfig, d.get("engine") or {}, "engine"),
            simulator=copy.deepcopy(d.get("simulator")),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, Any]) -> "Runner":
        d = self.to_dict()
        for key, value in overrides.items():
            set_path(d, resolve_key(key), value)
        return Runner.from_dict(d)


ALGO_KEYS = {f.name for f in fields(AlgoConfig)} - {"name"}
ENGINE_KEYS = {f.name for f in fields(EngineConfig)}


def resolve_key(key: str) -> str:
    """Map short hyperparameter names (``lr``, ``drop_timeout``) to dotted paths."""
    if "." in key or key in ("algorithm", "task", "seed", "simulator"):
        return key
    if key == "batch":
        return "algo.batch_size"
    if key in ALGO_KEYS:
        return f"algo.{key}"
    if key in ENGINE_KEYS:
        return f"engine.{key}"
    raise ConfigError(f"unknown hyperparameter {key!r}")


def set_path(d: dict[str, Any], path: str, value: Any) -> None:
    parts = path.split(".")
    cur = d
    for p in parts[:-1]:
        if cur.get(p) is None:
            cur[p] = {}
        if not isinstance(cur[p], dict):
            raise ConfigError(f"cannot set {path}: {p} is not an object")
        cur = cur[p]
    cur[parts[-1]] = value

"""System-heterogeneity simulation: client state machine plus per-client processes.

Four axes are modelled per client: availability (can the server pick it),
responsiveness (latency in virtual time units), completeness (how many of the
planned local steps it finishes) and connectivity (whether it drops after
being picked).  Two simulator kinds exist: ``synthetic`` draws availability
every tick from a per-client probability, ``trace`` reads availability
intervals and latencies from a JSON file.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, IllegalTransition, TraceError

TRACE_SCHEMA_VERSION = 1


class ClientState(enum.Enum):
    OFFLINE = "Offline"
    IDLE = "Idle"
    SELECTED = "Selected"
    WORKING = "Working"
    DROPPED = "Dropped"


S = ClientState
LEGAL = {
    (S.OFFLINE, S.IDLE), (S.IDLE, S.OFFLINE),
    (S.IDLE, S.SELECTED),
    (S.SELECTED, S.WORKING), (S.SELECTED, S.DROPPED),
    (S.WORKING, S.IDLE), (S.WORKING, S.OFFLINE),
    (S.DROPPED, S.IDLE), (S.DROPPED, S.OFFLINE),
}


class StateMachine:
    """Holds every client's state and rejects illegal transitions.

    With ``audit=True`` every transition is appended to ``log`` as
    ``(clock, client, old, new)``.
    """

    def __init__(self, num_clients: int, audit: bool = False):
        self.states = [S.OFFLINE] * num_clients
        self.finish_at: dict[int, int] = {}
        self.audit = audit
        self.log: list[tuple[int, int, ClientState, ClientState]] = []

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, k: int) -> ClientState:
        return self.states[k]

    def set(self, k: int, new: ClientState, clock: int, finish_at: int | None = None) -> None:
        old = self.states[k]
        if old == new:
            return
        if (old, new) not in LEGAL:
            raise IllegalTransition(f"client {k}: {old.value} -> {new.value} at t={clock}")
        self.states[k] = new
        if new is S.WORKING:
            if finish_at is None:
                raise IllegalTransition(f"client {k}: Working needs finish_at")
            self.finish_at[k] = finish_at
        elif old is S.WORKING:
            self.finish_at.pop(k, None)
        if self.audit:
            self.log.append((clock, k, old, new))

    def with_state(self, state: ClientState) -> list[int]:
        return [k for k, s in enumerate(self.states) if s is state]


# ---------------------------------------------------------------------------
# Distribution specs


def lognormal_params(mean: float, var: float) -> tuple[float, float]:
    """(mu, sigma) of the lognormal with the given mean and variance."""
    if mean <= 0 or var < 0:
        raise ConfigError("lognormal needs mean > 0 and var >= 0")
    sigma2 = math.log(1.0 + var / mean ** 2)
    return math.log(mean ** 2 / math.sqrt(mean ** 2 + var)), math.sqrt(sigma2)


def _check_latency(spec: dict[str, Any]) -> dict[str, Any]:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"latency spec must be an object with 'kind', got {spec!r}")
    kind = spec["kind"]
    if kind == "constant":
        if spec.get("value", 0) < 1:
            raise ConfigError("constant latency must be >= 1")
    elif kind == "uniform":
        if not 0 < spec["lo"] <= spec["hi"]:
            raise ConfigError("uniform latency needs 0 < lo <= hi")
    elif kind == "lognormal":
        if "mean" in spec:
            lognormal_params(spec["mean"], spec.get("var", 0.0))
        elif "mu" not in spec or spec.get("sigma", -1) < 0:
            raise ConfigError("lognormal latency needs (mean, var) or (mu, sigma >= 0)")
    elif kind == "sequence":
        vals = spec.get("values")
        if not vals or any((not isinstance(v, int)) or v < 1 for v in vals):
            raise ConfigError("sequence latency needs a non-empty list of integers >= 1")
    else:
        raise ConfigError(f"unknown latency kind {kind!r}")
    return spec


def _check_completeness(spec: dict[str, Any]) -> dict[str, Any]:
    if not isinstance(spec, dict) or spec.get("kind") not in ("full", "uniform", "uniform-epochs"):
        raise ConfigError(f"completeness spec must be full or uniform, got {spec!r}")
    return spec


@dataclass
class ClientProfile:
    p_avail: float | None = 1.0
    intervals: list[tuple[int, int]] | None = None
    latency: dict[str, Any] = field(default_factory=lambda: {"kind": "constant", "value": 1})
    completeness: dict[str, Any] = field(default_factory=lambda: {"kind": "full"})
    drop_prob: float = 0.0

    def __post_init__(self):
        if self.intervals is None and (self.p_avail is None or not 0.0 <= self.p_avail <= 1.0):
            raise ConfigError(f"p_avail must lie in [0, 1], got {self.p_avail}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")
        _check_latency(self.latency)
        _check_completeness(self.completeness)


def sample_latency(profile: ClientProfile, rng: np.random.Generator, index: int = 0) -> int:
    """Integer latency >= 1; real draws are rounded up."""
    spec = profile.latency
    kind = spec["kind"]
    if kind == "constant":
        value = float(spec["value"])
    elif kind == "uniform":
        value = rng.uniform(spec["lo"], spec["hi"])
    elif kind == "lognormal":
        if "mean" in spec:
            mu, sigma = lognormal_params(spec["mean"], spec.get("var", 0.0))
        else:
            mu, sigma = spec["mu"], spec["sigma"]
        value = rng.lognormal(mu, sigma)
    else:  # sequence
        vals = spec["values"]
        value = vals[index % len(vals)]
    return max(1, int(math.ceil(value)))


def sample_completeness(profile: ClientProfile, planned_steps: int, rng: np.random.Generator) -> int:
    if planned_steps < 1:
        raise ValueError("planned_steps must be >= 1")
    if profile.completeness["kind"] == "full":
        return planned_steps
    return int(rng.integers(1, planned_steps + 1))


def roll_drop(profile: ClientProfile, rng: np.random.Generator) -> bool:
    p = profile.drop_prob
    if p <= 0.0:
        return False
    if p >= 1.0:
        return True
    return bool(rng.random() < p)


# ---------------------------------------------------------------------------
# Simulator


class Simulator:
    """Per-client heterogeneity processes with counter-keyed random streams.

    Client k's draws depend only on (seed, k, tick) for availability and on
    (seed, k, counter) for per-dispatch draws, where the engine passes the
    round (sync) or the client's dispatch count (async) as the counter.
    """

    def __init__(self, profiles: list[ClientProfile], seed: int = 0, kind: str = "synthetic"):
        if not profiles:
            raise ConfigError("simulator needs at least one client profile")
        self.profiles = profiles
        self.seed = seed
        self.kind = kind
        self._avail = [rngmod.TickUniforms(seed, rngmod.AVAILABILITY, k) for k in range(len(profiles))]

    @property
    def num_clients(self) -> int:
        return len(self.profiles)

    def available(self, k: int, clock: int) -> bool:
        prof = self.profiles[k]
        if prof.intervals is not None:
            return any(a <= clock < b for a, b in prof.intervals)
        p = prof.p_avail
        if p >= 1.0:
            return True
        if p <= 0.0:
            return False
        return self._avail[k].value(clock) < p

    def tick_availability(self, states: StateMachine, clock: int) -> None:
        for k, st in enumerate(states.states):
            if st in (S.OFFLINE, S.IDLE):
                states.set(k, S.IDLE if self.available(k, clock) else S.OFFLINE, clock)

    def release(self, states: StateMachine, k: int, clock: int) -> None:
        """Move a Working or Dropped client back into the availability process."""
        states.set(k, S.IDLE if self.available(k, clock) else S.OFFLINE, clock)

    def latency(self, k: int, counter: int) -> int:
        return sample_latency(self.profiles[k], rngmod.stream(self.seed, rngmod.LATENCY, k, counter), counter)

    def completeness(self, k: int, planned: int, counter: int) -> int:
        return sample_completeness(self.profiles[k], planned,
                                   rngmod.stream(self.seed, rngmod.COMPLETENESS, k, counter))

    def drops(self, k: int, counter: int) -> bool:
        return roll_drop(self.profiles[k], rngmod.stream(self.seed, rngmod.DROP, k, counter))


SYNTHETIC_KEYS = {"kind", "availability", "latency", "completeness", "drop_prob", "clients"}
OVERRIDE_KEYS = {"p_avail", "latency", "completeness", "drop_prob"}


def _availability_probs(spec, num_clients: int, seed: int) -> list[float]:
    if spec is None:
        return [1.0] * num_clients
    if isinstance(spec, (int, float)):
        spec = {"kind": "constant", "p": spec}
    kind = spec.get("kind")
    out = []
    for k in range(num_clients):
        g = rngmod.stream(seed, rngmod.PROFILE, k)
        if kind == "constant":
            p = float(spec["p"])
        elif kind == "lognormal":
            p = g.lognormal(spec.get("mu", 0.0), spec["sigma"])
        elif kind == "uniform":
            p = g.uniform(spec["lo"], spec["hi"])
        else:
            raise ConfigError(f"unknown availability kind {kind!r}")
        out.append(float(min(1.0, max(0.0, p))))
    return out


def build_simulator(config: dict[str, Any] | None, num_clients: int, seed: int = 0) -> Simulator:
    """Build a simulator from a config dict; ``None`` means an ideal system.

    Synthetic config keys: ``availability`` (number, or ``{kind: constant|lognormal|uniform}``
    drawn per client and clipped to [0, 1]), ``latency``, ``completeness``,
    ``drop_prob`` and ``clients`` (per-client overrides keyed by id).
    Trace config: ``{"kind": "trace", "path": ...}``.
    """
    config = dict(config or {"kind": "synthetic"})
    kind = config.get("kind", "synthetic")
    if kind == "trace":
        extra = set(config) - {"kind", "path"}
        if extra:
            raise ConfigError(f"unknown trace simulator keys {sorted(extra)}")
        profiles = load_trace(config["path"])
        if len(profiles) != num_clients:
            raise ConfigError(f"trace has {len(profiles)} clients, task has {num_clients}")
        return Simulator(profiles, seed, "trace")
    if kind != "synthetic":
        raise ConfigError(f"unknown simulator kind {kind!r}")
    extra = set(config) - SYNTHETIC_KEYS
    if extra:
        raise ConfigError(f"unknown simulator keys {sorted(extra)}")
    probs = _availability_probs(config.get("availability"), num_clients, seed)
    overrides = {int(k): v for k, v in (config.get("clients") or {}).items()}
    profiles = []
    for k in range(num_clients):
        o = overrides.pop(k, {})
        bad = set(o) - OVERRIDE_KEYS
        if bad:
            raise ConfigError(f"client {k}: unknown override keys {sorted(bad)}")
        profiles.append(ClientProfile(
            p_avail=o.get("p_avail", probs[k]),
            latency=o.get("latency", config.get("latency", {"kind": "constant", "value": 1})),
            completeness=o.get("completeness", config.get("completeness", {"kind": "full"})),
            drop_prob=o.get("drop_prob", config.get("drop_prob", 0.0)),
        ))
    if overrides:
        raise ConfigError(f"overrides for unknown clients {sorted(overrides)}")
    return Simulator(profiles, seed, "synthetic")


# ---------------------------------------------------------------------------
# Trace files


def _line_of(text: str, pos: int) -> int:
    return text.count("\n", 0, pos) + 1


def _client_positions(text: str) -> list[int]:
    """Character offsets where each element of the top-level ``clients`` array starts."""
    m = re.search(r'"clients"\s*:\s*\[', text)
    if not m:
        return []
    dec = json.JSONDecoder()
    pos = m.end()
    out = []
    ws = re.compile(r"[\s,]*")
    while True:
        pos = ws.match(text, pos).end()
        if pos >= len(text) or text[pos] == "]":
            return out
        out.append(pos)
        _, pos = dec.raw_decode(text, pos)


def _parse_client(c: Any, line: int) -> tuple[int, ClientProfile]:
    if not isinstance(c, dict):
        raise TraceError("client entry must be an object", line)
    unknown = set(c) - {"id", "availability", "latency", "drop_prob", "completeness"}
    if unknown:
        raise TraceError(f"unknown client keys {sorted(unknown)}", line)
    cid = c.get("id")
    if not isinstance(cid, int) or isinstance(cid, bool) or cid < 0:
        raise TraceError(f"client id must be a non-negative integer, got {cid!r}", line)
    ivs = c.get("availability")
    if not isinstance(ivs, list):
        raise TraceError(f"client {cid}: availability must be a list of [start, end) pairs", line)
    intervals = []
    for iv in ivs:
        if (not isinstance(iv, list) or len(iv) != 2
                or not all(isinstance(v, int) and not isinstance(v, bool) for v in iv)):
            raise TraceError(f"client {cid}: interval {iv!r} is not an integer pair", line)
        start, end = iv
        if start < 0 or end <= start:
            raise TraceError(f"client {cid}: interval {iv} needs 0 <= start < end", line)
        if intervals and start < intervals[-1][1]:
            raise TraceError(f"client {cid}: interval {iv} overlaps or precedes {list(intervals[-1])}", line)
        intervals.append((start, end))
    try:
        profile = ClientProfile(
            p_avail=None, intervals=intervals,
            latency=c.get("latency", {"kind": "constant", "value": 1}),
            completeness=c.get("completeness", {"kind": "full"}),
            drop_prob=c.get("drop_prob", 0.0),
        )
    except (ConfigError, KeyError, TypeError) as exc:
        raise TraceError(f"client {cid}: {exc}", line) from None
    return cid, profile


def load_trace(path) -> list[ClientProfile]:
    """Parse a trace file into profiles ordered by client id (ids must be 0..N-1)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    if not isinstance(doc, dict):
        raise TraceError("trace must be a JSON object", 1)
    if doc.get("schema_version") != TRACE_SCHEMA_VERSION:
        m = re.search(r'"schema_version"', text)
        raise TraceError(f"schema_version must be {TRACE_SCHEMA_VERSION}",
                         _line_of(text, m.start()) if m else 1)
    clients = doc.get("clients")
    if not isinstance(clients, list):
        raise TraceError("'clients' must be a list", 1)
    if not clients:
        m = re.search(r'"clients"', text)
        raise TraceError("trace has no clients", _line_of(text, m.start()) if m else 1)
    positions = _client_positions(text)
    lines = [_line_of(text, p) for p in positions] if len(positions) == len(clients) else [None] * len(clients)
    parsed: dict[int, ClientProfile] = {}
    for c, line in zip(clients, lines):
        cid, prof = _parse_client(c, line)
        if cid in parsed:
            raise TraceError(f"duplicate client id {cid}", line)
        parsed[cid] = prof
    if sorted(parsed) != list(range(len(parsed))):
        raise TraceError(f"client ids must be 0..{len(parsed) - 1}, got {sorted(parsed)}", lines[0])
    return [parsed[k] for k in range(len(parsed))]

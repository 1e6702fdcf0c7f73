"""Run records: a header line followed by metric entries, stored as JSON Lines.

File layout::

    {"type": "header", "config": {...}, "started_at": ..., "version": ..., "task_sha256": ...}
    {"type": "entry", "round": 0, "virtual_time": 0, "metrics": {...}}
    ...
    {"type": "status", "status": "completed", "error": null}

NaN and infinite metric values are stored as ``null``; logging one marks the
record ``diverged``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import RecordError

STATUSES = ("running", "completed", "diverged", "aborted")


@dataclass
class Record:
    header: dict[str, Any]
    entries: list[dict[str, Any]] = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    @property
    def config(self) -> dict[str, Any]:
        return self.header.get("config", {})

    def final(self) -> dict[str, Any]:
        return self.entries[-1]["metrics"] if self.entries else {}

    def series(self, name: str) -> list[tuple[int, int, float | None]]:
        return [(e["round"], e["virtual_time"], e["metrics"][name])
                for e in self.entries if name in e["metrics"]]

    def metric_names(self) -> list[str]:
        names: set[str] = set()
        for e in self.entries:
            names.update(e["metrics"])
        return sorted(names)

    def to_jsonl(self) -> str:
        lines = [{"type": "header", **self.header}]
        lines += [{"type": "entry", **e} for e in self.entries]
        lines.append({"type": "status", "status": self.status, "error": self.error})
        return "".join(json.dumps(x, sort_keys=True, allow_nan=False) + "\n" for x in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "Record":
        header = None
        entries: list[dict[str, Any]] = []
        status, error = "running", None
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"line {n}: {exc.msg}") from None
            kind = obj.pop("type", None)
            if kind == "header":
                header = obj
            elif kind == "entry":
                entries.append(obj)
            elif kind == "status":
                status, error = obj["status"], obj.get("error")
            else:
                raise RecordError(f"line {n}: unknown line type {kind!r}")
        if header is None:
            raise RecordError("record has no header line")
        if status not in STATUSES:
            raise RecordError(f"unknown status {status!r}")
        return cls(header, entries, status, error)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path


def load_record(path) -> Record:
    return Record.from_jsonl(Path(path).read_text(encoding="utf-8"))


def log_metric(record: Record, round: int, virtual_time: int, name: str, value) -> None:
    """Append ``name=value`` at (round, virtual_time), merging into the last entry when both match.

    Entries must advance in round and strictly in virtual time.
    """
    if record.status not in ("running", "diverged"):
        raise RecordError(f"record is closed ({record.status})")
    if value is not None:
        value = float(value)
        if not math.isfinite(value):
            value = None
    if value is None:
        record.status = "diverged"
    if record.entries:
        last = record.entries[-1]
        if last["round"] == round and last["virtual_time"] == virtual_time:
            last["metrics"][name] = value
            return
        if round < last["round"]:
            raise RecordError(f"round {round} logged after round {last['round']}")
        if virtual_time <= last["virtual_time"]:
            raise RecordError(
                f"virtual time {virtual_time} does not advance past {last['virtual_time']}"
            )
    record.entries.append({"round": int(round), "virtual_time": int(virtual_time),
                           "metrics": {name: value}})

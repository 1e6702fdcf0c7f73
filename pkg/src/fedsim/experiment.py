"""Batch execution of runners, record analysis and grid tuning."""

from __future__ import annotations

import csv
import glob
import itertools
import logging
import math
import traceback
from collections import defaultdict
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from . import __version__
from .engine import run
from .errors import RecordError, TuningError
from .records import Record, load_record
from .runner import Runner

log = logging.getLogger(__name__)

MAX_RETRIES = 3
RETRYABLE = (MemoryError, BrokenProcessPool)


def aborted_record(runner: Runner, exc: BaseException) -> Record:
    rec = Record({"config": runner.to_dict(), "started_at": None, "version": __version__,
                  "task_sha256": None})
    rec.status = "aborted"
    rec.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return rec


def record_path(records_dir, runner: Runner) -> Path:
    return Path(records_dir) / f"{runner.hash()}.jsonl"


def run_parallel(runners: Sequence[Runner], num_workers: int = 1,
                 fn: Callable[[Runner], Record] = run,
                 max_retries: int = MAX_RETRIES) -> list[Record]:
    """Run every runner and return records in input order.

    A runner failing with a retryable fault (memory exhaustion, a crashed
    worker) goes back on the queue, at most ``max_retries`` times.  Any other
    failure yields an ``aborted`` record and the batch carries on.
    """
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    results: list[Record | None] = [None] * len(runners)
    attempts = [0] * len(runners)

    def failed(i: int, exc: BaseException) -> bool:
        """Record the failure; True when the runner should be retried."""
        if isinstance(exc, RETRYABLE) and attempts[i] <= max_retries:
            log.warning("runner %d hit %s; re-queued (attempt %d)", i, type(exc).__name__, attempts[i])
            return True
        results[i] = aborted_record(runners[i], exc)
        return False

    if num_workers == 1 or len(runners) <= 1:
        queue = list(range(len(runners)))
        while queue:
            i = queue.pop(0)
            attempts[i] += 1
            try:
                results[i] = fn(runners[i])
            except Exception as exc:  # noqa: BLE001 - every failure becomes a record
                if failed(i, exc):
                    queue.append(i)
        return results

    queue = list(range(len(runners)))
    pool = ProcessPoolExecutor(max_workers=num_workers)
    try:
        pending = {}
        while queue or pending:
            while queue and len(pending) < num_workers:
                i = queue.pop(0)
                attempts[i] += 1
                try:
                    pending[pool.submit(fn, runners[i])] = i
                except BrokenProcessPool:
                    pool.shutdown(cancel_futures=True)
                    pool = ProcessPoolExecutor(max_workers=num_workers)
                    pending[pool.submit(fn, runners[i])] = i
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            broken = False
            for fut in done:
                i = pending.pop(fut)
                try:
                    results[i] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    broken |= isinstance(exc, BrokenProcessPool)
                    if failed(i, exc):
                        queue.append(i)
            if broken:
                queue.extend(pending.values())
                pending.clear()
                pool.shutdown(cancel_futures=True)
                pool = ProcessPoolExecutor(max_workers=num_workers)
    finally:
        pool.shutdown()
    return results


def save_records(records: Iterable[Record], runners: Iterable[Runner], records_dir) -> list[Path]:
    return [rec.save(record_path(records_dir, r)) for rec, r in zip(records, runners)]


# ---------------------------------------------------------------------------
# Analysis


def flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_value(record: Record, key: str):
    flat = flatten(record.config)
    if key in flat:
        return flat[key]
    matches = [k for k in flat if k.endswith("." + key)]
    if len(matches) == 1:
        return flat[matches[0]]
    if not matches:
        raise RecordError(f"config key {key!r} not found in record")
    raise RecordError(f"config key {key!r} is ambiguous: {matches}")


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    n = len(values)
    mu = math.fsum(values) / n
    return mu, math.sqrt(math.fsum((v - mu) ** 2 for v in values) / n)


def group_records(records: Sequence[Record], group_by: Sequence[str]) -> dict[tuple, list[Record]]:
    groups: dict[tuple, list[Record]] = {}
    for rec in records:
        key = tuple(str(config_value(rec, k)) for k in group_by)
        groups.setdefault(key, []).append(rec)
    return groups


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def summary_rows(groups: dict[tuple, list[Record]], group_by: Sequence[str]) -> tuple[list[str], list[list[str]]]:
    metrics = sorted({m for recs in groups.values() for r in recs for m in r.final()})
    header = list(group_by) + ["n"]
    for m in metrics:
        header += [f"{m}_mean", f"{m}_std"]
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        row = list(key) + [str(len(recs))]
        for m in metrics:
            vals = [r.final().get(m) for r in recs]
            vals = [v for v in vals if v is not None]
            if vals:
                mu, sd = mean_std(vals)
                row += [_fmt(mu), _fmt(sd)]
            else:
                row += ["", ""]
        rows.append(row)
    return header, rows


def curve_by_round(recs: list[Record]) -> tuple[list[str], list[list[str]]]:
    """Mean/std of every metric at each logged round; missing values leave gaps."""
    metrics = sorted({m for r in recs for m in r.metric_names()})
    per_round: dict[int, list[dict]] = defaultdict(list)
    for r in recs:
        for e in r.entries:
            per_round[e["round"]].append(e)
    header = ["round", "n", "virtual_time_mean", "virtual_time_std"]
    for m in metrics:
        header += [f"{m}_mean", f"{m}_std"]
    rows = []
    for rnd in sorted(per_round):
        es = per_round[rnd]
        vt = mean_std([float(e["virtual_time"]) for e in es])
        row = [str(rnd), str(len(es)), _fmt(vt[0]), _fmt(vt[1])]
        for m in metrics:
            vals = [e["metrics"][m] for e in es if e["metrics"].get(m) is not None]
            row += [_fmt(x) for x in mean_std(vals)] if vals else ["", ""]
        rows.append(row)
    return header, rows


def curve_by_time(recs: list[Record]) -> tuple[list[str], list[list[str]]]:
    """Mean/std on the union of logged times, carrying each record's last value forward."""
    metrics = sorted({m for r in recs for m in r.metric_names()})
    times = sorted({e["virtual_time"] for r in recs for e in r.entries})
    header = ["virtual_time", "n"]
    for m in metrics:
        header += [f"{m}_mean", f"{m}_std"]
    rows = []
    for t in times:
        row = [str(t), ""]
        count = 0
        for m in metrics:
            vals = []
            for r in recs:
                last = None
                for e in r.entries:
                    if e["virtual_time"] > t:
                        break
                    if e["metrics"].get(m) is not None:
                        last = e["metrics"][m]
                if last is not None:
                    vals.append(last)
            count = max(count, len(vals))
            row += [_fmt(x) for x in mean_std(vals)] if vals else ["", ""]
        row[1] = str(count)
        rows.append(row)
    return header, rows


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _slug(key: tuple) -> str:
    if not key:
        return "all"
    return "_".join("".join(c if c.isalnum() or c in "-." else "-" for c in k) for k in key)


def _plot(path: Path, header: list[str], rows: list[list[str]], x_col: str, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "fedsim"
    xi = header.index(x_col)
    fig, ax = plt.subplots(figsize=(6, 4))
    for j, name in enumerate(header):
        if not name.endswith("_mean") or name.startswith("virtual_time"):
            continue
        pts = [(float(r[xi]), float(r[j])) for r in rows if r[j] != ""]
        if pts:
            ax.plot(*zip(*pts), label=name[:-5])
    ax.set_xlabel(x_col)
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def load_records(paths: Iterable) -> list[Record]:
    out = []
    for p in paths:
        out.append(load_record(p))
    return out


def expand_paths(patterns: Iterable[str]) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        hits = sorted(glob.glob(pat))
        out.extend(hits if hits else ([pat] if Path(pat).is_file() else []))
    return out


def analyze(record_paths: Sequence, group_by: Sequence[str] = (), out_dir=".",
            plot: bool = False) -> dict[str, Any]:
    """Summarise records per group into ``summary.csv`` and per-group curve files.

    The summary has one row per group with the final-entry mean and
    population std of every metric.  ``curves_<group>.csv`` is indexed by
    round, ``curves_<group>_time.csv`` by virtual time.
    """
    if not record_paths:
        raise RecordError("no records to analyze")
    records = load_records(record_paths)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = group_records(records, group_by)
    header, rows = summary_rows(groups, group_by)
    _write_csv(out / "summary.csv", header, rows)
    written = [out / "summary.csv"]
    for key, recs in sorted(groups.items()):
        slug = _slug(key)
        h, r = curve_by_round(recs)
        _write_csv(out / f"curves_{slug}.csv", h, r)
        ht, rt = curve_by_time(recs)
        _write_csv(out / f"curves_{slug}_time.csv", ht, rt)
        written += [out / f"curves_{slug}.csv", out / f"curves_{slug}_time.csv"]
        if plot:
            _plot(out / f"curves_{slug}.svg", h, r, "round", slug)
            _plot(out / f"curves_{slug}_time.svg", ht, rt, "virtual_time", slug)
            written += [out / f"curves_{slug}.svg", out / f"curves_{slug}_time.svg"]
    return {"header": header, "rows": rows, "files": written, "groups": groups}


# ---------------------------------------------------------------------------
# Tuning


@dataclass
class Grid:
    params: dict[str, list]
    metric: str = "val_loss"
    mode: str = "min"

    def __post_init__(self):
        if not self.params:
            raise TuningError("grid has no hyperparameters")
        for k, v in self.params.items():
            if not isinstance(v, list) or not v:
                raise TuningError(f"grid entry {k!r} must be a non-empty list")
        if self.mode not in ("min", "max"):
            raise TuningError("mode must be 'min' or 'max'")

    def points(self) -> list[dict[str, Any]]:
        keys = list(self.params)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.params[k] for k in keys))]


def score(record: Record, metric: str, mode: str, best_over_rounds: bool = False) -> float | None:
    if record.status != "completed":
        return None
    if best_over_rounds:
        vals = [v for _, _, v in record.series(metric) if v is not None]
        if not vals:
            return None
        return max(vals) if mode == "max" else min(vals)
    return record.final().get(metric)


@dataclass
class TuneResult:
    best: dict[str, Any]
    best_runner: Runner
    best_score: float
    runners: list[Runner]
    records: list[Record]
    scores: list[float | None]


def tune(base: Runner, grid: Grid, num_workers: int = 1, best_over_rounds: bool = False,
         fn: Callable[[Runner], Record] = run) -> TuneResult:
    """Run every grid point and pick the best final validation metric (first wins ties)."""
    points = grid.points()
    runners = [base.with_overrides(p) for p in points]
    records = run_parallel(runners, num_workers, fn=fn)
    scores = [score(r, grid.metric, grid.mode, best_over_rounds) for r in records]
    best_i = None
    for i, s in enumerate(scores):
        if s is None or not math.isfinite(s):
            continue
        if best_i is None or (s > scores[best_i] if grid.mode == "max" else s < scores[best_i]):
            best_i = i
    if best_i is None:
        statuses = [f"{p}: {r.status}" for p, r in zip(points, records)]
        raise TuningError("no runner produced a usable score; " + "; ".join(statuses))
    return TuneResult(points[best_i], runners[best_i], scores[best_i], runners, records, scores)

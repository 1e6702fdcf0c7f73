"""Command-line entry points: gen-task, run, tune, analyze.

Exit codes: 0 ok, 2 config error, 3 output exists, 4 run diverged, 5 empty input.
Configuration precedence is defaults < ``--config`` file < flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any

from .algorithms import ALGORITHMS
from .benchmark import BENCHMARKS, gen_task, label_histograms, load_task_data
from .errors import ConfigError, FedSimError, RecordError, TaskExistsError, TaskLoadError, TuningError
from .runner import Runner, resolve_key, set_path

EXIT_OK, EXIT_CONFIG, EXIT_EXISTS, EXIT_DIVERGED, EXIT_EMPTY = 0, 2, 3, 4, 5


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_spec(text: str) -> dict[str, Any]:
    """``name:k=v,k=v`` -> ``{"name": name, k: v, ...}``; values parsed as JSON when possible."""
    name, _, rest = text.partition(":")
    out: dict[str, Any] = {"name": name.strip()}
    if rest.strip():
        for item in rest.split(","):
            key, eq, value = item.partition("=")
            if not eq or not key.strip():
                raise ConfigError(f"bad item {item!r} in {text!r}; expected key=value")
            out[key.strip()] = parse_value(value.strip())
    return out


def parse_sets(items: list[str] | None) -> dict[str, Any]:
    out = {}
    for item in items or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value)
    return out


def read_json(path) -> dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return doc


def records_dir(flag: str | None) -> Path:
    return Path(flag or os.environ.get("FEDSIM_RECORDS_DIR") or "records")


# ---------------------------------------------------------------------------
# gen-task


def cmd_gen_task(args) -> int:
    cfg = read_json(args.config) if args.config else {}
    unknown = set(cfg) - {"benchmark", "partitioner", "out", "seed", "task_name"}
    if unknown:
        raise ConfigError(f"unknown gen-task config keys {sorted(unknown)}")
    bench = dict(cfg.get("benchmark") or {})
    part = dict(cfg.get("partitioner") or {"kind": "iid"})
    if args.benchmark:
        bench = parse_spec(args.benchmark)
    if args.partitioner:
        spec = parse_spec(args.partitioner)
        spec["kind"] = spec.pop("name")
        part = spec
    if args.num_clients is not None:
        part["num_clients"] = args.num_clients
    for key, value in parse_sets(args.set).items():
        head, _, rest = key.partition(".")
        if head not in ("benchmark", "partitioner") or not rest:
            raise ConfigError(f"--set key must start with benchmark. or partitioner., got {key!r}")
        set_path(bench if head == "benchmark" else part, rest, value)
    out = args.out or cfg.get("out")
    if not bench.get("name"):
        raise ConfigError("--benchmark is required")
    if not out:
        raise ConfigError("--out is required")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    task = gen_task(bench, part, out, seed, task_name=cfg.get("task_name"))
    _, dataset = load_task_data(out)
    print(f"task {task.task_name}: {task.num_clients} clients, benchmark {task.benchmark['name']}")
    print(f"sizes: {[len(c) for c in task.partition]}")
    hists = label_histograms(task, dataset)
    if hists:
        print("label histograms:")
        for k, h in enumerate(hists):
            print(f"  client {k}: {h}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run / tune


FLAG_KEYS = {
    "rounds": "algo.rounds", "lr": "algo.lr", "proportion": "algo.proportion",
    "epochs": "algo.epochs", "batch": "algo.batch_size", "mu": "algo.mu",
    "seed": "seed", "model": "model.kind", "max_time": "engine.max_time",
    "eval_interval": "engine.eval_interval", "drop_timeout": "engine.drop_timeout",
}


def sim_config(value: str | None):
    if value is None or value == "ideal":
        return None
    doc = read_json(value)
    if "clients" in doc and isinstance(doc["clients"], list):
        return {"kind": "trace", "path": str(Path(value).resolve())}
    return doc


def build_runner(args) -> Runner:
    d: dict[str, Any] = read_json(args.config) if args.config else {}
    if args.task:
        d["task"] = args.task
    if args.algorithm:
        d["algorithm"] = args.algorithm
    if args.sim is not None:
        d["simulator"] = sim_config(args.sim)
    for flag, path in FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            set_path(d, path, value)
    for key, value in parse_sets(args.set).items():
        set_path(d, resolve_key(key), value)
    d.setdefault("algorithm", "fedavg")
    if "task" not in d:
        raise ConfigError("--task is required")
    return Runner.from_dict(d)


def _print_final(record) -> None:
    final = record.final()
    for name in sorted(final):
        print(f"{name}: {final[name]}")


def cmd_run(args) -> int:
    from .engine import run
    from .experiment import record_path

    runner = build_runner(args)
    record = run(runner)
    path = record.save(record_path(records_dir(args.records), runner))
    print(f"record: {path}")
    print(f"status: {record.status}")
    _print_final(record)
    return EXIT_DIVERGED if record.status == "diverged" else EXIT_OK


def cmd_tune(args) -> int:
    from .experiment import Grid, save_records, tune

    runner = build_runner(args)
    doc = read_json(args.grid)
    if "grid" in doc:
        params = doc["grid"]
    else:
        params = {k: v for k, v in doc.items() if k not in ("metric", "mode", "best_over_rounds")}
    for key in params:
        resolve_key(key)
    grid = Grid(params, doc.get("metric", "val_loss"), doc.get("mode", "min"))
    result = tune(runner, grid, args.workers, bool(doc.get("best_over_rounds", False)))
    paths = save_records(result.records, result.runners, records_dir(args.records))
    for point, rec, s, p in zip(grid.points(), result.records, result.scores, paths):
        print(f"{json.dumps(point, sort_keys=True)} status={rec.status} {grid.metric}={s} -> {p}")
    print(f"best: {json.dumps(result.best, sort_keys=True)} {grid.metric}={result.best_score}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .experiment import analyze, expand_paths

    paths = expand_paths(args.records)
    if not paths:
        print("no record files matched", file=sys.stderr)
        return EXIT_EMPTY
    result = analyze(paths, args.group_by or [], args.out, plot=args.plot)
    print(",".join(result["header"]))
    for row in result["rows"]:
        print(",".join(row))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_runner_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", help="task directory")
    p.add_argument("--algorithm", choices=sorted(ALGORITHMS), help="federated algorithm")
    p.add_argument("--sim", help="simulator config or trace file (JSON); 'ideal' for none")
    p.add_argument("--rounds", type=int, help="number of aggregations")
    p.add_argument("--lr", type=float, help="client learning rate")
    p.add_argument("--proportion", type=float, help="fraction of clients sampled per round")
    p.add_argument("--epochs", type=int, help="local epochs")
    p.add_argument("--batch", type=int, help="local batch size")
    p.add_argument("--mu", type=float, help="FedProx proximal coefficient")
    p.add_argument("--model", choices=["linreg", "logreg", "mlp1", "quadratic"], help="model kind")
    p.add_argument("--max-time", dest="max_time", type=int, help="virtual time horizon")
    p.add_argument("--eval-interval", dest="eval_interval", type=int, help="rounds between evaluations")
    p.add_argument("--drop-timeout", dest="drop_timeout", type=int, help="extra wait when clients drop")
    p.add_argument("--seed", type=int, help="runner seed")
    p.add_argument("--records", help="records directory (default $FEDSIM_RECORDS_DIR or ./records)")
    p.add_argument("--config", help="runner config file (JSON)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated learning simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-task", help="generate a federated task directory")
    g.add_argument("--benchmark", help=f"name[:k=v,...]; one of {', '.join(sorted(BENCHMARKS))}")
    g.add_argument("--partitioner", help="kind[:k=v,...], e.g. dirichlet:alpha=0.3")
    g.add_argument("--num-clients", dest="num_clients", type=int, help="number of clients")
    g.add_argument("--out", help="output directory (must be absent or empty)")
    g.add_argument("--seed", type=int, help="generation seed")
    g.add_argument("--config", help="gen-task config file (JSON)")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    g.set_defaults(func=cmd_gen_task)

    r = sub.add_parser("run", help="run one experiment and write its record")
    _add_runner_flags(r)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("tune", help="grid-search hyperparameters")
    _add_runner_flags(t)
    t.add_argument("--grid", required=True, help="grid file (JSON)")
    t.add_argument("--workers", type=int, default=1, help="parallel runners")
    t.set_defaults(func=cmd_tune)

    a = sub.add_parser("analyze", help="summarise record files")
    a.add_argument("--records", nargs="+", required=True, help="record files or glob patterns")
    a.add_argument("--group-by", dest="group_by", nargs="*", help="config keys to group by")
    a.add_argument("--out", default=".", help="output directory")
    a.add_argument("--plot", action="store_true", help="also write SVG curves")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TaskExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except RecordError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY if "no records" in str(exc) else EXIT_CONFIG
    except (ConfigError, TaskLoadError, TuningError, FedSimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""``ocmerge`` command line: streams, fine-tuning, merging, full runs, reports.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure. Failures print one JSON line to stderr:
``{"error": <kind>, "code": <exit code>, "message": <text>}``.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .checkpoint import check_compatible, load, save, write_file
from .config import RunConfig, default_config_text, keys_help, load_config, with_overrides
from .errors import ConfigError, IOFailure, OCMergeError
from .harness import TaskCache, _fine_tune, base_params, run_stream
from .merge import (ProjectionReport, finalize, init_state, merge_step, state_from_checkpoint,
                    state_to_checkpoint)
from .metrics import MODES
from .stream import ALTERNATING_ORDERS, gen_stream, load_stream, permute_tasks, save_stream

REPORT_FIELDS = ("bacc", "masked_bacc", "mean_acc", "fgt", "bwt")
TIMING_FIELDS = ("finetune_s_per_task", "merge_s_per_task", "train_total_s", "inference_s", "slides_per_s")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", 2, f"{self.prog}: {message}")
        sys.exit(2)


def _emit_error(kind: str, code: int, message: str) -> None:
    line = json.dumps({"error": kind, "code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)


def _dump_json(obj, path) -> None:
    write_file(path, (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8"))


def _makedirs(path) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {path}: {exc.strerror}") from exc


def _stream_for(cfg: RunConfig, seed: int, fold: int):
    if cfg.stream_dir is not None:
        return load_stream(cfg.stream_dir)
    return gen_stream(replace(cfg.stream, seed=seed, fold=fold))


def _task_index(stream, task: str) -> int:
    names = [td.name for td in stream.tasks]
    if task in names:
        return names.index(task)
    try:
        t = int(task)
    except ValueError:
        raise ConfigError(f"unknown task {task!r}; stream has {', '.join(names)}") from None
    if not 0 <= t < len(names):
        raise ConfigError(f"task index {t} out of range for {len(names)} tasks")
    return t


# ---------------------------------------------------------------- commands

def cmd_gen_stream(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    stream = gen_stream(replace(cfg.stream, seed=seed, fold=args.fold))
    save_stream(stream, args.out)
    print(f"wrote {len(stream)} tasks to {args.out}")
    return 0


def cmd_base(args) -> int:
    cfg = load_config(args.config)
    stream = load_stream(args.stream)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    save(base_params(stream, cfg.harness, seed), args.out)
    print(f"wrote base weights to {args.out}")
    return 0


def cmd_train_task(args) -> int:
    cfg = load_config(args.config)
    stream = load_stream(args.stream)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    t = _task_index(stream, args.task)
    base = load(args.base) if args.base else base_params(stream, cfg.harness, seed)
    theta, history = _fine_tune(stream, t, base, cfg.harness, seed)
    save(theta.with_meta(task_id=str(t)), args.out)
    losses = " ".join(f"{x:.4f}" for x in history)
    print(f"task {stream.tasks[t].name}: epoch losses {losses}")
    return 0


def cmd_merge(args) -> int:
    if args.state:
        state = state_from_checkpoint(load(args.state))
        if args.per_param and not state.per_param_mode:
            raise ConfigError("--per-param given but the saved state uses one global lambda")
    else:
        state = init_state(load(args.init), per_param=args.per_param)
    theta = load(args.new)
    check_compatible(theta, state.base)
    report = ProjectionReport(0, 1.0) if args.report else None
    state = merge_step(state, theta, report)
    save(state_to_checkpoint(state), args.out)
    if report is not None:
        lines = "".join(json.dumps(row, sort_keys=True) + "\n" for row in report.rows())
        if args.report == "-":
            sys.stdout.write(lines)
        else:
            write_file(args.report, lines.encode("utf-8"))
    if args.finalize:
        save(finalize(state), args.finalize)
    print(f"merged task {state.t}, lambda {state.lam:.6g}", file=sys.stderr if args.report == "-" else sys.stdout)
    return 0


def _run_unit(cfg: RunConfig, seed: int, fold: int, out_dir: str) -> list[dict]:
    """All methods (and orders) for one (seed, fold); fine-tunes shared via the cache."""
    # errstate is per thread, so worker threads need their own
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        return _run_unit_inner(cfg, seed, fold, out_dir)


def _run_unit_inner(cfg: RunConfig, seed: int, fold: int, out_dir: str) -> list[dict]:
    stream = _stream_for(cfg, seed, fold)
    orders = [None] if cfg.orders == "identity" else list(range(len(ALTERNATING_ORDERS)))
    cache = TaskCache()
    rows = []
    for o in orders:
        s = stream if o is None else permute_tasks(stream, ALTERNATING_ORDERS[o])
        for method in cfg.methods:
            run_id = f"{method}/seed{seed}_fold{fold}" + ("" if o is None else f"_order{o}")
            ckpt_dir = os.path.join(out_dir, "checkpoints", run_id) if cfg.checkpoints else None
            res = run_stream(s, method, cfg.harness, seed=seed, cache=cache, ckpt_dir=ckpt_dir)
            for name, value in res.report.to_dict().items():
                if not math.isfinite(value):
                    raise OCMergeError(f"{run_id}: non-finite {name}")
            rows.append({
                "run": run_id, "method": method, "seed": seed, "fold": fold, "order": o,
                "tasks": res.task_names,
                "metrics": res.report.to_dict(),
                "accuracy": {mode: m.rows() for mode, m in res.matrices.items()},
                "checkpoints": [os.path.relpath(p, out_dir) for p in res.checkpoints],
                "timings": res.timings,
            })
    return rows


def _means(rows, key: str, names) -> dict:
    out = {}
    for method in dict.fromkeys(r["method"] for r in rows):
        sel = [r[key] for r in rows if r["method"] == method]
        out[method] = {n: float(np.mean([x[n] for x in sel])) for n in names}
    return out


def cmd_run_stream(args) -> int:
    cfg = with_overrides(load_config(args.config), seed=args.seed,
                         methods=args.methods.split(",") if args.methods else None)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    _makedirs(args.out)
    folds = [0] if cfg.stream_dir is not None else cfg.folds
    units = [(seed, fold) for seed in cfg.seeds for fold in folds]
    if args.jobs == 1:
        results = [_run_unit(cfg, s, f, args.out) for s, f in units]
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(lambda u: _run_unit(cfg, u[0], u[1], args.out), units))
    rows = [r for unit in results for r in unit]

    metrics = {
        "runs": [{k: r[k] for k in ("run", "method", "seed", "fold", "order", "tasks", "metrics", "checkpoints")}
                 for r in rows],
        "mean": _means(rows, "metrics", REPORT_FIELDS),
    }
    _dump_json(metrics, os.path.join(args.out, "metrics.json"))
    timings = {"runs": [{"run": r["run"], **r["timings"]} for r in rows], "mean": _means(rows, "timings", TIMING_FIELDS)}
    _dump_json(timings, os.path.join(args.out, "timings.json"))
    for mode in MODES:
        lines = ["run,method,seed,fold,order,k,t,task,value"]
        for r in rows:
            order = "" if r["order"] is None else str(r["order"])
            for k, row in enumerate(r["accuracy"][mode]):
                for t, v in enumerate(row):
                    lines.append(f"{r['run']},{r['method']},{r['seed']},{r['fold']},{order},{k},{t},{r['tasks'][t]},{v!r}")
        write_file(os.path.join(args.out, f"acc_matrix_{mode}.csv"), ("\n".join(lines) + "\n").encode("utf-8"))
    print(_table(metrics["mean"], timings["mean"], {m: sum(r["method"] == m for r in rows) for m in metrics["mean"]}))
    return 0


def _table(metric_means: dict, timing_means: dict, counts: dict) -> str:
    head = ["method", "runs", "bACC", "masked", "meanACC", "FGT", "BWT", "ft_s/task", "merge_s/task", "slides/s"]
    body = []
    for method, m in metric_means.items():
        t = timing_means.get(method, {})
        body.append([method, str(counts.get(method, "")),
                     *(f"{m[n]:.4f}" for n in REPORT_FIELDS),
                     *(f"{t[n]:.4g}" if n in t else "-" for n in ("finetune_s_per_task", "merge_s_per_task",
                                                                  "slides_per_s"))])
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body])


def _report_state(path) -> int:
    state = state_from_checkpoint(load(path))
    merged = finalize(state)
    drift = math.sqrt(sum(float(np.sum((merged[k] - state.base[k]) ** 2)) for k in state.base))
    rows = [("tasks merged", str(state.t)), ("lambda", f"{state.lam:.12g}"),
            ("mode", "per-parameter" if state.per_param_mode else "global"),
            ("sum of task-vector norms", f"{state.norm_sum:.12g}"),
            ("mean task-vector norm", f"{state.norm_sum / state.t:.12g}"),
            ("distance of merge from base", f"{drift:.12g}")]
    if state.floored:
        rows.append(("warning", "lambda was floored at some step"))
    w = max(len(k) for k, _ in rows)
    print("\n".join(f"{k.ljust(w)}  {v}" for k, v in rows))
    return 0


def cmd_report(args) -> int:
    if os.path.isfile(args.path):
        return _report_state(args.path)
    mpath = os.path.join(args.path, "metrics.json")
    tpath = os.path.join(args.path, "timings.json")
    try:
        with open(mpath, encoding="utf-8") as fh:
            metrics = json.load(fh)
        timings = {}
        if os.path.exists(tpath):
            with open(tpath, encoding="utf-8") as fh:
                timings = json.load(fh)
    except OSError as exc:
        raise IOFailure(f"cannot read {mpath}: {exc.strerror}") from exc
    except ValueError as exc:
        raise IOFailure(f"{mpath}: not valid JSON ({exc})") from exc
    counts = {}
    for r in metrics.get("runs", []):
        counts[r["method"]] = counts.get(r["method"], 0) + 1
    # keep the run order rather than the sorted order of the JSON keys
    order = list(counts) + [m for m in metrics["mean"] if m not in counts]
    metrics["mean"] = {m: metrics["mean"][m] for m in order}
    if args.json:
        print(json.dumps({"mean": metrics["mean"], "timings": timings.get("mean", {})}, indent=2, sort_keys=True))
    else:
        print(_table(metrics["mean"], timings.get("mean", {}), counts))
    return 0


def cmd_default_config(args) -> int:
    sys.stdout.write(default_config_text())
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ocmerge", description="Orthogonal continual model merging on synthetic slide streams.",
                epilog="Configuration keys:\n" + keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser, metavar="COMMAND")

    def config_arg(q):
        q.add_argument("--config", metavar="INI", help="run configuration file (default: the bundled defaults)")

    def seed_arg(q):
        q.add_argument("--seed", type=int, help="seed for all randomness (default: first of [run] seeds)")

    q = sub.add_parser("gen-stream", help="generate a synthetic stream directory")
    config_arg(q)
    seed_arg(q)
    q.add_argument("--fold", type=int, default=0, help="fold id, selects an independent bag draw (default 0)")
    q.add_argument("--out", required=True, metavar="DIR", help="output stream directory")
    q.set_defaults(func=cmd_gen_stream)

    q = sub.add_parser("base", help="write the base weights for a stream")
    config_arg(q)
    seed_arg(q)
    q.add_argument("--stream", required=True, metavar="DIR", help="stream directory")
    q.add_argument("--out", required=True, metavar="CKPT", help="output checkpoint")
    q.set_defaults(func=cmd_base)

    q = sub.add_parser("train-task", help="fine-tune the aggregator on one task of a stream")
    config_arg(q)
    seed_arg(q)
    q.add_argument("--stream", required=True, metavar="DIR", help="stream directory")
    q.add_argument("--task", required=True, help="task name or 0-based index")
    q.add_argument("--base", metavar="CKPT", help="starting weights (default: build the base for --seed)")
    q.add_argument("--out", required=True, metavar="CKPT", help="output checkpoint")
    q.set_defaults(func=cmd_train_task)

    q = sub.add_parser("merge", help="fold one fine-tuned checkpoint into a merge state")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--state", metavar="STATE", help="existing merge state to extend")
    src.add_argument("--init", metavar="BASE", help="start a new merge from these base weights")
    q.add_argument("--new", required=True, metavar="CKPT", help="fine-tuned checkpoint to merge")
    q.add_argument("--out", required=True, metavar="STATE", help="output merge state")
    q.add_argument("--per-param", action="store_true", help="one lambda per parameter matrix (new states only)")
    q.add_argument("--report", metavar="PATH", help="write per-parameter projection stats as JSON lines ('-' = stdout)")
    q.add_argument("--finalize", metavar="CKPT", help="also write the merged weights")
    q.set_defaults(func=cmd_merge)

    q = sub.add_parser("run-stream", help="run methods end to end and write metrics")
    config_arg(q)
    seed_arg(q)
    q.add_argument("--methods", metavar="LIST", help="comma-separated methods (overrides [run] methods)")
    q.add_argument("--out", required=True, metavar="DIR", help="output run directory")
    q.add_argument("--jobs", type=int, default=1, help="worker threads over (seed, fold) units (default 1)")
    q.set_defaults(func=cmd_run_stream)

    q = sub.add_parser("report", help="summarise a run directory or a merge state")
    q.add_argument("path", metavar="PATH", help="run directory or merge-state checkpoint")
    q.add_argument("--json", action="store_true", help="print the summary as JSON instead of a table")
    q.set_defaults(func=cmd_report)

    q = sub.add_parser("default-config", help="print the bundled configuration")
    q.set_defaults(func=cmd_default_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return args.func(args)
    except OCMergeError as exc:
        _emit_error(type(exc).__name__, exc.exit_code, str(exc))
        return exc.exit_code
    except (FloatingPointError, OverflowError) as exc:
        _emit_error("NumericalError", 4, f"floating-point failure: {exc}")
        return 4
    except OSError as exc:
        _emit_error("IOFailure", 3, f"{exc.filename or ''}: {exc.strerror or exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())

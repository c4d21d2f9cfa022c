"""Command-line entry point.

    coopcache validate --config demo.ini
    coopcache solve    --config demo.ini --seed 3 --trace
    coopcache sweep    --config demo.ini --threads 4
    coopcache demo     --seed 1 --out-dir results

Outputs are CSV files in ``--out-dir`` plus one JSON summary line on
standard output. Failures print one JSON error line on standard error and
exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, demo_config, parse_config
from .sim import (
    format_sweep_csv,
    generate_scenario,
    predict_episode,
    report_rows,
    run_episode,
    run_pipeline,
    sweep,
)
from .solver import solve, write_trace_csv

__all__ = ["main", "build_parser"]

COMMANDS = ("solve", "sweep", "demo", "validate")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="scenario INI file")
    common.add_argument("--seed", type=int, metavar="U64", help="scenario seed (overrides scenario.seed)")
    common.add_argument("--out-dir", metavar="PATH", default="results", help="output directory (default: results)")
    common.add_argument("--policies", metavar="LIST", help="comma-separated policies (overrides scenario.policies)")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="worker processes (default 1)")
    common.add_argument("--trace", action="store_true", help="dump solver iterations as CSV")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser = argparse.ArgumentParser(prog="coopcache", description="Cooperative edge caching experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="predict, solve and serve one episode")
    sub.add_parser("sweep", parents=[common], help="sweep a capacity axis over all policies")
    sub.add_parser("demo", parents=[common], help="built-in desk-scale scenario, all policies")
    sub.add_parser("validate", parents=[common], help="check a config and echo it")
    return parser


def _load(args):
    overrides = list(args.set)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be a nonnegative integer")
        overrides.append(f"scenario.seed={args.seed}")
    if args.policies:
        overrides.append(f"scenario.policies={args.policies}")
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    if args.command == "demo" and args.config is None:
        return demo_config(overrides)
    return parse_config(args.config, overrides)


def _out(args, name) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _write(path: Path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _cmd_validate(cfg, args):
    return {"config": cfg.source, "echo": cfg.as_dict()}


def _cmd_solve(cfg, args):
    params, settings = cfg.scenario_params(), cfg.predictor_settings()
    scenario = generate_scenario(params, cfg.scenario.seed)
    inst = predict_episode(scenario, settings, 0)
    rep = solve(inst, settings.solver)
    result = run_episode(scenario, rep.placement, 0, settings.warmup_fraction)

    lines = ["node,index,file_id"]
    for kind, mat in (("rsu", rep.placement.x), ("mbs", rep.placement.y)):
        for i, row in enumerate(mat):
            lines += [f"{kind},{i + 1},{f + 1}" for f in row.nonzero()[0]]
    _write(_out(args, "placement.csv"), "\n".join(lines) + "\n")

    n = result.hits + result.misses
    hit = result.hits / n if n else None
    delay = float(result.measured["delay"].sum() / n) if n else None
    row = ["cooperative", "none", hit, delay, 1, n, rep.iterations, cfg.scenario.seed]
    _write(_out(args, "solve.csv"), format_sweep_csv([row]))
    files = ["placement.csv", "solve.csv"]
    if args.trace:
        write_trace_csv(rep.trace, _out(args, "trace.csv"))
        files.append("trace.csv")
    return {"iterations": rep.iterations, "termination": rep.reason, "hit_ratio": hit,
            "avg_delay_s": delay, "requests": n, "no_requests": n == 0, "files": files}


def _makespans(reports):
    return [{"seed": r.seed, "serial_s": round(r.serial_makespan, 4), "pipelined_s": round(r.pipelined_makespan, 4)}
            for r in reports]


def _cmd_sweep(cfg, args):
    scenario = generate_scenario(cfg.scenario_params(), cfg.scenario.seed)
    rows, reports = sweep(scenario, cfg.sweep.axis, cfg.sweep_values, cfg.policies,
                          cfg.predictor_settings(), args.threads)
    _write(_out(args, "sweep.csv"), format_sweep_csv(rows))
    return {"axis": cfg.sweep.axis, "values": cfg.sweep_values, "rows": len(rows),
            "makespans": _makespans(reports), "files": ["sweep.csv"]}


def _demo_run(job):
    params, settings, policies, seed = job
    return run_pipeline(generate_scenario(params, seed), policies, settings)


def _cmd_demo(cfg, args):
    params, settings = cfg.scenario_params(), cfg.predictor_settings()
    seeds = [cfg.scenario.seed + k for k in range(cfg.scenario.seeds)]
    jobs = [(params, settings, cfg.policies, s) for s in seeds]
    if args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(args.threads, len(jobs))) as pool:
            reports = list(pool.map(_demo_run, jobs))
    else:
        reports = [_demo_run(j) for j in jobs]
    rows = [row for rep in reports for row in report_rows(rep, "none")]
    _write(_out(args, "demo.csv"), format_sweep_csv(rows))
    return {"seeds": seeds, "policies": cfg.policies, "rows": len(rows),
            "no_requests": all(r.no_requests for r in reports),
            "makespans": _makespans(reports), "files": ["demo.csv"]}


_HANDLERS = {"solve": _cmd_solve, "sweep": _cmd_sweep, "demo": _cmd_demo, "validate": _cmd_validate}


def _module_of(exc) -> str:
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename)
        if path.parent.name == "coopcache":
            name = path.stem
    return name


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        summary = _HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(json.dumps({"status": "error", "command": args.command, "module": "config", "error": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced as one machine-readable line
        print(json.dumps({"status": "error", "command": args.command, "module": _module_of(exc),
                          "error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **summary}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

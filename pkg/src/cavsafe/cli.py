"""Command-line interface.

Subcommands::

    cavsafe run      --preset paper-sec5 [--seed N] [--out DIR] [--format text|records]
    cavsafe validate --scenario FILE
    cavsafe metrics  --out DIR
    cavsafe sweep    --preset paper-sec5 --seeds 0-19 [--jobs 4] [--out DIR]

Exit codes: 0 clean run, 2 when the audit found a safety violation, 1 on a
usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .errors import CavSafeError
from .export import FORMATS, export, load_log, write_manifest
from .scenario import SCENARIO_PRESETS, config_to_dict, load_preset, load_scenario
from .sim import ScenarioConfig, metrics, run

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad arguments; 2 is reserved here for safety violations
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _add_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", type=Path, help="scenario YAML file")
    src.add_argument("--preset", choices=SCENARIO_PRESETS, help="shipped scenario")
    p.add_argument("--seed", type=int, help="override the scenario seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cavsafe", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"cavsafe {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings from the run")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="simulate one scenario and export the log")
    _add_source(p)
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--format", choices=FORMATS, default="text", help="export format (default: text)")

    p = sub.add_parser("validate", help="check a scenario file without running it")
    _add_source(p)

    p = sub.add_parser("metrics", help="summarize a stored run directory")
    p.add_argument("--out", type=Path, required=True, help="run directory written by `run`")

    p = sub.add_parser("sweep", help="run a range of seeds")
    _add_source(p)
    p.add_argument("--seeds", required=True, help="seed range like 0-19, or a comma list")
    p.add_argument("--out", type=Path, default=Path("sweep"), help="parent directory for per-seed runs")
    p.add_argument("--format", choices=FORMATS, default="text")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def _config(args) -> ScenarioConfig:
    if args.scenario is None and args.preset is None:
        raise UsageError("one of --scenario or --preset is required")
    cfg = load_scenario(args.scenario) if args.scenario is not None else load_preset(args.preset)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _parse_seeds(text: str) -> list[int]:
    try:
        if "-" in text.strip("-"):
            lo, hi = text.split("-", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError(f"empty seed list {text!r}")
    return seeds


def execute(cfg: ScenarioConfig, out: Path, fmt: str) -> dict:
    """Run, export and write the manifest; returns the summary metrics."""
    log = run(cfg)
    summary = metrics(log)
    files = export(log, fmt, out)
    write_manifest(out, config_to_dict(cfg), cfg.seed, files, summary, __version__)
    return summary


def _summary_line(cfg: ScenarioConfig, summary: dict) -> str:
    v = summary["violations"]
    return (
        f"{cfg.name} seed={cfg.seed} cavs={summary['cavs']['registered']} "
        f"exited={summary['cavs']['exited']} violations={summary['violations_total']} "
        f"(control={v['control']} speed={v['speed']} rear-end={v['rear-end']} lateral={v['lateral']}) "
        f"interventions={summary['qp_interventions']} qp_infeasible={summary['qp_infeasible']} "
        f"mean_travel={summary['travel_time']['mean']:.3f}s"
    )


def _sweep_one(job):
    cfg, out, fmt = job
    return cfg, execute(cfg, out, fmt)


def _cmd_run(args) -> int:
    cfg = _config(args)
    summary = execute(cfg, args.out, args.format)
    print(_summary_line(cfg, summary))
    return EXIT_VIOLATION if summary["violations_total"] else EXIT_OK


def _cmd_validate(args) -> int:
    cfg = _config(args)
    print(f"ok: {cfg.name} ({len(cfg.paths)} paths, {cfg.arrivals.count} arrivals at {cfg.arrivals.rate} veh/h)")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    try:
        log = load_log(args.out)
    except FileNotFoundError as err:
        raise UsageError(str(err)) from None
    summary = metrics(log)
    print(json.dumps(summary, indent=2))
    return EXIT_VIOLATION if summary["violations_total"] else EXIT_OK


def _cmd_sweep(args) -> int:
    base = _config(args)
    seeds = _parse_seeds(args.seeds)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    jobs = [(replace(base, seed=s), args.out / f"seed-{s}", args.format) for s in seeds]
    if args.jobs == 1:
        results = map(_sweep_one, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=args.jobs)
        results = pool.map(_sweep_one, jobs)
    worst = EXIT_OK
    for cfg, summary in results:
        print(_summary_line(cfg, summary), flush=True)
        if summary["violations_total"]:
            worst = EXIT_VIOLATION
    if args.jobs > 1:
        pool.shutdown()
    return worst


COMMANDS = {"run": _cmd_run, "validate": _cmd_validate, "metrics": _cmd_metrics, "sweep": _cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except CavSafeError as err:
        print(f"cavsafe: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"cavsafe: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
simulate.py
-----------
Runs scenarios and reports their metrics.

Usage:
    python simulate.py run --config scenarios/baseline.toml [--seed N] [--out DIR]
                           [--trace on|off] [--format human|machine]
    python simulate.py run --config scenarios/dropper.toml --seeds 1..20 [--jobs 4] [--out DIR]
    python simulate.py validate --config scenarios/baseline.toml
    python simulate.py version

Exit codes:
    0  success (routing failures are metrics, not errors)
    2  invalid scenario file
    1  anything else that stops a run

The log level comes from SIM_LOG (DEBUG, INFO, WARNING, ERROR), read after
loading an optional .env file.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
from dotenv import load_dotenv

from metrics import Metrics, TraceSink, compute_metrics, emit_metrics
from model import SimulationError
from network import Network
from scenario import ConfigError, ScenarioConfig, parse_config

__version__ = "0.1.0"

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


@dataclass
class RunResult:
    metrics: Metrics
    trace: TraceSink
    network: Network


def run_scenario(cfg: ScenarioConfig, seed: Optional[int] = None) -> RunResult:
    """Run ``cfg`` to its duration and fold the trace into metrics."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    trace = TraceSink()
    network = Network(cfg, trace)
    network.run()
    metrics = compute_metrics(trace.records, droppers=network.droppers(), sybils=network.sybils())
    logger.info(
        "scenario '%s' seed %d: %d events, delivery ratio %s",
        cfg.name,
        cfg.seed,
        network.kernel.processed,
        metrics.delivery_ratio,
    )
    return RunResult(metrics, trace, network)


def parse_seed_range(text: str) -> List[int]:
    """'A..B' (inclusive) or a single seed."""
    start, sep, end = text.partition("..")
    try:
        first = int(start)
        last = int(end) if sep else first
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got '{text}'") from None
    if first < 0 or last < first:
        raise argparse.ArgumentTypeError(f"empty or negative seed range '{text}'")
    return list(range(first, last + 1))


def write_outputs(result: RunResult, out: Path, with_trace: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(emit_metrics(result.metrics, "machine"), encoding="utf-8")
    if with_trace:
        result.trace.write(out / "trace.log")


def _batch_job(job: Tuple[str, int, Optional[str], bool]) -> Dict[str, object]:
    text, seed, out, with_trace = job
    result = run_scenario(parse_config(text), seed=seed)
    if out is not None:
        write_outputs(result, Path(out) / f"seed-{seed}", with_trace)
    return {"seed": seed, **result.metrics.as_row()}


def run_batch(
    text: str, seeds: Sequence[int], jobs: int = 1, out: Optional[Path] = None, with_trace: bool = False
) -> pd.DataFrame:
    """One isolated run per seed; returns one metrics row per seed, ordered by seed."""
    work = [(text, seed, str(out) if out is not None else None, with_trace) for seed in seeds]
    if jobs <= 1:
        rows = [_batch_job(job) for job in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_batch_job, work))
    frame = pd.DataFrame(rows).sort_values("seed").reset_index(drop=True)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "summary.csv", index=False)
    return frame


def summarize(frame: pd.DataFrame) -> str:
    cols = ["delivery_ratio", "route_discovery_success", "mean_hops", "chosen_path_avg_trust"]
    stats = frame[cols].agg(["mean", "min", "max"]).T
    return f"{len(frame)} runs\n" + stats.to_string(float_format=lambda v: f"{v:.6f}") + "\n"


def _configure_logging() -> None:
    load_dotenv()
    level_name = os.getenv("SIM_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="manet-sim", description="Secure anonymous position-based routing simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario (or a seed range)")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, default=None, help="override scenario.seed")
    run.add_argument("--seeds", type=parse_seed_range, default=None, help="batch mode over A..B")
    run.add_argument("--jobs", type=int, default=1, help="parallel workers in batch mode")
    run.add_argument("--out", type=Path, default=None, help="directory for metrics, traces and summary.csv")
    run.add_argument("--trace", choices=("on", "off"), default="on")
    run.add_argument("--format", choices=("human", "machine"), default="human")

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--config", required=True, type=Path)

    sub.add_parser("version", help="print the version")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()

    if args.command == "version":
        print(f"manet-sim {__version__}")
        return EXIT_OK

    try:
        text = args.config.read_text(encoding="utf-8")
        cfg = parse_config(text)
        if args.command == "validate":
            print(f"ok: {cfg.name} ({cfg.node_count} nodes, {len(cfg.traffic)} flows)")
            return EXIT_OK
        with_trace = args.trace == "on"
        if args.seeds is not None:
            frame = run_batch(text, args.seeds, args.jobs, args.out, with_trace)
            print(summarize(frame), end="")
            return EXIT_OK
        result = run_scenario(cfg, seed=args.seed)
        print(emit_metrics(result.metrics, args.format), end="")
        if args.out is not None:
            write_outputs(result, args.out, with_trace)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

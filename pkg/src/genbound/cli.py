"""Command-line entry point: ``genbound <command> --config cfg.json --out dir``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from .artifacts import emit
from .config import EXPERIMENT_KINDS, ConfigError, ExperimentConfig, default_config
from .estimators import TrialDivergence
from .experiments import COMMANDS, RunContext, estimate_seconds
from .kl_lab import GridTooCoarse
from .optimizer import DivergenceError
from .plots import emit_plots

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_VIOLATION = 0, 2, 3, 4
BUDGET_SECONDS = 600.0

log = logging.getLogger("genbound")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="genbound", description="Estimate and validate pathwise generalization bounds.")
    ap.add_argument("command", choices=EXPERIMENT_KINDS)
    ap.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
    ap.add_argument("--out", default="genbound-out", help="output directory")
    ap.add_argument("--seed", type=int, help="override the master seed")
    ap.add_argument("--threads", type=int, default=1, help="worker threads (GENBOUND_THREADS overrides)")
    ap.add_argument("--dump-trajectory", action="store_true", help="also write trial-0 trajectories")
    ap.add_argument("--no-plots", action="store_true", help="skip SVG rendering")
    return ap


def resolve_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if cfg.kind != args.command:
            raise ConfigError(f"config kind {cfg.kind!r} does not match command {args.command!r}")
    else:
        cfg = default_config(args.command)
    if args.seed is not None:
        data = cfg.to_dict()
        data["seed"] = args.seed
        cfg = ExperimentConfig.from_dict(data)
    return cfg


def thread_count(args) -> int:
    env = os.environ.get("GENBOUND_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as err:
            raise ConfigError(f"GENBOUND_THREADS must be an integer, got {env!r}") from err
    return max(1, args.threads)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        threads = thread_count(args)
        forecast = estimate_seconds(cfg)
        if forecast > BUDGET_SECONDS:
            log.warning("estimated runtime %.0f s exceeds the %.0f s budget", forecast, BUDGET_SECONDS)
        start = time.perf_counter()
        art = COMMANDS[cfg.kind](cfg, RunContext(threads=threads, dump_trajectory=args.dump_trajectory))
        out = Path(args.out)
        if not args.no_plots:
            art.plots = emit_plots(art, out)
        art.wall_clock = time.perf_counter() - start
        emit(art, out)
    except ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except (TrialDivergence, DivergenceError, GridTooCoarse) as err:
        log.error("numerical failure: %s", err)
        return EXIT_DIVERGENCE
    if art.exit_code == EXIT_VIOLATION:
        log.error("bound or KL-inequality violation detected; see %s", out / "summary.json")
    else:
        log.info("wrote %s", out)
    return art.exit_code


if __name__ == "__main__":
    sys.exit(main())

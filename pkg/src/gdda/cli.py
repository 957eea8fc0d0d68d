"""Command-line entry point: ``gdda <subcommand> [--config PATH] ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, GddaError
from .pipeline import (ABLATIONS, ExperimentConfig, Pipeline, run_baseline_energy, run_lambda_sweep,
                       run_pipeline, run_seeds, run_stage, write_json)

LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}

STAGE_COMMANDS = {
    "gen-data": "data",
    "train-p1": "phase1",
    "train-diff": "score",
    "gen-pseudo": "pseudo",
    "train-det": "detector",
    "eval": "eval",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gdda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    names = list(STAGE_COMMANDS) + ["sweep-lambda", "ablate", "baseline", "run-all"]
    for name in names:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--stage-cache", type=Path, help="shared stage cache directory")
        if name == "sweep-lambda":
            p.add_argument("--lambdas", default="0,0.1,0.4,0.7", help="comma-separated lambda values")
        if name == "ablate":
            p.add_argument("--which", choices=[a for a in ABLATIONS if a != "none"] + ["both"], default="both")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    cfg.validate()
    return cfg


def _multi_or_single(cfg, method, cache):
    if cfg.seeds:
        agg = run_seeds(cfg, cfg.seeds, method=method, stage_cache=cache)
        suffix = method if method != "gdda" else (cfg.ablation if cfg.ablation != "none" else "gdda")
        return write_json(agg, Path(cfg.output_dir) / f"aggregate_{suffix}.json")
    if method == "energy_baseline":
        return run_baseline_energy(cfg, cache)
    return run_pipeline(cfg, cache)


def dispatch(args) -> Path | dict | None:
    cfg = load_config(args)
    cache = args.stage_cache
    cmd = args.command
    if cmd in STAGE_COMMANDS:
        pipe = run_stage(cfg, STAGE_COMMANDS[cmd], cache)
        return pipe.metrics_path() if cmd == "eval" else Path(pipe.records[-1]["dir"])
    if cmd == "run-all":
        return _multi_or_single(cfg, "gdda", cache)
    if cmd == "baseline":
        return _multi_or_single(cfg, "energy_baseline", cache)
    if cmd == "ablate":
        which = ["no_pseudo_ind", "no_pseudo_ood"] if args.which == "both" else [args.which]
        return [_multi_or_single(replace(cfg, ablation=a), "gdda", cache) for a in which]
    if cmd == "sweep-lambda":
        try:
            lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --lambdas: {exc}") from exc
        run_lambda_sweep(cfg, lambdas, cache)
        return Path(cfg.output_dir) / "sweep" / "sweep.json"
    raise ConfigError(f"unknown command {cmd}")


def main(argv=None) -> int:
    level = os.environ.get("GDDA_LOG_LEVEL", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = dispatch(args)
    except GddaError as exc:
        logging.getLogger("gdda").error("%s", exc)
        return exc.exit_code
    if isinstance(result, list):
        for r in result:
            print(r)
    elif result is not None:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())

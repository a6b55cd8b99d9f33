"""Command-line entry point: ``gibbswave run | validate | schema``."""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, schema_json
from .dynamics import BlowUpError, ContractionError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gibbswave", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment and write report.csv / report.json")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--ensemble", type=int)
    run.add_argument("--dt", type=float)
    run.add_argument("--out")
    run.add_argument("--workers", type=int, help="threads; results do not depend on this")
    val = sub.add_parser("validate", help="check a config against the schema and physics constraints")
    val.add_argument("--config", required=True)
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def _config_error(err: ConfigError) -> int:
    print("invalid configuration:", file=sys.stderr)
    for msg in err.messages:
        print(f"  {msg}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "schema":
        print(schema_json())
        return 0
    if args.command == "validate":
        try:
            cfg = ExperimentConfig.load(args.config)
        except ConfigError as err:
            return _config_error(err)
        print(f"ok: {cfg.experiment} (config hash {cfg.digest()[:12]})")
        return 0

    overrides = {
        ("sampling", "seed"): args.seed,
        ("sampling", "ensemble"): args.ensemble,
        ("sampling", "workers"): args.workers,
        ("physics", "dt"): args.dt,
        ("output", "directory"): args.out,
    }
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
        if cfg.experiment != args.experiment:
            raise ConfigError(
                f"experiment: config is for '{cfg.experiment}' but '{args.experiment}' was requested"
            )
    except ConfigError as err:
        return _config_error(err)

    from .experiments import run_experiment

    try:
        report = run_experiment(cfg)
    except ConfigError as err:
        return _config_error(err)
    except (BlowUpError, ContractionError) as err:
        print(f"run aborted: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    report.write(cfg.output["directory"], cfg.output["formats"])
    print(report.summary())
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())

"""``dyntube <command> --config cfg.yaml [--seed S] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys

import yaml

from .datagen import DatasetError
from .harness import (COMMANDS, EXIT_IO, EXIT_OK, EXIT_SOLVER, EXIT_VALIDATION, ConfigError,
                      ExperimentConfig, SolverDominatedRun)
from .planner import ScenarioError, SolverFailure
from .tables import TableFormatError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyntube", description="Learned dynamic tubes for MPC.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "datagen": "simulate a randomized rollout dataset",
        "train": "fit a tube model on a dataset",
        "sweep": "train one model per history length and tabulate holdout metrics",
        "run": "closed-loop run of one tube mode on one scenario",
        "compare": "closed-loop runs of several tube modes over several seeds",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=None, help="output directory (overrides config `out`)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        COMMANDS[args.command](cfg, seed=args.seed, out=args.out)
    except (ConfigError, ScenarioError, TableFormatError, yaml.YAMLError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverDominatedRun, SolverFailure) as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

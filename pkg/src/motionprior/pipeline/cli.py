"""``motionprior`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from ..exceptions import (ConfigError, InvalidArgumentError, LoadError, MissingPrerequisiteError,
                          NumericalError)
from . import runner
from .config import DATA_ROOT_ENV, ExperimentConfig, apply_overrides, preset

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

COMMANDS = ("gen-data", "train-prior", "train-reuse", "eval", "inbetween", "ablate-translation",
            "export", "data-efficiency")


def build_parser():
    p = argparse.ArgumentParser(prog="motionprior", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("-c", "--config", help="YAML or JSON experiment config")
    p.add_argument("--preset", default="toy", help="base settings when no config file is given")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set prior.lr=1e-3 (repeatable)")
    p.add_argument("--data-root", help=f"data directory (default: ${DATA_ROOT_ENV} or ./data)")
    p.add_argument("--run-dir", help="output directory for checkpoints and reports")
    p.add_argument("--modality", choices=("depth_pc", "lidar", "imu"))
    p.add_argument("--modalities", nargs="+", choices=("depth_pc", "lidar", "imu"),
                   help="gen-data: modalities to simulate")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--keyframes", type=int, nargs="+", help="inbetween: known frame indices")
    p.add_argument("--epochs", type=int, help="ablate-translation: epochs per variant")
    p.add_argument("--clip", help="export: clip id")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args):
    config = ExperimentConfig.load(args.config) if args.config else preset(args.preset)
    overrides = list(args.overrides)
    if args.data_root:
        overrides.append(f"data_root={args.data_root}")
    if args.run_dir:
        overrides.append(f"run_dir={args.run_dir}")
    if args.modality:
        overrides.append(f"modality={args.modality}")
    return apply_overrides(config, overrides)


def dispatch(ctx, args):
    cmd = args.command
    if cmd == "gen-data":
        return runner.gen_data(ctx, args.modalities)
    if cmd == "train-prior":
        return runner.train_prior(ctx)
    if cmd == "train-reuse":
        return runner.train_reuse(ctx)
    if cmd == "eval":
        report = runner.evaluate(ctx, split=args.split)
        print(report.to_table())
        return report
    if cmd == "inbetween":
        report = runner.inbetween(ctx, args.split, args.keyframes)
        print(report.to_table())
        return report
    if cmd == "ablate-translation":
        report = runner.ablate_translation(ctx, n_epochs=args.epochs)
        print(report.to_table())
        return report
    if cmd == "export":
        out = runner.export(ctx, split=args.split, clip_id=args.clip)
        print(out)
        return out
    report, _ = runner.data_efficiency(ctx)
    print(report.to_table())
    return report


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args)
        ctx = runner.Context(config, args.command)
        dispatch(ctx, args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPrerequisiteError, LoadError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

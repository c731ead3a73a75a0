"""Command line entry point: ``due <command> --config <path> [--seed N] [--run-dir PATH] [key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import filelock

from . import pipeline
from .config import load_config
from .errors import DueError

COMMANDS = {
    "gen-data": "generate, split and sparsify the synthetic dataset",
    "train-interp": "train the diffusion slice interpolator",
    "mc-variance": "Monte-Carlo interpolation variance on the uncertainty pool",
    "train-uq": "train the fast uncertainty predictor on Monte-Carlo variance",
    "build-targets": "interpolate training annotations and weight them by uncertainty",
    "train": "train classifiers (all configured modes, or --mode)",
    "evaluate": "evaluate trained classifiers and write reports and figures",
    "sweep": "multi-run comparison over lambda or train_size",
    "run": "run every stage in order",
    "show-config": "print the resolved configuration",
}

EPILOG = """\
overrides are dotted keys into the JSON config, e.g. train.lam=0.1 or
data.synthetic.n_pos=25; values are parsed as JSON when possible.
The run directory defaults to $DUE_RUN_DIR, then the config's run_dir,
then ./due-run. Exit status: 0 success, 2 validation, 3 configuration,
4 annotation, 5 corrupt file, 6 split, 7 training, 8 interpolation,
9 undefined metric, 10 reporting, 11 missing upstream stage, 12 run
directory busy.

Method defaults: lambda 1, learning rate 0.001,
50 epochs, condition dropout p_mask 0.5, binarisation threshold 0.5.
All other defaults are implementation choices (marked "artifact" in
due/config.py).
"""


def build_parser():
    p = argparse.ArgumentParser(prog="due", description="Uncertainty-weighted explanation supervision pipeline",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name, help_text in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text, epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "sweep":
            sp.add_argument("parameter", choices=pipeline.SWEEP_PARAMETERS)
            sp.add_argument("--values", type=float, nargs="+", help="values to sweep (default: from config)")
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="root seed (overrides config)")
        sp.add_argument("--run-dir", help="run directory (overrides $DUE_RUN_DIR and config)")
        sp.add_argument("--force", action="store_true", help="re-run even if up to date")
        if name in ("train", "evaluate"):
            sp.add_argument("--mode", action="append", choices=("baseline", "baseline_plus", "due"),
                            help="restrict to a training mode (repeatable)")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def _run_dir(args, config):
    return args.run_dir or os.environ.get("DUE_RUN_DIR") or config.run_dir or "due-run"


def dispatch(args):
    config = load_config(args.config, args.overrides, seed=args.seed)
    run_dir = _run_dir(args, config)
    if args.command == "show-config":
        d = config.to_dict()
        d["run_dir"] = run_dir
        print(json.dumps(d, indent=2, sort_keys=True))
        return 0
    config.run_dir = run_dir
    run = pipeline.open_run(config, run_dir)
    try:
        with run.lock():
            _execute(run, args)
    except filelock.Timeout:
        print(f"error: run directory {run.dir} is in use by another command", file=sys.stderr)
        return 12
    return 0


def _execute(run, args):
    c, force = args.command, args.force
    if c == "gen-data":
        pipeline.gen_data(run, force)
    elif c == "train-interp":
        pipeline.train_interp(run, force)
    elif c == "mc-variance":
        pipeline.mc_variance(run, force)
    elif c == "train-uq":
        pipeline.train_uq(run, force)
    elif c == "build-targets":
        pipeline.build_targets(run, force)
    elif c == "train":
        for mode in args.mode or run.config.train.modes:
            pipeline.train_mode(run, mode, force)
    elif c == "evaluate":
        pipeline.evaluate(run, force, modes=args.mode)
        print((run.out_dir("evaluate") / "summary.tsv").read_text(), end="")
    elif c == "sweep":
        values = args.values
        if values is not None and args.parameter == "train_size":
            values = [int(v) for v in values]
        pipeline.sweep(run, args.parameter, values, force)
        print((run.dir / "sweeps" / args.parameter / "comparison.tsv").read_text(), end="")
    elif c == "run":
        pipeline.run_all(run, force)
        print((run.out_dir("evaluate") / "summary.tsv").read_text(), end="")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return dispatch(args)
    except DueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: train, forecast, evaluate, simulate, pipeline.  Exit codes:
0 success, 1 runtime failure, 2 configuration error.  The only
environment variable honored is INTERMIT_LOG_LEVEL.
"""

import argparse
import json
import logging
import os
import sys

from . import config as cfgmod
from . import data as datamod
from . import runner
from .errors import ConfigurationError, IntermitError


def _setup_logging():
    level = os.environ.get("INTERMIT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="intermit",
        description="Latent-state forecasting for intermittent demand")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit parameters per item")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("forecast", help="draw sample paths from a model")
    p.add_argument("--model", required=True,
                   help="params.json produced by train")
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="risk metrics from stored samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--actuals", required=True)
    p.add_argument("--spec", required=True,
                   help="JSON file with an evaluation section")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="generate synthetic data")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="train, forecast, evaluate in one go")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_eval_spec(path):
    with open(path) as fh:
        raw = json.load(fh)
    section = raw.get("evaluation", raw) if isinstance(raw, dict) else raw
    return cfgmod.build_evaluation_spec(section)


def run(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging()
    if args.command == "train":
        raw = cfgmod.load_config(args.config)
        series = datamod.load_csv(args.data)
        outcome = runner.run_train(raw, series, args.out)
        return outcome.exit_code
    if args.command == "forecast":
        with open(args.model) as fh:
            payload = json.load(fh)
        raw = cfgmod.validate_config(payload["config"])
        series = datamod.load_csv(args.data)
        outcome = runner.run_forecast(raw, series, payload, args.out,
                                      horizon=args.horizon,
                                      n_paths=args.paths, seed=args.seed)
        return outcome.exit_code
    if args.command == "evaluate":
        spec = _load_eval_spec(args.spec)
        samples = runner.load_samples_csv(args.samples)
        series = datamod.load_csv(args.actuals)
        outcome, metrics = runner.run_evaluate(samples, series, spec,
                                               args.out)
        for m in metrics:
            print(json.dumps(m))
        return outcome.exit_code
    if args.command == "simulate":
        raw = cfgmod.load_config(args.config)
        seed = args.seed
        if seed is None:
            seed = int(raw.get("simulate", {}).get("seed", 0))
        outcome = runner.run_simulate(raw, seed, args.out)
        return outcome.exit_code
    if args.command == "pipeline":
        raw = cfgmod.load_config(args.config)
        series = datamod.load_csv(args.data)
        outcome = runner.run_pipeline(raw, series, args.out)
        return outcome.exit_code
    return 2


def main(argv=None):
    try:
        return run(argv)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except IntermitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

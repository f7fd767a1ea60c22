"""Command line interface.

    fedfair run --config CFG --out DIR [--seed N]
    fedfair attack-replay --checkpoints DIR --targets MANIFEST --out DIR
    fedfair report --in DIR

FEDFAIR_SEED and FEDFAIR_OUT override the seed and output directory.
Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error,
1 anything else.
"""

import argparse
import json
import os
import sys

from fedfair import config as config_mod
from fedfair import experiment
from fedfair.errors import CheckpointError, ConfigError, DataError, FedfairError

_EXIT_CODES = {ConfigError: 2, DataError: 3, CheckpointError: 4}


def _build_parser():
    parser = argparse.ArgumentParser(prog="fedfair")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write its report")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, default=None)

    replay = sub.add_parser("attack-replay", help="recompute attack results from checkpoints")
    replay.add_argument("--checkpoints", required=True)
    replay.add_argument("--targets", required=True)
    replay.add_argument("--out", required=True)

    report = sub.add_parser("report", help="re-render the summary from a run directory's CSVs")
    report.add_argument("--in", dest="run_dir", required=True)
    return parser


def _cmd_run(args) -> int:
    overrides = {}
    seed_env = os.environ.get("FEDFAIR_SEED")
    if args.seed is not None:
        overrides["seed"] = args.seed
    elif seed_env is not None:
        try:
            overrides["seed"] = int(seed_env)
        except ValueError as exc:
            raise ConfigError(f"FEDFAIR_SEED must be an int, got {seed_env!r}") from exc
    out_dir = os.environ.get("FEDFAIR_OUT", args.out)
    cfg = config_mod.load_config(args.config, overrides)
    result = experiment.run_experiment(cfg, out_dir)
    experiment.emit_report(result, out_dir)
    print(f"wrote {out_dir}")
    return 0


def _cmd_replay(args) -> int:
    out_dir = os.environ.get("FEDFAIR_OUT", args.out)
    results = experiment.replay_attack(args.checkpoints, args.targets)
    experiment.write_replay_csv(results, out_dir)
    print(f"wrote {os.path.join(out_dir, 'sia_replay.csv')}")
    return 0


def _cmd_report(args) -> int:
    summary = experiment.render_summary(args.run_dir)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "attack-replay": _cmd_replay, "report": _cmd_report}[args.command]
    try:
        return handler(args)
    except FedfairError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        for etype, code in _EXIT_CODES.items():
            if isinstance(exc, etype):
                return code
        return 1
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``tilefreq`` command line: ``run`` and ``describe`` over the pipeline config."""

import argparse
import sys

from .config import ConfigError, load_config
from .pipeline import TASK_NAMES, TaskError, describe, run

EXIT_OK, EXIT_TASK, EXIT_CONFIG = 0, 1, 2


def main(argv=None):
    parser = argparse.ArgumentParser(prog="tilefreq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a task and its incomplete dependencies")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--target", required=True, choices=TASK_NAMES)
    p_desc = sub.add_parser("describe", help="list tasks with their status")
    p_desc.add_argument("--config", required=True)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "describe":
        describe(cfg)
        return EXIT_OK
    try:
        executed = run(cfg, args.target)
    except TaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TASK
    print(f"{len(executed)} task(s) executed")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

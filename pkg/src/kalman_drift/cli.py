"""kalman-drift command line: run, check, selftest.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, selftest
from .config import LEARNER_CHOICES, ConfigError, build_config
from .data import DataError, load_splits
from .outputs import write_manifest, write_outputs
from .trainer import DriftStream, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
THREADS_ENV = "KALMAN_DRIFT_THREADS"

log = logging.getLogger("kalman_drift")


def _overrides(args) -> dict:
    values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set: expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "learner", None) is not None:
        values["learner"] = args.learner
    return values


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV}: expected a positive integer, got {raw!r}")
    return threads


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cmd_run(args) -> int:
    try:
        config = build_config(args.config, _overrides(args))
        threads = _threads()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        splits = load_splits(args.data, config.validation_size)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    started = _now()
    try:
        out_dir = Path(args.out)
        report = run_experiment(config, DriftStream(splits, config.task_sequence()), threads=threads)
        outputs = write_outputs(report, out_dir)
        outputs["manifest"] = out_dir / "manifest.json"
        write_manifest(outputs["manifest"], config_digest=config.digest(), data_files=splits.files,
                       started=started, finished=_now(), outputs=outputs, version=__version__)
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for learner, summary in report.summary["learners"].items():
        print(f"{learner}: pretrain test accuracy drop {100 * summary['pretrain_test_drop']:.2f} points")
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        config = build_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(config.to_text(), end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    failed = selftest.run_all()
    if failed:
        print(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: {', '.join(failed)}")
        return 1
    print("all properties passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kalman-drift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the sequential-task experiment")
    run.add_argument("--config", help="key=value config file (defaults if omitted)")
    run.add_argument("--data", required=True, help="directory holding the four MNIST IDX files")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--learner", choices=LEARNER_CHOICES)
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="validate a config and print resolved values")
    check.add_argument("--config")
    check.add_argument("--set", action="append", metavar="KEY=VALUE")
    check.set_defaults(func=cmd_check)

    test = sub.add_parser("selftest", help="run the built-in property checks")
    test.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

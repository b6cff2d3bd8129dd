"""Command line entry point.

    moelab run <kind> [--config FILE] [--<setting> VALUE ...]
    moelab <kind> [...]

Exit status: 0 success, 2 configuration error, 3 a result check failed.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields

from .config import KINDS, ConfigError, ExperimentConfig, load_config
from .experiments import PairingError, run_experiment
from .report import emit_report, format_table

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moelab", description="Toy-scale mixture-of-experts experiments.")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--out", dest="out_dir", help="report directory")
    p.add_argument("--quiet", action="store_true")
    for f in fields(ExperimentConfig):
        if f.name in ("kind", "out_dir"):
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="VALUE")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "run":
        argv = argv[1:]
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if v is not None and k not in ("config", "quiet")}
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        report = run_experiment(cfg, log)
    except PairingError as e:
        print(f"reproducibility check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - start
    try:
        paths = emit_report(report, cfg.out_dir, wall)
    except OSError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    if not args.quiet:
        for name, rows in report.tables.items():
            if len(rows) <= 40:
                print(f"[{name}]")
                print(format_table(rows))
        for name, block in report.text.items():
            print(f"[{name}]")
            print(block)
        for k, v in report.summary.items():
            print(f"{k}: {v}")
        for k, ok in report.checks.items():
            print(f"{'PASS' if ok else 'FAIL'} {k}")
        print("wrote " + ", ".join(paths))
    return EXIT_OK if report.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())

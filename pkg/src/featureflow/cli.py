"""Command-line entry point: ``featureflow <study> [--config PATH] [--out DIR] [--seed U64]``.

Exit code 0 iff every verdict of the study passes.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config_io import ExperimentConfig
from .experiments import STUDIES, default_config, run_study

log = logging.getLogger("featureflow")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featureflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="study", required=True)
    for name in STUDIES:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults to the built-in one)")
        p.add_argument("--out", help="output directory (overrides config.output)")
        p.add_argument("--seed", type=_u64, help="override config.seed")
        p.add_argument("--workers", type=int, default=1, help="parallel grid points")
        if name == "eps1":
            p.add_argument("--family", choices=("dnn", "resnet"), default="dnn")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    family = getattr(args, "family", "dnn")
    try:
        config = ExperimentConfig.load(args.config) if args.config else default_config(args.study, family)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        report = run_study(args.study, config, family, max(1, args.workers))
    except (OSError, ValueError) as exc:
        log.error("error: %s", exc)
        return 2
    out = args.out or config.output
    report.write(out)
    for name, c in report.checks.items():
        log.info("%-22s %s  value=%s", name, "PASS" if c["passed"] else "FAIL", c["value"])
    for note in report.notes:
        log.info("note: %s", note)
    log.info("%s: %s (%.1fs) -> %s", report.study, "PASS" if report.verdict else "FAIL", report.wall_clock, out)
    return 0 if report.verdict else 1


if __name__ == "__main__":
    sys.exit(main())

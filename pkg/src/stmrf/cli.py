"""Command line entry point: ``stmrf {synth,classify,regularize,assess}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from stmrf.config import ConfigError, load_config, parse_config
from stmrf.core import NumericalError
from stmrf.ivm import IvmError
from stmrf.pipeline import MODES, DataError, cmd_assess, cmd_classify, cmd_regularize, cmd_synth

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("stmrf")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of 'section.key = value' lines (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override pipeline.seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--out", help="override pipeline.out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stmrf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic scenario, features and samples")
    sub.add_parser("classify", parents=[common], help="per-date IVM grid search, training and prediction")
    reg = sub.add_parser("regularize", parents=[common], help="label maps by argmax, spatial or spatio-temporal MRF")
    reg.add_argument("--mode", choices=(*MODES, "all"), default="all")
    sub.add_parser("assess", parents=[common], help="area-adjusted accuracy reports")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    overrides = {}
    if args.seed is not None:
        overrides["pipeline.seed"] = str(args.seed)
    if args.out is not None:
        overrides["pipeline.out"] = args.out
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, overrides) if args.config else parse_config("", overrides=overrides)
        cfg.threads = args.threads
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "classify":
            cmd_classify(cfg)
        elif args.command == "regularize":
            cmd_regularize(cfg, MODES if args.mode == "all" else (args.mode,))
        elif args.command == "assess":
            cmd_assess(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (DataError, IvmError, ValueError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Import custom modules
from src.config import LOG_LEVEL_ENV, ConfigError, load_config
from src.experiments import EXPERIMENT_REGISTRY, run_experiments

logger = logging.getLogger("hyptimes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyptimes",
        description="Hyperbolic-time experiments for non-uniformly expanding circle maps.",
    )
    parser.add_argument("--log-level", default=None,
                        help=f"logging level (default: ${LOG_LEVEL_ENV} or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiments listed in a config")
    run.add_argument("config", help="path to a JSON config")

    validate = sub.add_parser("validate", help="load and validate a config without running it")
    validate.add_argument("config", help="path to a JSON config")

    sub.add_parser("list-experiments", help="list the available experiments")
    return parser


def setup_logging(level: Optional[str]) -> None:
    load_dotenv()
    name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    if args.command == "list-experiments":
        for name, description in EXPERIMENT_REGISTRY.items():
            print(f"{name:<10} {description}")
        return 0

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        logger.error("%s", exc)
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(f"{args.config}: ok (map={config.map}, experiments={', '.join(config.experiments)})")
        return 0

    try:
        status = run_experiments(config)
    except OSError as exc:
        logger.error("run aborted: %s", exc)
        return 2
    logger.info("run finished with %d failed check(s)", status)
    return status


if __name__ == "__main__":
    sys.exit(main())

import argparse
import sys
from typing import List, Optional

from loguru import logger

from app import __version__
from app.cli.commands import COMMANDS
from app.config import settings
from app.exceptions import ConfigValidationError, LabError


def setup_logging(level: Optional[str] = None) -> None:
    """Configure logging"""
    level = level or settings.log_level
    logger.remove()
    logger.add(sys.stderr, level=level)
    logger.add(settings.log_file, rotation="10 MB", retention="7 days", level=level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uscs-lab",
        description=f"{settings.app_name}: semi-supervised segmentation experiments",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help=f"override the log level (default {settings.log_level})")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include commands
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except ConfigValidationError as exc:
        logger.error(f"Config rejected ({len(exc.keys)} offending keys): {exc.detail}")
        return 1
    except LabError as exc:
        logger.error(f"{type(exc).__name__}: {exc.detail}")
        return 1
    except Exception as exc:
        logger.exception(f"Unhandled exception: {str(exc)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

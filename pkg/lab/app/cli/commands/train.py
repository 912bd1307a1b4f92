import argparse
from pathlib import Path
from typing import Dict, Sequence

from loguru import logger

from app.exceptions import ConfigValidationError
from app.models.training import TrainConfig
from app.services.experiment import default_run_dir, run_train
from app.utils.helpers import sanitize_run_name


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("train", help="train one configuration")
    parser.add_argument("config", help="key=value config file")
    parser.add_argument("--name", help="run directory name under the output root")
    parser.add_argument("--run-dir", help="explicit run directory (overrides --name)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )
    parser.set_defaults(handler=handle)


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    problems: Dict[str, str] = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            problems[item] = "override is not KEY=VALUE"
            continue
        overrides[key.strip()] = value.strip()
    if problems:
        raise ConfigValidationError(problems)
    return overrides


def load_config(path: str, overrides: Sequence[str]) -> TrainConfig:
    cfg = TrainConfig.from_file(path)
    if overrides:
        cfg = cfg.with_overrides(**parse_overrides(overrides))
    return cfg


def handle(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        run_dir = default_run_dir(cfg, sanitize_run_name(args.name) if args.name else None)
    run_dir = run_train(cfg, run_dir)
    logger.info(f"Final evaluation written to {run_dir / 'eval.json'}")
    print(run_dir)
    return 0

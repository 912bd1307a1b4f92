import argparse

from loguru import logger

from app.cli.commands.train import load_config
from app.models.training import SweepSpec
from app.services.experiment import run_ablation


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("ablate", help="sweep one parameter over several seeds")
    parser.add_argument("config", help="base key=value config file")
    parser.add_argument("sweep", help="sweep spec file (parameter, values, seeds, workers)")
    parser.add_argument("--out", help="output directory (default: <output root>/ablate-<parameter>)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    base = load_config(args.config, args.overrides)
    sweep = SweepSpec.from_file(args.sweep)
    summary = run_ablation(base, sweep, args.out)
    print(summary.to_string(index=False))
    if not summary["complete"].all():
        logger.error("Some ablation runs failed; the table is marked incomplete")
        return 2
    return 0

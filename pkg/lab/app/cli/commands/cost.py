import argparse

from app.cli.commands.train import load_config
from app.services.experiment import run_cost
from app.services.metrics import cost_ratios
from app.utils.helpers import format_count


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("cost", help="parameters, MACs and forward passes per pipeline")
    parser.add_argument("config", help="key=value config file (architecture keys are used)")
    parser.add_argument("--out", help="directory for cost.csv and cost.json")
    parser.add_argument("--batch", type=int, default=1, help="batch size of the counted input")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.overrides)
    report = run_cost(cfg, args.out, batch_size=args.batch)
    print(f"input {tuple(report.input_shape)}")
    print(f"{'pipeline':<10}{'params':>12}{'MACs/fwd':>14}{'passes':>8}{'MACs/iter':>14}")
    for row in report.rows:
        print(
            f"{row.pipeline:<10}{format_count(row.params):>12}{format_count(row.macs_per_forward):>14}"
            f"{row.forward_passes:>8}{format_count(row.macs_per_iteration):>14}"
        )
    ratios = cost_ratios(report)
    print(f"uscs / cps: params {ratios['params']:.3f}, MACs per iteration {ratios['macs_per_iteration']:.3f}")
    return 0

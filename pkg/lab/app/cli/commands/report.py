import argparse

from app.services.experiment import run_report


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("report", help="compare finished runs from their raw CSVs")
    parser.add_argument("run_dirs", nargs="+", help="run directories")
    parser.add_argument("--out", help="write the comparison table to this CSV")
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    table = run_report(args.run_dirs, args.out)
    print(table.to_string(index=False))
    return 0

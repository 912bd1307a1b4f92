import argparse

from app.services.experiment import run_eval
from app.utils.helpers import format_percentage


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="re-evaluate a run's checkpoint on its validation set")
    parser.add_argument("run_dir", help="run directory written by 'train'")
    parser.add_argument("--checkpoint", help="checkpoint directory (default: latest)")
    parser.add_argument(
        "--export", type=int, default=0, metavar="N", help="write N validation scenes and their uncertainty maps"
    )
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    report = run_eval(args.run_dir, args.checkpoint, export=args.export)
    print(f"iteration      {report.iteration}")
    print(f"mIoU           {format_percentage(report.miou)}")
    print(f"pixel accuracy {format_percentage(report.pixel_accuracy)}")
    print(f"non-overlap    {format_percentage(report.non_overlap)}")
    for c, iou in enumerate(report.per_class_iou):
        print(f"  class {c}: {'n/a' if iou is None else format_percentage(iou)}")
    return 0

"""Command-line entry point for the UFC matcher."""

import argparse
import json
import sys
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from ufc_matcher import __version__
from ufc_matcher.core.config import Settings, VariantTag, load_settings
from ufc_matcher.core.exceptions import UFCError, UsageError
from ufc_matcher.core.logs import configure_logging
from ufc_matcher.core.numerics import pin_intra_op_threads, seed_everything, set_precision
from ufc_matcher.tasks import run_ablation, run_eval, run_gen_data, run_match, run_train_toy, run_viz, run_zoomin


def _pair_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("image_s", type=Path, help="Source image")
    parser.add_argument("image_t", type=Path, help="Target image")
    parser.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint (default: checkpoint_path)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ufc-matcher", description="Dense matching with unified feature and cost aggregation"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, default=None, help="Flat key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="Global seed")
    parser.add_argument("--threads", type=int, default=None, help="Worker thread cap")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic warp dataset")
    gen.add_argument("--out", type=Path, default=None, help="Dataset directory (default: data_dir)")
    gen.add_argument("--count", type=int, default=None, help="Number of pairs")

    train = sub.add_parser("train-toy", help="Train a matcher on a synthetic dataset")
    train.add_argument("--data", type=Path, default=None, help="Dataset directory (default: data_dir)")
    train.add_argument("--checkpoint", type=Path, default=None, help="Checkpoint path")
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--resume", action="store_true", help="Continue from the checkpoint's last epoch")

    match = sub.add_parser("match", help="Single forward pass; writes a .flo file")
    _pair_arguments(match)
    match.add_argument("--out", type=Path, required=True, help="Output .flo path")

    zoom = sub.add_parser("zoomin", help="Dense zoom-in inference; writes a .flo file and a confidence image")
    _pair_arguments(zoom)
    zoom.add_argument("--out", type=Path, required=True, help="Output .flo path")

    evaluate = sub.add_parser("eval", help="AEPE and PCK of predicted flows against ground truth")
    evaluate.add_argument("pred_dir", type=Path)
    evaluate.add_argument("gt_dir", type=Path)
    evaluate.add_argument("--report", type=Path, default=None, help="Report path (default: output_dir/eval.jsonl)")

    viz = sub.add_parser("viz", help="PCA feature renders and cost slices")
    _pair_arguments(viz)
    viz.add_argument("--x", type=int, required=True, help="Target pixel column")
    viz.add_argument("--y", type=int, required=True, help="Target pixel row")
    viz.add_argument("--out", type=Path, default=None, help="Output directory (default: output_dir/viz)")

    ablation = sub.add_parser("ablation", help="Train and compare model variants")
    ablation.add_argument("--data", type=Path, default=None, help="Dataset directory (default: data_dir)")
    ablation.add_argument("--out", type=Path, default=None, help="Report directory (default: output_dir/ablation)")
    ablation.add_argument(
        "--variants", nargs="+", choices=[v.value for v in VariantTag], default=None, help="Subset of variants"
    )
    return parser


def _settings(args: argparse.Namespace) -> Settings:
    overrides: dict[str, Any] = {"seed": args.seed, "threads": args.threads}
    if args.command == "gen-data":
        overrides["dataset_count"] = args.count
    elif args.command == "train-toy":
        overrides["epochs"] = args.epochs
    return load_settings(args.config, **overrides)


def dispatch(args: argparse.Namespace, settings: Settings) -> dict[str, Any]:
    checkpoint = getattr(args, "checkpoint", None) or settings.checkpoint_path
    if args.command == "gen-data":
        return run_gen_data(settings, args.out)
    if args.command == "train-toy":
        return run_train_toy(settings, args.data, checkpoint, resume=args.resume)
    if args.command == "match":
        return run_match(settings, checkpoint, args.image_s, args.image_t, args.out)
    if args.command == "zoomin":
        return run_zoomin(settings, checkpoint, args.image_s, args.image_t, args.out)
    if args.command == "eval":
        return run_eval(settings, args.pred_dir, args.gt_dir, args.report)
    if args.command == "viz":
        return run_viz(settings, checkpoint, args.image_s, args.image_t, args.x, args.y, args.out)
    if args.command == "ablation":
        variants = [VariantTag(v) for v in args.variants] if args.variants else None
        return run_ablation(settings, args.data, args.out, variants)
    raise UsageError(f"Unknown command '{args.command}'")


def main(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        settings = _settings(args)
        set_precision(settings.precision)
        pin_intra_op_threads()
        seed_everything(settings.seed)
        result = dispatch(args, settings)
    except UFCError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Command-line entry point: `clockdistill <subcommand> [flags]`
"""

import argparse
import logging
import sys
from collections.abc import Sequence

from pydantic import ValidationError

from clockdistill.checkpoints import load_detector
from clockdistill.exceptions import ClockDistillError
from clockdistill.harness.attention import export_attention, mean_attention_mass
from clockdistill.harness.reports import (
    format_ablation_table,
    format_report,
    write_summary,
)
from clockdistill.harness.schemas import ExperimentConfig
from clockdistill.harness.services import (
    distill_student,
    evaluate,
    generate_splits,
    load_split,
    run_component_ablation,
    run_layer_ablation,
    train_teacher,
)
from clockdistill.logging import configure_logging

logger = logging.getLogger("harness")


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """
    Reads the JSON config (defaults when absent) and applies flag overrides
    """
    if args.config:
        with open(args.config) as f:
            config = ExperimentConfig.model_validate_json(f.read())
    else:
        config = ExperimentConfig()
    update: dict[str, object] = {}
    if args.seed is not None:
        update["seed"] = args.seed
        update["seeds"] = [args.seed]
    if args.deterministic:
        update["deterministic"] = True
    if args.out:
        update["out_dir"] = args.out
    return config.model_copy(update=update)


def _gen_data(args: argparse.Namespace, config: ExperimentConfig) -> None:
    train, val = generate_splits(config)
    print(f"train: {train}\nval:   {val}")


def _train_teacher(args: argparse.Namespace, config: ExperimentConfig) -> None:
    result = train_teacher(config)
    print(format_report(f"teacher -> {result.checkpoint}", result.report))


def _distill(args: argparse.Namespace, config: ExperimentConfig) -> None:
    result = distill_student(config, args.teacher)
    print(format_report(f"student [{config.toggles.label}] -> {result.checkpoint}", result.report))


def _evaluate(args: argparse.Namespace, config: ExperimentConfig) -> None:
    split = args.split or config.val_dir
    report = evaluate(args.checkpoint, split)
    text = format_report(f"{args.checkpoint} on {split}", report)
    write_summary(config.out_dir, text)
    print(text)


def _export_attention(args: argparse.Namespace, config: ExperimentConfig) -> None:
    for path in export_attention(args.checkpoint, args.image, args.layer, config.out_dir):
        print(path)
    if args.split:
        model, _ = load_detector(args.checkpoint)
        mass = mean_attention_mass(
            model, load_split(args.split), config.attention_images, args.layer
        )
        print(f"attention mass inside boxes: {mass:.4f}")


def _ablate_components(args: argparse.Namespace, config: ExperimentConfig) -> None:
    rows = run_component_ablation(config, args.teacher)
    print(format_ablation_table("Component ablation", rows))


def _ablate_layers(args: argparse.Namespace, config: ExperimentConfig) -> None:
    rows = run_layer_ablation(config, args.teacher)
    print(format_ablation_table("Depth ablation", rows))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument(
        "--deterministic",
        action="store_true",
        help="deterministic kernels, one thread, no loader workers",
    )
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(
        prog="clockdistill",
        description="Location and context aware distillation for DETR-style detectors",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", parents=[common], help="write train/val splits").set_defaults(
        handler=_gen_data
    )
    commands.add_parser("train-teacher", parents=[common], help="train the teacher").set_defaults(
        handler=_train_teacher
    )

    distill = commands.add_parser("distill", parents=[common], help="distill a student")
    distill.add_argument("--teacher", required=True, help="teacher checkpoint")
    distill.set_defaults(handler=_distill)

    evaluate_cmd = commands.add_parser("evaluate", parents=[common], help="COCO-style AP")
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--split", default=None, help="split dir or annotation file")
    evaluate_cmd.set_defaults(handler=_evaluate)

    export = commands.add_parser("export-attn", parents=[common], help="attention heatmaps")
    export.add_argument("--checkpoint", required=True)
    export.add_argument("--image", required=True, help="PNG image")
    export.add_argument("--layer", default="last", help="'last', 'mean' or a layer index")
    export.add_argument(
        "--split", default=None, help="also report the attention mass inside boxes"
    )
    export.set_defaults(handler=_export_attention)

    for name, handler in (
        ("ablate-components", _ablate_components),
        ("ablate-layers", _ablate_layers),
    ):
        ablation = commands.add_parser(name, parents=[common])
        ablation.add_argument("--teacher", required=True, help="teacher checkpoint")
        ablation.set_defaults(handler=handler)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        config = load_config(args)
        args.handler(args, config)
    except (ClockDistillError, ValidationError) as e:
        logger.error("Command failed", extra={"command": args.command, "error": str(e)})
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Batch command-line interface.

Subcommands: synth, train, segment, volume, intake, eval, report.
Exit codes: 0 success, 2 I/O or validation failure, 3 training failure,
4 empty pipeline result. Logs go to stderr; machine-readable results are
written to files under --out.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataio, synthkit
from .context import CooccurrenceTable
from .core import DataError
from .intake import IntakeResult, render_intake_report
from .pipeline import (
    EmptySegmentationError,
    PipelineConfig,
    dataset_intrinsics,
    dataset_plate_models,
    evaluate_dataset,
    process_meal,
    train_on_dataset,
)
from .segnet import TrainingDivergedError, load_checkpoint

log = logging.getLogger("trayscan")

EXIT_OK = 0
EXIT_DATA = 2
EXIT_TRAIN = 3
EXIT_EMPTY = 4


def _build_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "use_gt_labels", False):
        cfg.use_gt_labels = True
    if getattr(args, "dump_stages", False):
        cfg.dump_stages = True
    for key in ("data", "checkpoint", "cooccurrence", "plate_models"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, "dataset_root" if key == "data" else key, str(value))
    if getattr(args, "format", None):
        cfg.report_format = args.format
    if getattr(args, "max_epochs", None) is not None:
        import dataclasses

        cfg.train = dataclasses.replace(cfg.train, max_epochs=args.max_epochs)
    return cfg


def cmd_synth(args) -> int:
    try:
        dirs = synthkit.make_dataset(
            n_meals=args.n,
            seed=args.seed if args.seed is not None else 0,
            out_dir=args.out,
            width=args.width,
            height=args.height,
            noise_sigma=args.noise_sigma,
            dropout=args.dropout,
        )
    except OSError as exc:
        log.error("cannot write dataset: %s", exc)
        return EXIT_DATA
    log.info("wrote %d meals under %s", len(dirs), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    try:
        outputs = train_on_dataset(cfg, args.out)
    except TrainingDivergedError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_TRAIN
    log.info("checkpoint: %s", outputs["checkpoint"])
    log.info("co-occurrence table: %s", outputs["cooccurrence"])
    if outputs["history"]["val_loss"]:
        log.info("final val loss: %.6f", outputs["history"]["val_loss"][-1])
    else:
        log.warning("no training epochs ran")
    return EXIT_OK


def _load_meal_assets(args, cfg):
    meal_dir = Path(args.meal)
    record = dataio.load_meal_record(meal_dir)
    root = meal_dir.parent
    intrinsics = dataset_intrinsics(root)
    models = dataset_plate_models(cfg, root)
    net = table = None
    if not cfg.use_gt_labels:
        if cfg.checkpoint is None or cfg.cooccurrence is None:
            raise DataError("checkpoint and co-occurrence table required "
                            "(or pass --use-gt-labels)")
        net, _ = load_checkpoint(cfg.checkpoint)
        table = CooccurrenceTable.load(cfg.cooccurrence)
    return record, intrinsics, models, net, table


def cmd_segment(args) -> int:
    cfg = _build_config(args)
    record, intrinsics, models, net, table = _load_meal_assets(args, cfg)
    from .pipeline import _labels_for_frame  # stage reuse

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ref in (("before", record.before), ("after", record.after)):
        if ref is None:
            continue
        frame = dataio.load_frame(ref.color_path, ref.depth_path, intrinsics)
        food, plate, seg = _labels_for_frame(ref, frame, cfg, net, table)
        dataio.save_label_map(food, out / f"{record.meal_id}_{name}_food.png")
        dataio.save_label_map(plate, out / f"{record.meal_id}_{name}_plate.png")
        if cfg.dump_stages and seg is not None:
            dataio.save_probability_map(seg.food_probs, out / f"{record.meal_id}_{name}.pmap")
            dataio.save_probability_map(
                seg.food_probs_refined, out / f"{record.meal_id}_{name}_refined.pmap"
            )
    log.info("segmentation written under %s", out)
    return EXIT_OK


def _run_intake(args, write_report: bool):
    cfg = _build_config(args)
    record, intrinsics, models, net, table = _load_meal_assets(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = process_meal(
        record, intrinsics, models, cfg, net=net, table=table,
        dump_dir=out if cfg.dump_stages else None,
    )
    dataio.write_json_atomic(out / f"{record.meal_id}_intake.json", result.to_payload())
    if write_report:
        doc = render_intake_report(result, cfg.report_format)
        suffix = "csv" if cfg.report_format == "csv" else "txt"
        path = out / f"{record.meal_id}_report.{suffix}"
        path.write_text(doc, encoding="utf-8")
        log.info("report: %s", path)
    return result


def cmd_volume(args) -> int:
    _run_intake(args, write_report=False)
    return EXIT_OK


def cmd_intake(args) -> int:
    _run_intake(args, write_report=True)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    report = evaluate_dataset(cfg, out_dir=args.out)
    log.info("evaluated %d meals; report under %s", report.n_meals, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    data = json.loads(Path(args.intake).read_text(encoding="utf-8"))
    result = IntakeResult.from_payload(data)
    doc = render_intake_report(result, args.format)
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8")
        log.info("report: %s", args.out)
    else:
        sys.stdout.write(doc)
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="pipeline config JSON; flags override its fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--dump-stages", action="store_true", dest="dump_stages")
    p.add_argument("--use-gt-labels", action="store_true", dest="use_gt_labels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trayscan",
        description="RGB-D meal tray analysis: segmentation, volumetry, nutrient intake",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D meal dataset")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=400)
    p.add_argument("--height", type=int, default=300)
    p.add_argument("--noise-sigma", type=float, default=0.001, dest="noise_sigma")
    p.add_argument("--dropout", type=float, default=0.01)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the segmentation network on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.set_defaults(func=cmd_train)

    for name, helptext, func in (
        ("segment", "segment one meal's frames", cmd_segment),
        ("volume", "per-item volumes for one meal", cmd_volume),
        ("intake", "full intake pipeline for one meal", cmd_intake),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--meal", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--cooccurrence")
        p.add_argument("--plate-models", dest="plate_models")
        if name == "intake":
            p.add_argument("--format", choices=("text", "csv"))
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate intake accuracy on the test split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--cooccurrence")
    p.add_argument("--plate-models", dest="plate_models")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render an intake.json as text or CSV")
    p.add_argument("--intake", required=True)
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        log.error("%s", exc)
        return EXIT_TRAIN
    except EmptySegmentationError as exc:
        log.error("%s", exc)
        return EXIT_EMPTY
    except (DataError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: subset extraction, evaluation, ROC export,
gradient audit, and toy training.

Exit codes are a stable contract: 0 success, 1 I/O failure, 2 bad input or
schema, 3 verification (gradient-audit) failure, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import dataio, metrics, trainkit
from .geometry import AnchorSpec

EXIT_OK = 0
EXIT_IO = 1
EXIT_INPUT = 2
EXIT_VERIFY = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    """Configuration file violates the strict schema."""


def thread_cap() -> int:
    """Parallelism cap from DENSEDET_THREADS (0 = auto).

    All built-in code paths are single-threaded for determinism; the cap
    bounds any optional parallel execution layered on top.
    """
    raw = os.environ.get("DENSEDET_THREADS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"DENSEDET_THREADS must be an integer >= 0, got {raw!r}")
    if value < 0:
        raise ConfigError(f"DENSEDET_THREADS must be >= 0, got {value}")
    return value


# ---------------------------------------------------------------------------
# Strict config schema for train-toy

_NUM = (int, float)

_CONFIG_SCHEMA: dict[str, dict[str, tuple]] = {
    "train": {
        "epochs": (int,),
        "learning_rate": _NUM,
        "seed": (int,),
        "with_dense_head": (bool,),
        "lambda_obj": _NUM,
        "lambda_box": _NUM,
        "lambda_cse": _NUM,
    },
    "data": {
        "num_train_scenes": (int,),
        "num_val_scenes": (int,),
        "image_size": (int,),
        "mesh_vertices": (int,),
        "seed": (int,),
    },
    "model": {
        "trunk_channels": (list,),
        "embed_dim": (int,),
        "roi_size": (int,),
    },
    "anchors": {
        "base_size": _NUM,
        "scales": (list,),
        "ratios": (list,),
        "stride": (int,),
    },
    "metrics": {
        "iou_min": _NUM,
        "iou_max": _NUM,
        "iou_step": _NUM,
    },
    "subset": {
        "category_name": (str,),
        "min_instances": (int,),
        "max_images": (int, type(None)),
        "seed": (int,),
    },
}

DEFAULT_CONFIG: dict = {
    "train": {
        "epochs": 100,
        "learning_rate": 0.5,
        "seed": 1,
        "with_dense_head": True,
        "lambda_obj": 1.0,
        "lambda_box": 1.0,
        "lambda_cse": 1.0,
    },
    "data": {
        "num_train_scenes": 6,
        "num_val_scenes": 4,
        "image_size": 64,
        "mesh_vertices": 64,
        "seed": 7,
    },
    "model": {"trunk_channels": [8, 16], "embed_dim": 16, "roi_size": 7},
    "anchors": {"base_size": 4.0, "scales": [3.0, 5.0, 7.0], "ratios": [0.5, 1.0, 2.0], "stride": 4},
    "metrics": {"iou_min": 0.5, "iou_max": 0.95, "iou_step": 0.05},
    "subset": {"category_name": "person", "min_instances": 1, "max_images": None, "seed": 0},
}


def validate_config(obj: dict) -> dict:
    """Merge a user config over the defaults, rejecting unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    merged = {sec: dict(vals) for sec, vals in DEFAULT_CONFIG.items()}
    for section, content in obj.items():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in content.items():
            if key not in _CONFIG_SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            allowed = _CONFIG_SCHEMA[section][key]
            # bool is an int subclass; only accept it where bool is listed
            type_ok = isinstance(value, allowed) and not (
                isinstance(value, bool) and bool not in allowed
            )
            if not type_ok:
                raise ConfigError(
                    f"config key {section}.{key} has wrong type {type(value).__name__}"
                )
            merged[section][key] = value
    return merged


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} (offset {exc.pos})")
    return validate_config(obj)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_extract_subset(args) -> int:
    try:
        with open(args.annotations, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        print(f"error: cannot read {args.annotations}: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        ds = dataio.parse_coco(data)
        spec = dataio.SubsetSpec(
            category_name=args.category,
            min_instances=args.min_instances,
            max_images=args.max_images,
            seed=args.seed,
        )
        subset = dataio.extract_person_subset(ds, spec)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        with open(args.out, "wb") as fh:
            fh.write(dataio.serialize_coco(subset))
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"images={len(subset.images)} annotations={len(subset.annotations)}")
    return EXIT_OK


def _load_eval_inputs(gt_path: str, det_path: str, category: str):
    with open(gt_path, "rb") as fh:
        ds = dataio.parse_coco(fh.read())
    with open(det_path, "rb") as fh:
        dets = dataio.read_detections(fh.read())
    gts = dataio.coco_ground_truths(ds, category)
    cat_id = ds.category_id(category)
    dets = [d for d in dets if d.category_id == cat_id]
    return dets, gts


def _cmd_evaluate(args) -> int:
    try:
        dets, gts = _load_eval_inputs(args.gt, args.dets, args.category)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    n_steps = int(round((args.iou_max - args.iou_min) / args.iou_step)) + 1
    thresholds = [round(args.iou_min + k * args.iou_step, 6) for k in range(max(n_steps, 1))]
    try:
        summary = metrics.coco_summary(dets, gts, iou_thresholds=thresholds)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if args.format == "csv":
        sys.stdout.write(metrics.format_summary_csv(summary))
    else:
        sys.stdout.write(metrics.format_summary_text(summary))
    return EXIT_OK


def _cmd_roc(args) -> int:
    try:
        dets, gts = _load_eval_inputs(args.gt, args.dets, args.category)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        curve = metrics.roc_auc(dets, gts, args.iou)
        _, accuracy = metrics.best_threshold_accuracy(dets, gts, args.iou)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(metrics.format_roc_csv(curve))
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"auc={curve.auc:.6f}")
    print(f"best_threshold_accuracy={accuracy:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = trainkit.run_gradient_audit(
        seed=args.seed, rounds=args.rounds, _corrupt=args.corrupt
    )
    failed = []
    for name, err in results.items():
        threshold = trainkit.GRADCHECK_THRESHOLDS[name]
        status = "ok" if err < threshold else "FAIL"
        print(f"{name} max_rel_error={err:.3e} threshold={threshold:.0e} {status}")
        if err >= threshold:
            failed.append(name)
    if failed:
        print(f"error: gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _build_scenes(data_cfg: dict):
    train = [
        dataio.generate_synthetic_scene(
            seed=data_cfg["seed"] + i,
            vertex_count=data_cfg["mesh_vertices"],
            image_size=data_cfg["image_size"],
        )
        for i in range(data_cfg["num_train_scenes"])
    ]
    val = [
        dataio.generate_synthetic_scene(
            seed=data_cfg["seed"] + 1000 + i,
            vertex_count=data_cfg["mesh_vertices"],
            image_size=data_cfg["image_size"],
        )
        for i in range(data_cfg["num_val_scenes"])
    ]
    return train, val


def _cmd_train_toy(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else validate_config({})
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    try:
        train_cfg = trainkit.TrainConfig(**cfg["train"])
        anchors = AnchorSpec(
            base_size=float(cfg["anchors"]["base_size"]),
            scales=tuple(float(s) for s in cfg["anchors"]["scales"]),
            ratios=tuple(float(r) for r in cfg["anchors"]["ratios"]),
            stride=cfg["anchors"]["stride"],
        )
        train_scenes, val_scenes = _build_scenes(cfg["data"])
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    try:
        report = trainkit.train_toy_detector(
            train_cfg,
            train_scenes,
            val_scenes,
            anchors=anchors,
            trunk_channels=tuple(cfg["model"]["trunk_channels"]),
            embed_dim=cfg["model"]["embed_dim"],
            roi_size=cfg["model"]["roi_size"],
        )
    except trainkit.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    try:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(trainkit.report_to_json(report))
        with open(os.path.join(args.out, "losses.csv"), "w", encoding="utf-8") as fh:
            fh.write(trainkit.losses_to_csv(report))
    except OSError as exc:
        print(f"error: cannot write into {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO

    print(metrics.format_summary_row(report.final_summary.row()))
    if args.baseline_report:
        try:
            with open(args.baseline_report, "r", encoding="utf-8") as fh:
                baseline = trainkit.report_from_json(fh.read())
        except OSError as exc:
            print(f"error: cannot read {args.baseline_report}: {exc}", file=sys.stderr)
            return EXIT_IO
        except (ValueError, KeyError) as exc:
            print(f"error: bad baseline report: {exc}", file=sys.stderr)
            return EXIT_INPUT
        sys.stdout.write(trainkit.compare_runs(baseline, report).render())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densedet",
        description="Person-detection toolkit: dataset subsets, COCO-style "
        "evaluation, ROC export, gradient audit, and toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-subset", help="carve a single-category COCO subset")
    p.add_argument("--annotations", required=True, help="input COCO instances JSON")
    p.add_argument("--category", default="person", help="category name to keep (default: person)")
    p.add_argument("--min-instances", type=int, default=1, dest="min_instances",
                   help="minimum instances per kept image (default: 1)")
    p.add_argument("--max-images", type=int, default=None, dest="max_images",
                   help="seeded uniform sample size (default: keep all)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    p.add_argument("--out", required=True, help="output COCO JSON path")
    p.set_defaults(func=_cmd_extract_subset)

    p = sub.add_parser("evaluate", help="COCO-style summary for one category")
    p.add_argument("--gt", required=True, help="COCO instances JSON with ground truth")
    p.add_argument("--dets", required=True, help="COCO results JSON with detections")
    p.add_argument("--category", default="person", help="category to evaluate (default: person)")
    p.add_argument("--iou-min", type=float, default=0.5, dest="iou_min",
                   help="lowest IoU threshold of the sweep (default: 0.5)")
    p.add_argument("--iou-max", type=float, default=0.95, dest="iou_max",
                   help="highest IoU threshold of the sweep (default: 0.95)")
    p.add_argument("--iou-step", type=float, default=0.05, dest="iou_step",
                   help="sweep step (default: 0.05)")
    p.add_argument("--format", choices=("text", "csv"), default="text",
                   help="output format (default: text)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("roc", help="export the ROC curve and print its AUC")
    p.add_argument("--gt", required=True, help="COCO instances JSON with ground truth")
    p.add_argument("--dets", required=True, help="COCO results JSON with detections")
    p.add_argument("--category", default="person", help="category to evaluate (default: person)")
    p.add_argument("--iou", type=float, default=0.5, help="TP/FP labeling threshold (default: 0.5)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_roc)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all manual gradients")
    p.add_argument("--seed", type=int, default=0, help="base seed (default: 0)")
    p.add_argument("--rounds", type=int, default=5, help="instances per check (default: 5)")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)  # test hook
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the toy detector on synthetic scenes")
    p.add_argument("--config", default=None, help="JSON config file (strict schema; defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory for report.json and losses.csv")
    p.add_argument("--baseline-report", default=None, dest="baseline_report",
                   help="previous report.json to diff against after training")
    p.set_defaults(func=_cmd_train_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        thread_cap()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points.

Verbs: ``train``, ``evaluate``, ``crop``, ``synth`` (dataset generation), and
``heatmap`` (pseudo-ground-truth export for inspection). Exit codes: 0 on
success, 2 for validation/configuration problems, 3 for runtime failures
such as diverged training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import (DatasetIndex, SynthSpec, dataset_stats, load_annotations,
                   save_annotations, synth_generate)
from .errors import (CheckpointError, CropperError, TrainingDivergedError,
                     ValidationError)
from .geometry import Box, CandidateParams, Size, baseline_a, baseline_b, generate_candidates
from .heatmap import pseudo_heatmap, select_highly_scored, to_grayscale
from .network import ModelConfig, build_model, score_crops
from .training import (Trainer, TrainSchedule, evaluate_baseline,
                       evaluate_gaicd, evaluate_iou_disp)

ABLATION_CHOICES = ("partition", "human", "residual", "content", "graph")


def _parse_size(text: str) -> Size:
    try:
        w, h = text.lower().split("x")
        return Size(int(w), int(h))
    except ValueError as exc:
        raise ValidationError(f"expected WIDTHxHEIGHT, got {text!r}") from exc


def _parse_box(text: str) -> Box:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ValidationError(f"expected x1,y1,x2,y2 floats, got {text!r}") from exc
    return Box.from_list(values)


def _load_pixels(path: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"config {path} must be a JSON object")
    return raw


def _apply_ablations(config: ModelConfig, ablate: list[str]) -> ModelConfig:
    off = set(ablate)
    updates: dict = {}
    if "partition" in off:
        updates["use_partition"] = False
        updates["use_human_feature"] = False
    if "human" in off:
        updates["use_human_feature"] = False
    if "residual" in off:
        updates["use_residual"] = False
    if "content" in off:
        updates["use_content"] = False
    if "graph" in off:
        updates["use_graph"] = False
    return replace(config, **updates) if updates else config


def cmd_train(args: argparse.Namespace) -> int:
    raw = _load_config_file(args.config)
    model_cfg = _apply_ablations(ModelConfig.from_dict(raw.get("model", {})), args.ablate)
    model_cfg.validate()
    sched_raw = dict(raw.get("schedule", {}))
    if args.seed is not None:
        sched_raw["seed"] = args.seed
    if args.content_weight is not None:
        sched_raw["content_weight"] = args.content_weight
    if "content" in args.ablate:
        sched_raw["content_weight"] = 0.0
    schedule = TrainSchedule.from_dict(sched_raw)

    index = load_annotations(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    model = build_model(model_cfg, seed=schedule.seed)
    trainer = Trainer(model, index, schedule,
                      log_path=log_path, checkpoint_path=out / "checkpoint.zip",
                      data_root=Path(args.data).parent)
    result = trainer.run()
    summary = {
        "configuration": model_cfg.label(),
        "epochs_run": result.epochs_run,
        "last_epoch": result.last_epoch,
        "final_loss": result.history[-1].mean if result.history else None,
        "checkpoint": str(out / "checkpoint.zip"),
        "log": str(log_path),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    index = load_annotations(args.data)
    root = Path(args.data).parent
    if args.baseline:
        if args.protocol != "iou-disp":
            raise ValidationError("baselines are best-crop heuristics; use --protocol iou-disp")
        report = evaluate_baseline(index, args.baseline)
    else:
        if not args.checkpoint:
            raise ValidationError("evaluate needs a checkpoint (or --baseline a|b)")
        loaded = load_checkpoint(args.checkpoint)
        if args.protocol == "gaicd":
            report = evaluate_gaicd(loaded.model, index, root)
        else:
            report = evaluate_iou_disp(loaded.model, index, data_root=root)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json())
    return 0


def _draw_overlay(pixels: np.ndarray, box: Box, width: int = 3) -> np.ndarray:
    """Copy of the image with the crop boundary painted."""
    out = (np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8).copy()
    h, w = out.shape[:2]
    x1, y1 = max(int(box.x1), 0), max(int(box.y1), 0)
    x2, y2 = min(int(box.x2), w), min(int(box.y2), h)
    color = np.array([255, 64, 64], dtype=np.uint8)
    out[y1:min(y1 + width, h), x1:x2] = color
    out[max(y2 - width, 0):y2, x1:x2] = color
    out[y1:y2, x1:min(x1 + width, w)] = color
    out[y1:y2, max(x2 - width, 0):x2] = color
    return out


def cmd_crop(args: argparse.Namespace) -> int:
    from PIL import Image

    pixels = _load_pixels(args.image)
    h, w = pixels.shape[:2]
    size = Size(float(w), float(h))
    human_box = _parse_box(args.human_box) if args.human_box else None
    if human_box is not None:
        human_box.validate_within(size)
    candidates = generate_candidates(size, CandidateParams())

    heat = None
    if args.baseline:
        if human_box is None:
            raise ValidationError("baselines need --human-box")
        best = baseline_a(human_box) if args.baseline == "a" else \
            baseline_b(human_box, candidates, size)
        result = {"box": best.as_list(), "score": None, "method": f"baseline_{args.baseline}"}
    else:
        if not args.checkpoint:
            raise ValidationError("crop needs a checkpoint (or --baseline a|b)")
        loaded = load_checkpoint(args.checkpoint)
        scores, heat = score_crops(loaded.model, pixels, human_box, candidates)
        idx = int(np.argmax(scores))
        best = candidates[idx]
        result = {"box": best.as_list(), "score": float(scores[idx]),
                  "method": loaded.model.config.label()}
    print(json.dumps(result, sort_keys=True))

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(_draw_overlay(pixels, best)).save(out / "overlay.png")
        if heat is not None:
            Image.fromarray(to_grayscale(heat), mode="L").save(out / "heatmap.png")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(seed=args.seed, count=args.count,
                     image_size=_parse_size(args.image_size), split=args.split)
    index = synth_generate(spec)
    save_annotations(index, args.out)
    print(json.dumps(dataset_stats(index), indent=2, sort_keys=True))
    return 0


def _safe_name(image_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in image_id)


def cmd_heatmap(args: argparse.Namespace) -> int:
    from PIL import Image

    index = load_annotations(args.data)
    if index.mean_score is None:
        raise ValidationError(f"{args.data} has no scored crops; cannot build heatmaps")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = skipped = 0
    for img in index.images:
        if not img.crops:
            skipped += 1
            continue
        map_size = _parse_size(args.map_size) if args.map_size else Size(
            int(img.size.width), int(img.size.height))
        grid = pseudo_heatmap(select_highly_scored(img.crops, index.mean_score),
                              img.size, map_size)
        Image.fromarray(to_grayscale(grid), mode="L").save(out / f"{_safe_name(img.image_id)}.png")
        written += 1
    print(json.dumps({"written": written, "skipped": skipped,
                      "threshold": index.mean_score}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="humancrop",
        description="Human-centric image cropping: train, evaluate, and apply "
                    "a crop scoring model.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model on an annotation file")
    train.add_argument("--data", required=True, help="annotation JSON")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--config", help="JSON with 'model' and 'schedule' sections")
    train.add_argument("--seed", type=int, help="override the schedule RNG seed")
    train.add_argument("--lambda", dest="content_weight", type=float,
                       help="content loss weight (default 1.0)")
    train.add_argument("--ablate", action="append", choices=ABLATION_CHOICES,
                       default=[], help="disable a component (repeatable)")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint or baseline")
    ev.add_argument("checkpoint", nargs="?", help="checkpoint archive")
    ev.add_argument("--data", required=True)
    ev.add_argument("--protocol", choices=("gaicd", "iou-disp"), default="gaicd")
    ev.add_argument("--baseline", choices=("a", "b"),
                    help="evaluate a human-box heuristic instead of a model")
    ev.add_argument("--out", help="write the JSON report here")
    ev.set_defaults(func=cmd_evaluate)

    crop = sub.add_parser("crop", help="return the best crop for one image")
    crop.add_argument("checkpoint", nargs="?", help="checkpoint archive")
    crop.add_argument("--image", required=True)
    crop.add_argument("--human-box", help="x1,y1,x2,y2 in pixels")
    crop.add_argument("--baseline", choices=("a", "b"))
    crop.add_argument("--out", help="directory for overlay.png / heatmap.png")
    crop.set_defaults(func=cmd_crop)

    synth = sub.add_parser("synth", help="generate a synthetic scored dataset")
    synth.add_argument("--out", required=True, help="annotation JSON to write")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--count", type=int, default=16)
    synth.add_argument("--split", default="train")
    synth.add_argument("--image-size", default="256x256")
    synth.set_defaults(func=cmd_synth)

    heat = sub.add_parser("heatmap", help="export pseudo-ground-truth heatmaps")
    heat.add_argument("--data", required=True)
    heat.add_argument("--out", required=True, help="output directory for PNGs")
    heat.add_argument("--map-size", help="WIDTHxHEIGHT (default: image size)")
    heat.set_defaults(func=cmd_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CropperError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

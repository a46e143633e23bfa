"""Training loop, learning-rate schedule, and evaluation drivers.

One batch is one image with a random sample of its annotated crops, matching
the per-image loss definitions. Human-centric and other images interleave in
a seeded per-epoch shuffle. Every step appends one JSON line to the training
log, and the checkpoint (with optimizer moments) is rewritten after each
epoch, so runs are resumable and two runs with the same seed produce
identical logs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import AnnotatedImage, DatasetIndex, ScoredCrop
from .errors import ConfigError, TrainingDivergedError, ValidationError
from .geometry import (Box, CandidateParams, Size, baseline_a, baseline_b,
                       generate_candidates)
from .heatmap import pseudo_heatmap, select_highly_scored
from .losses import LossBreakdown, total_loss
from .metrics import EvalReport, gaicd_report, iou_disp_report
from .network import CropScorer, preprocess_image, score_crops

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    """Optimization hyperparameters: warmup from zero, then cosine decay."""

    epochs: int = 80
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    crops_per_image: int = 64
    content_weight: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must satisfy 0 <= warmup < epochs, got "
                f"{self.warmup_epochs} vs {self.epochs}")
        if self.base_lr < 0 or self.weight_decay < 0 or self.content_weight < 0:
            raise ConfigError("base_lr, weight_decay, and content_weight must be >= 0")
        if self.crops_per_image < 2:
            raise ConfigError(f"crops_per_image must be >= 2 (the ranking loss "
                              f"needs pairs), got {self.crops_per_image}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainSchedule":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        sched = cls(**raw)
        sched.validate()
        return sched


def learning_rate(schedule: TrainSchedule, progress: float) -> float:
    """Learning rate at fractional epoch ``progress`` in [0, epochs].

    Linear from 0 to the base rate across the warmup epochs, then cosine
    decay to 0 at the end of the run.
    """
    if not 0 <= progress <= schedule.epochs:
        raise ValidationError(f"progress must lie in [0, {schedule.epochs}], got {progress}")
    if schedule.warmup_epochs > 0 and progress <= schedule.warmup_epochs:
        return schedule.base_lr * progress / schedule.warmup_epochs
    t = (progress - schedule.warmup_epochs) / (schedule.epochs - schedule.warmup_epochs)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class _Sample:
    image_id: str
    tensor: torch.Tensor
    size: Size
    human_box: Box | None
    boxes: list[Box]
    scores: np.ndarray
    all_crops: list[ScoredCrop]
    heat_target: torch.Tensor | None = None


@dataclass
class EpochStats:
    epoch: int
    steps: int
    lr_last: float
    mean: dict[str, float]


@dataclass
class TrainResult:
    epochs_run: int
    last_epoch: int
    history: list[EpochStats] = field(default_factory=list)


class Trainer:
    """Fits a :class:`CropScorer` to one annotated training split."""

    def __init__(self, model: CropScorer, index: DatasetIndex, schedule: TrainSchedule,
                 *, log_path: str | Path | None = None,
                 checkpoint_path: str | Path | None = None,
                 data_root: Path | None = None) -> None:
        schedule.validate()
        if not index.images:
            raise ValidationError(f"training split {index.split!r} is empty")
        self.model = model
        self.schedule = schedule
        self.threshold = index.mean_score
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=schedule.base_lr,
                                           weight_decay=schedule.weight_decay)
        self.samples: list[_Sample] = []
        skipped = 0
        for img in index.images:
            if len(img.crops) < 2:
                skipped += 1
                continue
            self.samples.append(self._prepare(img, data_root))
        if skipped:
            log.warning("skipped %d image(s) with fewer than 2 crops", skipped)
        if not self.samples:
            raise ValidationError("no trainable images: every record has fewer than 2 crops")

    def _prepare(self, img: AnnotatedImage, root: Path | None) -> _Sample:
        tensor, size, (sx, sy) = preprocess_image(img.pixels(root), self.model.config.short_side)
        human = img.human_box.scaled(sx, sy) if img.human_box is not None else None
        crops = [ScoredCrop(box=c.box.scaled(sx, sy), score=c.score) for c in img.crops]
        return _Sample(
            image_id=img.image_id, tensor=tensor, size=size, human_box=human,
            boxes=[c.box for c in crops],
            scores=np.asarray([c.score for c in crops], dtype=np.float32),
            all_crops=crops,
        )

    def _heat_target(self, sample: _Sample, shape: tuple[int, int]) -> torch.Tensor:
        if sample.heat_target is None or sample.heat_target.shape[-2:] != shape:
            selected = select_highly_scored(sample.all_crops, self.threshold)
            grid = pseudo_heatmap(selected, sample.size, Size(shape[1], shape[0]))
            sample.heat_target = torch.from_numpy(grid).to(torch.float32)
        return sample.heat_target

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def _step(self, sample: _Sample, rng: np.random.Generator,
              epoch: int, step: int) -> LossBreakdown:
        n = len(sample.boxes)
        if n > self.schedule.crops_per_image:
            keep = rng.choice(n, size=self.schedule.crops_per_image, replace=False)
            boxes = [sample.boxes[int(i)] for i in keep]
            y = torch.from_numpy(sample.scores[keep])
        else:
            boxes = sample.boxes
            y = torch.from_numpy(sample.scores)
        out = self.model(sample.tensor, sample.human_box, boxes)
        lam = self.schedule.content_weight
        if lam > 0:
            target = self._heat_target(sample, tuple(out.heatmap.shape[-2:]))
            breakdown = total_loss(y, out.scores, heatmap_pred=out.heatmap.squeeze(0).squeeze(0),
                                   heatmap_gt=target, lam=lam)
        else:
            breakdown = total_loss(y, out.scores, lam=lam)
        if not torch.isfinite(breakdown.total):
            self._dump_divergence(sample, breakdown, epoch, step)
        self.optimizer.zero_grad()
        breakdown.total.backward()
        self.optimizer.step()
        return breakdown

    def _dump_divergence(self, sample: _Sample, breakdown: LossBreakdown,
                         epoch: int, step: int) -> None:
        payload = {"epoch": epoch, "step": step, "image": sample.image_id,
                   **breakdown.floats()}
        where = "(in memory)"
        if self.log_path is not None:
            dump = self.log_path.with_suffix(".diverged.json")
            dump.write_text(json.dumps(payload, indent=2))
            where = str(dump)
        raise TrainingDivergedError(
            f"non-finite loss at epoch {epoch} step {step} on image "
            f"{sample.image_id}; diagnostics: {where}")

    def run(self, *, start_epoch: int = 0,
            epoch_callback: Callable[[EpochStats], bool | None] | None = None) -> TrainResult:
        """Train from ``start_epoch`` to the schedule's end.

        ``epoch_callback`` runs after every epoch; returning True stops
        early (used for overfit-until-target runs).
        """
        result = TrainResult(epochs_run=0, last_epoch=start_epoch - 1)
        log_file = self.log_path.open("a") if self.log_path else None
        try:
            for epoch in range(start_epoch, self.schedule.epochs):
                rng = np.random.default_rng([self.schedule.seed, epoch])
                order = rng.permutation(len(self.samples))
                sums = {"reg": 0.0, "rank": 0.0, "cont": 0.0, "total": 0.0}
                lr = self.optimizer.param_groups[0]["lr"]
                for step, idx in enumerate(order):
                    lr = learning_rate(self.schedule, epoch + step / len(order))
                    self._set_lr(lr)
                    breakdown = self._step(self.samples[int(idx)], rng, epoch, step)
                    record = breakdown.log_record(epoch, step)
                    if log_file is not None:
                        log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    for key in sums:
                        sums[key] += record[key]
                if log_file is not None:
                    log_file.flush()
                stats = EpochStats(epoch=epoch, steps=len(order), lr_last=lr,
                                   mean={k: v / len(order) for k, v in sums.items()})
                result.history.append(stats)
                result.epochs_run += 1
                result.last_epoch = epoch
                if self.checkpoint_path is not None:
                    save_checkpoint(self.checkpoint_path, self.model, epoch=epoch,
                                    seed=self.schedule.seed, optimizer=self.optimizer,
                                    extra={"schedule": self.schedule.to_dict()})
                if epoch_callback is not None and epoch_callback(stats):
                    break
        finally:
            if log_file is not None:
                log_file.close()
        return result

    @torch.no_grad()
    def training_srcc(self) -> float:
        """Mean rank correlation over the training images (all crops)."""
        from .metrics import srcc

        self.model.eval()
        values = []
        for sample in self.samples:
            out = self.model(sample.tensor, sample.human_box, sample.boxes)
            values.append(srcc(sample.scores, out.scores.numpy()))
        self.model.train()
        return float(np.mean(values))


# ---------------------------------------------------------------------------
# Evaluation drivers


def evaluate_gaicd(model: CropScorer, index: DatasetIndex,
                   data_root: Path | None = None) -> EvalReport:
    """Score-protocol evaluation over a split's annotated crops."""
    if not index.images:
        raise ValidationError(f"split {index.split!r} is empty")
    rows = []
    for img in index.images:
        if not img.crops:
            continue
        pred, _ = score_crops(model, img.pixels(data_root), img.human_box,
                              [c.box for c in img.crops])
        rows.append((img.image_id, [c.score for c in img.crops], pred.tolist()))
    if not rows:
        raise ValidationError("no images with annotated crops to evaluate")
    report = gaicd_report(rows)
    report.configuration = model.config.label()
    return report


def _gt_boxes(crops: Sequence[ScoredCrop]) -> list[Box]:
    best = max(c.score for c in crops)
    return [c.box for c in crops if c.score == best]


def evaluate_iou_disp(model: CropScorer, index: DatasetIndex,
                      params: CandidateParams | None = None,
                      data_root: Path | None = None) -> EvalReport:
    """Generate candidates, return the top-1 crop, compare to the best
    annotated crop(s)."""
    params = params or CandidateParams()
    rows = []
    for img in index.images:
        if not img.crops:
            raise ValidationError(
                f"image {img.image_id} has no ground-truth crops; the iou-disp "
                f"protocol needs at least one per image")
        candidates = generate_candidates(img.size, params)
        pred, _ = score_crops(model, img.pixels(data_root), img.human_box, candidates)
        best = candidates[int(np.argmax(pred))]
        rows.append((img.image_id, best, _gt_boxes(img.crops), img.size))
    report = iou_disp_report(rows)
    report.configuration = model.config.label()
    return report


def evaluate_baseline(index: DatasetIndex, which: str,
                      params: CandidateParams | None = None) -> EvalReport:
    """IoU/Disp of the two human-box heuristics (no model involved)."""
    params = params or CandidateParams()
    rows = []
    skipped = 0
    for img in index.images:
        if img.human_box is None:
            skipped += 1
            continue
        if not img.crops:
            raise ValidationError(
                f"image {img.image_id} has no ground-truth crops; the iou-disp "
                f"protocol needs at least one per image")
        if which == "a":
            pred = baseline_a(img.human_box)
        elif which == "b":
            pred = baseline_b(img.human_box, generate_candidates(img.size, params), img.size)
        else:
            raise ValidationError(f"baseline must be 'a' or 'b', got {which!r}")
        rows.append((img.image_id, pred, _gt_boxes(img.crops), img.size))
    if not rows:
        raise ValidationError("no images with a human box; baselines need one")
    report = iou_disp_report(rows)
    report.configuration = f"baseline_{which}"
    if skipped:
        report.skipped["no_human_box"] = skipped
        log.warning("skipped %d image(s) without a human box", skipped)
    return report

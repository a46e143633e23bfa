"""Evaluation protocol: rank correlation, top-N accuracy, and IoU/Disp.

Two report flavors mirror the two benchmark protocols: score-annotated
datasets report mean SRCC / Acc5 / Acc10 over images, best-crop datasets
report mean IoU and boundary displacement of the returned top-1 crop.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ValidationError
from .geometry import Box, Size, boundary_displacement, iou

log = logging.getLogger(__name__)

# Acc_N definition: for each returned-crop budget K = 1..4, score whether any
# of the top-K predicted crops is in the ground-truth top N; the per-image
# value is the mean of the four indicators, expressed as a percentage.
RETURNED_CROP_BUDGETS = (1, 2, 3, 4)


def srcc(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Constant inputs have no rank variance; their correlation is defined
    as 0 so dataset means stay finite.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or y.size < 2:
        raise ValidationError(
            f"srcc expects two equal-length vectors of at least 2 scores, got {y.shape} vs {y_hat.shape}")
    if np.all(y == y[0]) or np.all(y_hat == y_hat[0]):
        return 0.0
    return float(stats.spearmanr(y, y_hat).statistic)


def _top_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by lowest index."""
    return np.argsort(-scores, kind="stable")[:k]


def acc_topN(gt_scores: Sequence[float], pred_scores: Sequence[float], n: int) -> float:
    """Averaged top-N accuracy for one image, as a percentage.

    Requires at least ``n`` crops; callers building dataset reports skip
    (and count) images that fall short.
    """
    gt = np.asarray(gt_scores, dtype=np.float64)
    pred = np.asarray(pred_scores, dtype=np.float64)
    if gt.shape != pred.shape or gt.ndim != 1:
        raise ValidationError("acc_topN expects equal-length 1-d score vectors")
    if gt.size < n:
        raise ValidationError(f"acc_topN needs at least {n} crops, got {gt.size}")
    gt_top = set(_top_indices(gt, n).tolist())
    ranked = _top_indices(pred, max(RETURNED_CROP_BUDGETS))
    hits = [float(any(int(i) in gt_top for i in ranked[:k])) for k in RETURNED_CROP_BUDGETS]
    return 100.0 * float(np.mean(hits))


def best_crop_eval(pred_best: Box, gt_crops: Sequence[Box], image_size: Size) -> tuple[float, float]:
    """(IoU, Disp) of a predicted crop against ground-truth crop(s).

    IoU is the best match over all ground-truth crops; Disp is measured
    against that same argmax crop (first on ties).
    """
    if not gt_crops:
        raise ValidationError("best_crop_eval requires at least one ground-truth crop")
    ious = [iou(pred_best, g) for g in gt_crops]
    best = int(np.argmax(ious))
    return ious[best], boundary_displacement(pred_best, gt_crops[best], image_size)


@dataclass
class EvalReport:
    """Dataset-level metric means plus per-image records for debugging."""

    protocol: str
    configuration: str | None = None
    srcc_mean: float | None = None
    acc5_mean: float | None = None
    acc10_mean: float | None = None
    iou_mean: float | None = None
    disp_mean: float | None = None
    records: list[dict] = field(default_factory=list)
    skipped: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        def cell(value: float | None, digits: int) -> str:
            return f"{value:8.{digits}f}" if value is not None else f"{'-':>8s}"

        name = self.configuration or "mean"
        width = max(12, len(name) + 2)
        if self.protocol == "gaicd":
            header = f"{'':{width}s}{'SRCC':>8s}{'Acc5':>8s}{'Acc10':>8s}"
            row = (f"{name:{width}s}{cell(self.srcc_mean, 4)}"
                   f"{cell(self.acc5_mean, 1)}{cell(self.acc10_mean, 1)}")
        else:
            header = f"{'':{width}s}{'IoU':>8s}{'Disp':>8s}"
            row = f"{name:{width}s}{cell(self.iou_mean, 4)}{cell(self.disp_mean, 4)}"
        return header + "\n" + row


def gaicd_report(per_image: Sequence[tuple[str, Sequence[float], Sequence[float]]]) -> EvalReport:
    """Score-protocol report from ``(image_id, gt_scores, pred_scores)`` rows.

    Images with too few crops for a given metric are skipped for that metric
    and counted in ``report.skipped``.
    """
    report = EvalReport(protocol="gaicd", skipped={"srcc": 0, "acc5": 0, "acc10": 0})
    srccs: list[float] = []
    acc5s: list[float] = []
    acc10s: list[float] = []
    for image_id, gt, pred in per_image:
        record: dict = {"image": image_id, "crops": len(gt)}
        if len(gt) >= 2:
            record["srcc"] = srcc(gt, pred)
            srccs.append(record["srcc"])
        else:
            report.skipped["srcc"] += 1
            log.warning("image %s has %d crops; skipped for SRCC", image_id, len(gt))
        for n, key, acc in ((5, "acc5", acc5s), (10, "acc10", acc10s)):
            if len(gt) >= n:
                record[key] = acc_topN(gt, pred, n)
                acc.append(record[key])
            else:
                report.skipped[key] += 1
                log.warning("image %s has %d crops; skipped for Acc%d", image_id, len(gt), n)
        report.records.append(record)
    report.srcc_mean = float(np.mean(srccs)) if srccs else None
    report.acc5_mean = float(np.mean(acc5s)) if acc5s else None
    report.acc10_mean = float(np.mean(acc10s)) if acc10s else None
    return report


def iou_disp_report(per_image: Sequence[tuple[str, Box, Sequence[Box], Size]]) -> EvalReport:
    """Best-crop report from ``(image_id, predicted, gt_crops, image_size)``."""
    report = EvalReport(protocol="iou-disp")
    ious: list[float] = []
    disps: list[float] = []
    for image_id, pred, gt_crops, image_size in per_image:
        iou_val, disp_val = best_crop_eval(pred, list(gt_crops), image_size)
        report.records.append({"image": image_id, "iou": iou_val, "disp": disp_val})
        ious.append(iou_val)
        disps.append(disp_val)
    if not ious:
        raise ValidationError("iou-disp report requires at least one image")
    report.iou_mean = float(np.mean(ious))
    report.disp_mean = float(np.mean(disps))
    return report

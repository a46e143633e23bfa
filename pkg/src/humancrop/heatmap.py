"""Pseudo ground-truth heatmaps of important content.

A heatmap is a float grid in [0, 1] at four times the basic feature map
resolution. The pseudo ground truth for an image is the softmax-weighted
average of the binary maps of its highly scored crops; the content loss is
the mean absolute difference against the predicted heatmap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ScoredCrop
from .errors import ShapeMismatchError, ValidationError
from .geometry import Size, rasterize


@dataclass(frozen=True)
class CropWeights:
    """Per-crop softmax weights; strictly positive, summing to 1."""

    weights: np.ndarray
    count: int


def select_highly_scored(crops: Sequence[ScoredCrop], threshold: float) -> list[ScoredCrop]:
    """Crops scoring strictly above ``threshold``, in input order.

    ``threshold`` is the mean ground-truth score over every crop of the
    training split. If nothing clears it, the single best-scored crop
    (lowest index on ties) is returned so the heatmap is never empty.
    """
    if not crops:
        raise ValidationError("cannot select highly scored crops from an empty list")
    selected = [c for c in crops if c.score > threshold]
    if selected:
        return selected
    best = max(range(len(crops)), key=lambda i: (crops[i].score, -i))
    return [crops[best]]


def softmax_weights(scores: Sequence[float]) -> CropWeights:
    """Softmax over raw scores, computed with max-subtraction."""
    if len(scores) == 0:
        raise ValidationError("softmax_weights requires at least one score")
    arr = np.asarray(scores, dtype=np.float64)
    ex = np.exp(arr - arr.max())
    return CropWeights(weights=ex / ex.sum(), count=len(scores))


def pseudo_heatmap(selected: Sequence[ScoredCrop], image_size: Size, map_size: Size) -> np.ndarray:
    """Weighted average of the selected crops' binary maps.

    Returns an ``(map_height, map_width)`` float64 grid in [0, 1].
    """
    weights = softmax_weights([c.score for c in selected]).weights
    grid = np.zeros((int(map_size.height), int(map_size.width)), dtype=np.float64)
    for w, crop in zip(weights, selected):
        grid += w * rasterize(crop.box, image_size, map_size)
    return np.clip(grid, 0.0, 1.0)


def content_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute difference between two equal-shape heatmaps."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"heatmap shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.abs(pred - gt).mean())


def to_grayscale(heatmap: np.ndarray) -> np.ndarray:
    """8-bit export form: ``round(255 * h)`` as uint8."""
    return np.rint(np.clip(heatmap, 0.0, 1.0) * 255.0).astype(np.uint8)

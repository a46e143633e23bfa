"""Score regression, pairwise ranking, and the combined training objective.

All functions accept torch tensors (differentiable) or plain sequences,
which are promoted to float64 tensors so reference values stay exact in
double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeMismatchError, ValidationError


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def smooth_l1(x):
    """Huber-style penalty: ``0.5 x^2`` for ``|x| < 1`` else ``|x| - 0.5``.

    Elementwise on tensors; a plain float argument returns a float.
    """
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(smooth_l1(_as_tensor(float(x))))


def regression_loss(y, y_hat) -> torch.Tensor:
    """Mean smooth-L1 of per-crop score errors."""
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    if y.shape != y_hat.shape or y.ndim != 1 or y.numel() < 1:
        raise ShapeMismatchError(
            f"regression_loss expects equal-length 1-d scores, got {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    return smooth_l1(y - y_hat).mean()


def ranking_loss(y, y_hat) -> torch.Tensor:
    """Pairwise hinge on predicted score gaps, normalized by pair count.

    For each unordered pair the penalty is ``max(0, sign(e) * (e - e_hat))``
    with ``e`` the ground-truth gap and ``e_hat`` the predicted gap; pairs
    with tied ground truth contribute nothing.
    """
    y, y_hat = _as_tensor(y), _as_tensor(y_hat)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ShapeMismatchError(
            f"ranking_loss expects equal-length 1-d scores, got {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    n = y.numel()
    if n < 2:
        raise ValidationError("ranking_loss requires at least two crops")
    e = y[:, None] - y[None, :]
    e_hat = y_hat[:, None] - y_hat[None, :]
    terms = torch.relu(torch.sign(e) * (e - e_hat))
    upper = torch.triu(torch.ones_like(terms, dtype=torch.bool), diagonal=1)
    return terms[upper].sum() / (n * (n - 1) / 2)


@dataclass
class LossBreakdown:
    """Components of one training step; ``total = reg + rank + lam * cont``."""

    reg: torch.Tensor
    rank: torch.Tensor
    cont: torch.Tensor
    total: torch.Tensor
    lam: float = 1.0

    def floats(self) -> dict[str, float]:
        return {"reg": float(self.reg.detach()), "rank": float(self.rank.detach()),
                "cont": float(self.cont.detach()), "total": float(self.total.detach())}

    def log_record(self, epoch: int, step: int) -> dict:
        return {"epoch": epoch, "step": step, **self.floats()}


def total_loss(y, y_hat, heatmap_pred=None, heatmap_gt=None, lam: float = 1.0) -> LossBreakdown:
    """Combined objective. ``heatmap_pred``/``heatmap_gt`` may be omitted
    when heatmap supervision is disabled, in which case ``cont`` is 0."""
    reg = regression_loss(y, y_hat)
    rank = ranking_loss(y, y_hat)
    if heatmap_pred is None or heatmap_gt is None:
        cont = torch.zeros((), dtype=reg.dtype)
    else:
        heatmap_pred, heatmap_gt = _as_tensor(heatmap_pred), _as_tensor(heatmap_gt)
        if heatmap_pred.shape != heatmap_gt.shape:
            raise ShapeMismatchError(
                f"heatmap shapes differ: {tuple(heatmap_pred.shape)} vs {tuple(heatmap_gt.shape)}")
        cont = (heatmap_pred - heatmap_gt).abs().mean()
    return LossBreakdown(reg=reg, rank=rank, cont=cont, total=reg + rank + lam * cont, lam=lam)

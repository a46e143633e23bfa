"""Boxes, partitions, binary crop maps, candidate grids, and box metrics.

All public sizes are ``Size(width, height)`` tuples; all grids returned as
numpy arrays are indexed ``[row, col]`` (row 0 is the top of the image).
Box coordinates are floats in source-image pixels unless a name says
otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import EmptyCandidatesError, InvalidBoxError, NoSubjectError, ValidationError


class Size(NamedTuple):
    """Width/height pair in pixels."""

    width: float
    height: float


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with strictly positive width and height."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x1) and math.isfinite(self.y1)
                and math.isfinite(self.x2) and math.isfinite(self.y2)):
            raise InvalidBoxError(f"non-finite box coordinates: {self.as_list()}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(
                f"degenerate box: expected x1 < x2 and y1 < y2, got {self.as_list()}")

    @classmethod
    def clipped(cls, x1: float, y1: float, x2: float, y2: float, image_size: Size) -> "Box":
        """Build a box clamped to the image extent; raises if it collapses."""
        w, h = image_size
        return cls(min(max(x1, 0.0), w), min(max(y1, 0.0), h),
                   min(max(x2, 0.0), w), min(max(y2, 0.0), h))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise InvalidBoxError(f"expected 4 coordinates, got {len(values)}")
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_list(self) -> list[float]:
        """Serialized form: ``[x1, y1, x2, y2]`` in pixel units."""
        return [self.x1, self.y1, self.x2, self.y2]

    def normalized(self, image_size: Size) -> tuple[float, float, float, float]:
        """Coordinates divided by image width/height."""
        w, h = image_size
        return (self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h)

    def scaled(self, sx: float, sy: float) -> "Box":
        return Box(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    def intersection_area(self, other: "Box") -> float:
        iw = min(self.x2, other.x2) - max(self.x1, other.x1)
        ih = min(self.y2, other.y2) - max(self.y1, other.y1)
        return max(iw, 0.0) * max(ih, 0.0)

    def validate_within(self, image_size: Size) -> None:
        w, h = image_size
        if self.x1 < 0 or self.y1 < 0 or self.x2 > w or self.y2 > h:
            raise InvalidBoxError(
                f"box {self.as_list()} extends outside image of size {w}x{h}")


# Cell indices are 1..9 row-major; cell 5 is the human box.
PARTITION_COUNT = 9


@dataclass(frozen=True)
class PartitionGrid:
    """Nine-cell decomposition of an image induced by the human box.

    ``x_edges`` and ``y_edges`` hold the four column/row boundaries
    ``(0, box_edge, box_edge, extent)``; cells flush against an image edge
    the human box also touches may be empty (zero width or height).
    """

    x_edges: tuple[float, float, float, float]
    y_edges: tuple[float, float, float, float]

    def cell(self, k: int) -> tuple[float, float, float, float]:
        """Rectangle ``(x1, y1, x2, y2)`` of cell ``k`` in 1..9."""
        if not 1 <= k <= PARTITION_COUNT:
            raise ValidationError(f"partition index must be 1..9, got {k}")
        row, col = divmod(k - 1, 3)
        return (self.x_edges[col], self.y_edges[row],
                self.x_edges[col + 1], self.y_edges[row + 1])

    def cells(self) -> Iterable[tuple[float, float, float, float]]:
        return (self.cell(k) for k in range(1, PARTITION_COUNT + 1))

    def cell_area(self, k: int) -> float:
        x1, y1, x2, y2 = self.cell(k)
        return (x2 - x1) * (y2 - y1)

    def cell_slices(self, image_size: Size, map_size: Size) -> list[tuple[slice, slice] | None]:
        """Assign each cell a ``(rows, cols)`` slice of an ``map_size`` grid.

        Grid cell centers are mapped into image coordinates and binned by the
        partition boundaries, so every grid cell lands in exactly one
        partition. Entries are ``None`` for partitions that cover no centers.
        """
        mw, mh = map_size
        col_band = _band_indices(self.x_edges[1], self.x_edges[2], image_size.width, int(mw))
        row_band = _band_indices(self.y_edges[1], self.y_edges[2], image_size.height, int(mh))
        out: list[tuple[slice, slice] | None] = []
        for k in range(1, PARTITION_COUNT + 1):
            row, col = divmod(k - 1, 3)
            rows = _band_slice(row_band, row)
            cols = _band_slice(col_band, col)
            out.append((rows, cols) if rows is not None and cols is not None else None)
        return out


def _band_indices(lo: float, hi: float, extent: float, n: int) -> np.ndarray:
    centers = (np.arange(n) + 0.5) * (extent / n)
    return np.where(centers < lo, 0, np.where(centers < hi, 1, 2))


def _band_slice(bands: np.ndarray, which: int) -> slice | None:
    idx = np.nonzero(bands == which)[0]
    if idx.size == 0:
        return None
    return slice(int(idx[0]), int(idx[-1]) + 1)


def partition_image(image_size: Size, human_box: Box) -> PartitionGrid:
    """Split the image into nine cells along the human box edges.

    Raises :class:`InvalidBoxError` if the box lies outside the image.
    """
    human_box.validate_within(image_size)
    w, h = image_size
    return PartitionGrid(
        x_edges=(0.0, human_box.x1, human_box.x2, float(w)),
        y_edges=(0.0, human_box.y1, human_box.y2, float(h)),
    )


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1]."""
    inter = a.intersection_area(b)
    union = a.area + b.area - inter
    return inter / union


def boundary_displacement(a: Box, b: Box, image_size: Size) -> float:
    """Mean offset of the four edges, horizontally normalized by image
    width and vertically by height."""
    w, h = image_size
    return (abs(a.x1 - b.x1) / w + abs(a.x2 - b.x2) / w
            + abs(a.y1 - b.y1) / h + abs(a.y2 - b.y2) / h) / 4.0


def rasterize(box: Box, image_size: Size, map_size: Size) -> np.ndarray:
    """Binary map of ``box`` on a ``map_size`` grid.

    A grid cell is 1 iff its center, mapped into image coordinates, falls in
    ``[x1, x2) x [y1, y2)``. A box covering no centers forces its nearest
    cell to 1 so every valid box has a non-empty map.
    """
    mw, mh = int(map_size.width), int(map_size.height)
    if mw < 1 or mh < 1:
        raise ValidationError(f"map size must be positive, got {map_size}")
    w, h = image_size
    cx = (np.arange(mw) + 0.5) * (w / mw)
    cy = (np.arange(mh) + 0.5) * (h / mh)
    inside_x = (cx >= box.x1) & (cx < box.x2)
    inside_y = (cy >= box.y1) & (cy < box.y2)
    grid = (inside_y[:, None] & inside_x[None, :]).astype(np.float64)
    if not grid.any():
        bx, by = box.center
        col = min(max(int(bx / (w / mw)), 0), mw - 1)
        row = min(max(int(by / (h / mh)), 0), mh - 1)
        grid[row, col] = 1.0
    return grid


@dataclass(frozen=True)
class CandidateParams:
    """Grid-anchor candidate crop parameters.

    Crop sizes are all pairs ``(sw * W, sh * H)`` over ``scales``, filtered
    by aspect ratio and minimum area; anchors are spread evenly with a step
    of roughly ``stride_fraction`` times the crop dimension.
    """

    scales: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    aspect_ratio_range: tuple[float, float] = (0.5, 2.0)
    stride_fraction: float = 0.5
    min_area_fraction: float = 0.2

    def validate(self) -> None:
        if not self.scales:
            raise ValidationError("scales must be non-empty")
        if any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ValidationError(f"scales must lie in (0, 1], got {self.scales}")
        if not 0.0 < self.stride_fraction <= 1.0:
            raise ValidationError(f"stride_fraction must lie in (0, 1], got {self.stride_fraction}")
        if not 0.0 <= self.min_area_fraction <= 1.0:
            raise ValidationError(
                f"min_area_fraction must lie in [0, 1], got {self.min_area_fraction}")
        lo, hi = self.aspect_ratio_range
        if not (0.0 < lo <= hi):
            raise ValidationError(f"bad aspect_ratio_range: {self.aspect_ratio_range}")


def _anchor_positions(extent: float, span: float, stride_fraction: float) -> list[float]:
    slack = extent - span
    if slack <= 1e-9:
        return [0.0]
    steps = max(int(round(slack / (stride_fraction * span))), 1)
    return list(np.linspace(0.0, slack, steps + 1))


def generate_candidates(image_size: Size, params: CandidateParams) -> list[Box]:
    """Deterministic grid of candidate crops.

    Raises :class:`EmptyCandidatesError` when the constraints rule out every
    crop. Output is deduplicated and sorted by ``(x1, y1, x2, y2)``.
    """
    params.validate()
    w, h = image_size
    lo, hi = params.aspect_ratio_range
    seen: set[tuple[float, float, float, float]] = set()
    boxes: list[Box] = []
    for sw, sh in product(sorted(params.scales), repeat=2):
        if sw * sh < params.min_area_fraction - 1e-12:
            continue
        cw, ch = sw * w, sh * h
        aspect = cw / ch
        if not lo - 1e-12 <= aspect <= hi + 1e-12:
            continue
        for y0 in _anchor_positions(h, ch, params.stride_fraction):
            for x0 in _anchor_positions(w, cw, params.stride_fraction):
                key = (round(x0, 6), round(y0, 6), round(x0 + cw, 6), round(y0 + ch, 6))
                if key in seen:
                    continue
                seen.add(key)
                boxes.append(Box(x0, y0, x0 + cw, y0 + ch))
    if not boxes:
        raise EmptyCandidatesError(f"no candidate crops possible under {params}")
    boxes.sort(key=lambda b: (b.x1, b.y1, b.x2, b.y2))
    return boxes


def select_main_subject(boxes: Sequence[Box], image_size: Size, alpha: float = 0.1) -> Box:
    """Pick the main subject: largest area, biased toward the image center.

    Rank score in normalized units is ``w*h + alpha * (1 - d)`` with ``d``
    the distance of the box center from the image center. Ties break toward
    the lowest list index.
    """
    if not boxes:
        raise NoSubjectError("cannot select a main subject from an empty box list")
    w, h = image_size
    best_idx, best_score = 0, -math.inf
    for i, box in enumerate(boxes):
        bw, bh = box.width / w, box.height / h
        cx, cy = box.center
        d = math.sqrt((cx / w - 0.5) ** 2 + (cy / h - 0.5) ** 2)
        score = bw * bh + alpha * (1.0 - d)
        if score > best_score:
            best_idx, best_score = i, score
    return boxes[best_idx]


def baseline_a(human_box: Box) -> Box:
    """Trivial crop: the human bounding box itself."""
    return human_box


def baseline_b(human_box: Box, candidates: Sequence[Box], image_size: Size) -> Box:
    """Weighted-rank crop: favor candidates overlapping the human box with
    centers close to it; returns the argmax candidate (ties: lowest index)."""
    if not candidates:
        raise EmptyCandidatesError("baseline_b requires at least one candidate crop")
    w, h = image_size
    hx, hy = human_box.center
    best_idx, best_score = 0, -math.inf
    for i, cand in enumerate(candidates):
        cx, cy = cand.center
        dist = math.sqrt((cx / w - hx / w) ** 2 + (cy / h - hy / h) ** 2)
        score = iou(human_box, cand) + math.sqrt(2.0) - dist
        if score > best_score:
            best_idx, best_score = i, score
    return candidates[best_idx]

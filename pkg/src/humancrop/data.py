"""Annotation ingestion, synthetic dataset generation, and statistics.

The canonical annotation file is JSON::

    {"split": "train",
     "images": [{"image": "name-or-path",
                 "width": 640, "height": 480,
                 "human_box": [x1, y1, x2, y2] | null,
                 "is_human_centric": true,            # optional, derived if absent
                 "crops": [{"box": [x1, y1, x2, y2], "score": 4.2}, ...],
                 "scene": {...}}]}                    # optional, procedural images

Records that fail validation are dropped with a structured diagnostic;
nothing is dropped silently. ``scene`` entries describe procedural images
(flat background, one person glyph with a facing direction, a few object
blobs) that render deterministically, so a synthetic dataset is fully
described by its annotation file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnnotationError, InvalidBoxError, ValidationError
from .geometry import Box, CandidateParams, Size, generate_candidates

HUMAN_CENTRIC_MAX_AREA_FRACTION = 0.9


@dataclass(frozen=True)
class ScoredCrop:
    """A candidate crop with its ground-truth aesthetic score."""

    box: Box
    score: float


@dataclass(frozen=True)
class Diagnostic:
    """One rejected or coerced record during ingestion."""

    image: str
    where: str
    reason: str


@dataclass
class AnnotatedImage:
    image_id: str
    size: Size
    human_box: Box | None
    crops: list[ScoredCrop]
    is_human_centric: bool
    path: str | None = None
    scene: dict | None = None
    _pixel_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def pixels(self, root: Path | None = None) -> np.ndarray:
        """Image as a float32 ``(H, W, 3)`` array in [0, 1]."""
        if self._pixel_cache is None:
            if self.scene is not None:
                self._pixel_cache = render_scene(self.scene, self.size)
            elif self.path is not None:
                from PIL import Image

                file = Path(self.path)
                if root is not None and not file.is_absolute():
                    file = root / file
                with Image.open(file) as im:
                    self._pixel_cache = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            else:
                raise ValidationError(f"image {self.image_id} has neither pixels nor a source")
        return self._pixel_cache

    def attach_pixels(self, pixels: np.ndarray) -> None:
        self._pixel_cache = pixels


@dataclass
class DatasetIndex:
    """A loaded split: images plus the cached global mean crop score.

    ``mean_score`` is the heatmap-selection threshold when this is the
    training split; it is ``None`` for splits with no crops at all.
    """

    split: str
    images: list[AnnotatedImage]
    mean_score: float | None
    diagnostics: list[Diagnostic] = field(default_factory=list)


def _parse_record(raw: dict, idx: int, diags: list[Diagnostic]) -> AnnotatedImage | None:
    image_id = str(raw.get("image", f"record-{idx}"))
    try:
        width, height = float(raw["width"]), float(raw["height"])
        if width <= 0 or height <= 0:
            raise ValidationError(f"non-positive image size {width}x{height}")
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        diags.append(Diagnostic(image_id, "size", str(exc)))
        return None
    size = Size(width, height)

    human_box: Box | None = None
    if raw.get("human_box") is not None:
        try:
            human_box = Box.from_list(raw["human_box"])
            human_box.validate_within(size)
        except (InvalidBoxError, TypeError) as exc:
            diags.append(Diagnostic(image_id, "human_box", str(exc)))
            return None

    crops: list[ScoredCrop] = []
    for ci, crop_raw in enumerate(raw.get("crops", [])):
        try:
            box = Box.from_list(crop_raw["box"])
            box.validate_within(size)
            score = float(crop_raw["score"])
            if not math.isfinite(score):
                raise ValidationError(f"non-finite score {score}")
        except (KeyError, TypeError, ValueError, InvalidBoxError, ValidationError) as exc:
            diags.append(Diagnostic(image_id, f"crops[{ci}]", str(exc)))
            continue
        crops.append(ScoredCrop(box=box, score=score))

    derived_hc = human_box is not None and human_box.area <= HUMAN_CENTRIC_MAX_AREA_FRACTION * width * height
    is_hc = bool(raw.get("is_human_centric", derived_hc))
    if is_hc and not derived_hc:
        diags.append(Diagnostic(image_id, "is_human_centric",
                                "flag set but human box missing or covering >90% of the frame; coerced to false"))
        is_hc = False

    return AnnotatedImage(
        image_id=image_id, size=size, human_box=human_box, crops=crops,
        is_human_centric=is_hc, path=raw.get("path"), scene=raw.get("scene"),
    )


def load_annotations(path: str | Path) -> DatasetIndex:
    """Load and validate an annotation file.

    Raises :class:`AnnotationError` for malformed JSON or a missing
    ``images`` list; per-record problems become diagnostics instead.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise AnnotationError(f"annotation file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed JSON in {path} at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("images"), list):
        raise AnnotationError(f"{path}: expected an object with an 'images' list")

    diags: list[Diagnostic] = []
    images = [img for idx, rec in enumerate(payload["images"])
              if (img := _parse_record(rec, idx, diags)) is not None]
    scores = [c.score for img in images for c in img.crops]
    return DatasetIndex(
        split=str(payload.get("split", path.stem)),
        images=images,
        mean_score=float(np.mean(scores)) if scores else None,
        diagnostics=diags,
    )


def save_annotations(index: DatasetIndex, path: str | Path) -> None:
    """Write an index back to the canonical JSON schema (deterministic bytes)."""
    records = []
    for img in index.images:
        rec: dict = {
            "image": img.image_id,
            "width": img.size.width,
            "height": img.size.height,
            "human_box": img.human_box.as_list() if img.human_box else None,
            "is_human_centric": img.is_human_centric,
            "crops": [{"box": c.box.as_list(), "score": c.score} for c in img.crops],
        }
        if img.path is not None:
            rec["path"] = img.path
        if img.scene is not None:
            rec["scene"] = img.scene
        records.append(rec)
    payload = {"split": index.split, "images": records}
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def dataset_stats(index: DatasetIndex) -> dict:
    """Counts, human-centric ratio, and a score histogram, JSON-ready."""
    n_images = len(index.images)
    scores = np.asarray([c.score for img in index.images for c in img.crops], dtype=np.float64)
    hc = sum(1 for img in index.images if img.is_human_centric)
    hist, edges = np.histogram(scores, bins=8, range=(1.0, 5.0)) if scores.size else (np.zeros(8, int), np.linspace(1, 5, 9))
    return {
        "split": index.split,
        "images": n_images,
        "crops": int(scores.size),
        "human_centric": hc,
        "human_centric_ratio": hc / n_images if n_images else 0.0,
        "mean_score": index.mean_score,
        "score_histogram": {
            "edges": [float(e) for e in edges],
            "counts": [int(c) for c in hist],
        },
        "rejected_records": len(index.diagnostics),
    }


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class OracleWeights:
    """Weights of the compositional scoring oracle; all non-negative."""

    thirds: float = 0.3
    leadroom: float = 0.4
    objects: float = 0.2
    cut: float = 1.0

    def validate(self) -> None:
        if min(self.thirds, self.leadroom, self.objects, self.cut) < 0:
            raise ValidationError(f"oracle weights must be non-negative: {self}")


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic recipe for a procedural dataset."""

    seed: int = 0
    count: int = 16
    image_size: Size = Size(256, 256)
    candidates: CandidateParams = CandidateParams(
        scales=(0.5, 0.65, 0.8), aspect_ratio_range=(0.4, 2.5),
        stride_fraction=0.5, min_area_fraction=0.2)
    crops_per_image: int | None = 32
    weights: OracleWeights = OracleWeights()
    person_size_range: tuple[float, float] = (0.18, 0.32)
    object_count_range: tuple[int, int] = (1, 3)
    facings: tuple[str, ...] = ("left", "right", "front")
    split: str = "train"

    def validate(self) -> None:
        if self.count < 1:
            raise ValidationError("synthetic dataset needs count >= 1")
        if self.crops_per_image is not None and self.crops_per_image < 2:
            raise ValidationError("crops_per_image must be >= 2 (ranking needs pairs)")
        self.weights.validate()
        self.candidates.validate()
        lo, hi = self.person_size_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValidationError(f"bad person_size_range: {self.person_size_range}")
        if not all(f in ("left", "right", "front") for f in self.facings) or not self.facings:
            raise ValidationError(f"bad facings: {self.facings}")


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def _thirds_term(t: float) -> float:
    return 1.0 - 3.0 * min(abs(t - 1.0 / 3.0), abs(t - 2.0 / 3.0))


def oracle_score(scene: dict, crop: Box, weights: OracleWeights) -> float:
    """Composition score of a crop on a 1-5 scale.

    Rewards rule-of-thirds placement of the person, lead room on the facing
    side (balance for front-facing), and object coverage; cutting the person
    out of the crop is penalized down to the 1.0 floor.
    """
    person = Box.from_list(scene["person"]["box"])
    facing = scene["person"]["facing"]
    pcx, pcy = person.center
    tx = _clamp01((pcx - crop.x1) / crop.width)
    ty = _clamp01((pcy - crop.y1) / crop.height)
    thirds = (_thirds_term(tx) + _thirds_term(ty)) / 2.0

    if facing == "right":
        lead = _clamp01((crop.x2 - pcx) / crop.width)
    elif facing == "left":
        lead = _clamp01((pcx - crop.x1) / crop.width)
    else:
        lead = _clamp01(1.0 - abs(2.0 * tx - 1.0))

    objects = scene.get("objects", [])
    if objects:
        total = sum(Box.from_list(o["box"]).area for o in objects)
        inside = sum(Box.from_list(o["box"]).intersection_area(crop) for o in objects)
        coverage = inside / total
    else:
        coverage = 1.0

    cut = 1.0 - person.intersection_area(crop) / person.area
    raw = (weights.thirds * thirds + weights.leadroom * lead
           + weights.objects * coverage - weights.cut * cut)
    return 1.0 + 4.0 * _clamp01(raw)


def _fill_rect(img: np.ndarray, box: Box, color: Sequence[float]) -> None:
    h, w = img.shape[:2]
    x1 = min(max(int(math.floor(box.x1)), 0), w)
    x2 = min(max(int(math.ceil(box.x2)), 0), w)
    y1 = min(max(int(math.floor(box.y1)), 0), h)
    y2 = min(max(int(math.ceil(box.y2)), 0), h)
    img[y1:y2, x1:x2] = color


def _fill_ellipse(img: np.ndarray, box: Box, color: Sequence[float]) -> None:
    h, w = img.shape[:2]
    cx, cy = box.center
    rx, ry = max(box.width / 2.0, 1.0), max(box.height / 2.0, 1.0)
    ys = (np.arange(h) + 0.5 - cy) / ry
    xs = (np.arange(w) + 0.5 - cx) / rx
    mask = ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0
    img[mask] = color


def render_scene(scene: dict, size: Size) -> np.ndarray:
    """Deterministic float32 rendering of a scene description."""
    w, h = int(size.width), int(size.height)
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = np.asarray(scene["background"], dtype=np.float32)
    for obj in scene.get("objects", []):
        _fill_ellipse(img, Box.from_list(obj["box"]), np.asarray(obj["color"], dtype=np.float32))
    person = scene["person"]
    box = Box.from_list(person["box"])
    body = Box(box.x1 + 0.2 * box.width, box.y1 + 0.3 * box.height, box.x2 - 0.2 * box.width, box.y2)
    _fill_rect(img, body, np.asarray(person["body_color"], dtype=np.float32))
    # A bright block at the top of the person marks the facing side.
    fw = 0.45 * box.width
    if person["facing"] == "left":
        fx1 = box.x1
    elif person["facing"] == "right":
        fx1 = box.x2 - fw
    else:
        fx1 = box.x1 + (box.width - fw) / 2.0
    face = Box(fx1, box.y1, fx1 + fw, box.y1 + 0.28 * box.height)
    _fill_rect(img, face, np.asarray(person["face_color"], dtype=np.float32))
    return img


def _sample_scene(rng: np.random.Generator, spec: SynthSpec) -> dict:
    w, h = spec.image_size
    lo, hi = spec.person_size_range
    pw = rng.uniform(lo, hi) * w
    ph = rng.uniform(max(lo, 0.25), hi + 0.15) * h
    pcx = rng.uniform(0.28, 0.72) * w
    pcy = rng.uniform(0.35, 0.65) * h
    person_box = Box.clipped(pcx - pw / 2, pcy - ph / 2, pcx + pw / 2, pcy + ph / 2, spec.image_size)
    facing = str(rng.choice(list(spec.facings)))

    background = (0.15 + 0.25 * rng.random(3)).tolist()
    body_color = (0.05 + 0.2 * rng.random(3)).tolist()
    face_color = (0.75 + 0.25 * rng.random(3)).tolist()

    objects = []
    n_obj = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))
    for _ in range(n_obj):
        for _attempt in range(8):
            ow = rng.uniform(0.08, 0.2) * w
            oh = rng.uniform(0.08, 0.2) * h
            ocx = rng.uniform(0.12, 0.88) * w
            ocy = rng.uniform(0.12, 0.88) * h
            obox = Box.clipped(ocx - ow / 2, ocy - oh / 2, ocx + ow / 2, ocy + oh / 2, spec.image_size)
            if obox.intersection_area(person_box) == 0.0:
                break
        color = (0.45 + 0.5 * rng.random(3)).tolist()
        objects.append({"box": obox.as_list(), "color": color})

    return {
        "background": background,
        "person": {"box": person_box.as_list(), "facing": facing,
                   "body_color": body_color, "face_color": face_color},
        "objects": objects,
    }


def synth_generate(spec: SynthSpec) -> DatasetIndex:
    """Generate a procedural dataset with oracle crop scores.

    Identical specs produce byte-identical datasets when serialized with
    :func:`save_annotations`.
    """
    spec.validate()
    grid = generate_candidates(spec.image_size, spec.candidates)
    images: list[AnnotatedImage] = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        scene = _sample_scene(rng, spec)
        if spec.crops_per_image is not None and spec.crops_per_image < len(grid):
            keep = np.sort(rng.choice(len(grid), size=spec.crops_per_image, replace=False))
            crop_boxes = [grid[int(k)] for k in keep]
        else:
            crop_boxes = list(grid)
        crops = [ScoredCrop(box=b, score=oracle_score(scene, b, spec.weights)) for b in crop_boxes]
        human_box = Box.from_list(scene["person"]["box"])
        images.append(AnnotatedImage(
            image_id=f"synth-{spec.seed}-{i:04d}",
            size=spec.image_size,
            human_box=human_box,
            crops=crops,
            is_human_centric=human_box.area <= HUMAN_CENTRIC_MAX_AREA_FRACTION * spec.image_size.width * spec.image_size.height,
            scene=scene,
        ))
    scores = [c.score for img in images for c in img.crops]
    return DatasetIndex(split=spec.split, images=images,
                        mean_score=float(np.mean(scores)) if scores else None)


def with_split(index: DatasetIndex, split: str) -> DatasetIndex:
    return replace(index, split=split)

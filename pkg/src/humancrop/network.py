"""Crop scoring network.

The model builds a basic feature map from a small multi-scale backbone, then
conditions it on the human box: the pooled human appearance vector is appended
at every location and the map is split into the nine cells induced by the box,
each transformed by its own convolutions (zero padded inside the cell, so
nothing crosses a partition boundary) with a residual add back onto the basic
map. Graph relation mining then mixes all locations through a row-stochastic
cosine-similarity adjacency. From the mined feature the network predicts a
content heatmap (4x the basic map resolution) and scores each candidate crop
from a region feature (RoI over the crop interior plus RoD over the
interior-zeroed full map) concatenated with a content feature encoding how the
crop overlaps the heatmap.

Images without a human box skip the partition stage entirely and score crops
from the basic map, so human-centric and generic images train together.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ValidationError
from .geometry import Box, PartitionGrid, Size, partition_image, rasterize

PARTITION_CHOICES = (1, 2, 9)
FUSION_WIDTH = 256
MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ablation switches default to on."""

    channels: int = 32
    region_dim: int = 256
    content_dim: int = 256
    roi_size: int = 8
    partitions: int = 9
    heatmap_upsample: int = 4
    short_side: int = 256
    backbone: str = "tiny"
    use_partition: bool = True
    use_human_feature: bool = True
    use_residual: bool = True
    use_content: bool = True
    use_graph: bool = True

    def validate(self) -> None:
        if self.channels < 2 or self.channels % 2:
            raise ConfigError(f"channels must be even and >= 2, got {self.channels}")
        if self.partitions not in PARTITION_CHOICES:
            raise ConfigError(f"partitions must be one of {PARTITION_CHOICES}, got {self.partitions}")
        for name in ("region_dim", "content_dim", "roi_size", "heatmap_upsample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.short_side < MIN_IMAGE_SIDE:
            raise ConfigError(f"short_side must be >= {MIN_IMAGE_SIDE}, got {self.short_side}")
        if self.use_human_feature and not self.use_partition:
            raise ConfigError("use_human_feature requires use_partition: the human vector "
                              "enters the model through the partition stage")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; available: {sorted(BACKBONES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def label(self) -> str:
        """Human-readable configuration name for reports."""
        off = [name for name, on in (
            ("partition", self.use_partition), ("human", self.use_human_feature),
            ("residual", self.use_residual), ("content", self.use_content),
            ("graph", self.use_graph)) if not on]
        if len(off) == 5:
            return "basic"
        return "full" if not off else "ablated:" + ",".join(off)


class TinyBackbone(nn.Module):
    """Small trainable backbone; returns the stride-8/16/32 stage maps."""

    out_channels = (32, 48, 64)

    def __init__(self) -> None:
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 24, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.stage3 = nn.Sequential(
            nn.Conv2d(24, 32, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.stage4 = nn.Sequential(
            nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.stage5 = nn.Sequential(
            nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.ReLU(inplace=True))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, ...]:
        c3 = self.stage3(self.stem(x))
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return c3, c4, c5


BACKBONES: dict[str, Callable[[], nn.Module]] = {"tiny": TinyBackbone}


def build_backbone(name: str) -> nn.Module:
    try:
        return BACKBONES[name]()
    except KeyError:
        raise ConfigError(f"unknown backbone {name!r}; available: {sorted(BACKBONES)}") from None


class MultiScaleFusion(nn.Module):
    """Project each stage to a common width, upsample to the largest spatial
    size, sum, and project down to the basic map width. Purely linear."""

    def __init__(self, in_channels: Sequence[int], channels: int) -> None:
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, FUSION_WIDTH, 1) for c in in_channels)
        self.project = nn.Conv2d(FUSION_WIDTH, channels, 1)

    def forward(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        target = levels[0].shape[-2:]
        fused = self.laterals[0](levels[0])
        for lateral, level in zip(self.laterals[1:], levels[1:]):
            fused = fused + F.interpolate(lateral(level), size=target,
                                          mode="bilinear", align_corners=False)
        return self.project(fused)


def _sample_grid(boxes: Sequence[Box], image_size: Size, p: int,
                 dtype: torch.dtype) -> torch.Tensor:
    """Normalized sampling grid of p*p cell centers inside each box."""
    w, h = image_size
    steps = (torch.arange(p, dtype=dtype) + 0.5) / p
    grid = torch.empty(len(boxes), p, p, 2, dtype=dtype)
    for i, b in enumerate(boxes):
        xs = b.x1 + steps * b.width
        ys = b.y1 + steps * b.height
        grid[i, :, :, 0] = (2.0 * xs / w - 1.0).unsqueeze(0)
        grid[i, :, :, 1] = (2.0 * ys / h - 1.0).unsqueeze(1)
    return grid


def roi_align_feature(feature: torch.Tensor, boxes: Sequence[Box],
                      image_size: Size, p: int) -> torch.Tensor:
    """Bilinear crop of ``feature`` (1, C, H, W) to (N, C, p, p) per box.

    Boxes are in image coordinates; the feature map is treated as covering
    the full image extent, and out-of-extent samples clamp to the border.
    """
    grid = _sample_grid(boxes, image_size, p, feature.dtype)
    expanded = feature.expand(len(boxes), -1, -1, -1)
    return F.grid_sample(expanded, grid, mode="bilinear",
                         padding_mode="border", align_corners=False)


def interior_mask(boxes: Sequence[Box], image_size: Size, map_size: tuple[int, int],
                  dtype: torch.dtype) -> torch.Tensor:
    """(N, 1, H, W) mask that is 0 where a map cell center falls inside the
    box and 1 elsewhere (same center rule the rasterizer uses)."""
    mh, mw = map_size
    w, h = image_size
    cx = (torch.arange(mw, dtype=dtype) + 0.5) * (w / mw)
    cy = (torch.arange(mh, dtype=dtype) + 0.5) * (h / mh)
    out = torch.empty(len(boxes), 1, mh, mw, dtype=dtype)
    for i, b in enumerate(boxes):
        inx = (cx >= b.x1) & (cx < b.x2)
        iny = (cy >= b.y1) & (cy < b.y2)
        out[i, 0] = 1.0 - (iny[:, None] & inx[None, :]).to(dtype)
    return out


def rod_align_feature(feature: torch.Tensor, boxes: Sequence[Box],
                      image_size: Size, p: int) -> torch.Tensor:
    """Region-of-discard counterpart: zero each crop's interior, then sample
    the whole extent down to (N, C, p, p)."""
    n = len(boxes)
    mask = interior_mask(boxes, image_size, feature.shape[-2:], feature.dtype)
    masked = feature.expand(n, -1, -1, -1) * mask
    full = [Box(0.0, 0.0, float(image_size.width), float(image_size.height))] * n
    grid = _sample_grid(full, image_size, p, feature.dtype)
    return F.grid_sample(masked, grid, mode="bilinear",
                         padding_mode="border", align_corners=False)


class HumanFeature(nn.Module):
    """Pool the human box region into a (channels // 2)-dim vector."""

    def __init__(self, channels: int, roi_size: int) -> None:
        super().__init__()
        self.roi_size = roi_size
        self.fc = nn.Linear(channels, channels // 2)

    def forward(self, basic: torch.Tensor, human_box: Box, image_size: Size) -> torch.Tensor:
        roi = roi_align_feature(basic, [human_box], image_size, self.roi_size)
        pooled = roi.mean(dim=(2, 3))
        return self.fc(pooled).squeeze(0)


class PartitionAware(nn.Module):
    """Per-partition transforms with a residual onto the basic map.

    Input is the human-augmented map (basic channels plus the tiled human
    vector); each partition's transform maps it back to the basic width, so
    the output has the basic map's shape. A transform is a 3x3 conv +
    rectifier followed by a zero-initialized 3x3 conv, so freshly built
    models start exactly at the residual identity yet can learn.

    With nine partitions each cell's convs see only that cell's sub-grid
    (zero padded), so features never leak across partition boundaries. With
    two partitions the human cell gets its own transform and the complement
    is handled as one irregular region by a masked conv: the human region is
    zeroed on the input and the output is confined to the complement. One
    partition is a plain transform over the whole map.
    """

    def __init__(self, in_channels: int, channels: int, partitions: int,
                 use_residual: bool) -> None:
        super().__init__()
        if partitions not in PARTITION_CHOICES:
            raise ConfigError(f"partitions must be one of {PARTITION_CHOICES}, got {partitions}")
        self.partitions = partitions
        self.use_residual = use_residual
        self.transforms = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, channels, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(channels, channels, 3, padding=1),
            ) for _ in range(partitions))

    def forward(self, augmented: torch.Tensor, basic: torch.Tensor,
                grid: PartitionGrid, image_size: Size) -> torch.Tensor:
        mh, mw = basic.shape[-2:]
        map_size = Size(mw, mh)
        if self.partitions == 1:
            out = self.transforms[0](augmented)
        elif self.partitions == 2:
            slices = grid.cell_slices(image_size, map_size)
            human = slices[4]
            mask = torch.ones(1, 1, mh, mw, dtype=basic.dtype)
            out = torch.zeros_like(basic)
            if human is not None:
                rows, cols = human
                mask[:, :, rows, cols] = 0.0
                out[:, :, rows, cols] = self.transforms[0](augmented[:, :, rows, cols])
            out = out + self.transforms[1](augmented * mask) * mask
        else:
            slices = grid.cell_slices(image_size, map_size)
            out = torch.zeros_like(basic)
            for transform, sl in zip(self.transforms, slices):
                if sl is None:
                    continue
                rows, cols = sl
                out[:, :, rows, cols] = transform(augmented[:, :, rows, cols])
        if self.use_residual:
            out = out + basic
        return out


def cosine_adjacency(x: torch.Tensor) -> torch.Tensor:
    """Row-stochastic adjacency from pairwise cosine similarity.

    ``x`` is (..., N, D). Negative similarities are clamped to zero, a node
    is always fully similar to itself, and all-zero feature rows produce
    all-zero adjacency rows; every other row sums to one.
    """
    norms = x.norm(dim=-1, keepdim=True)
    nonzero = norms.squeeze(-1) > 0
    unit = torch.where(norms > 0, x / norms.clamp_min(1e-30), torch.zeros_like(x))
    sim = (unit @ unit.transpose(-1, -2)).clamp_min(0.0)
    sim = sim - torch.diag_embed(sim.diagonal(dim1=-2, dim2=-1)) + torch.diag_embed(nonzero.to(x.dtype))
    rowsum = sim.sum(dim=-1, keepdim=True)
    return torch.where(rowsum > 0, sim / rowsum.clamp_min(1e-30), sim)


class GraphRelation(nn.Module):
    """Mine relations between all map locations: rectifier(A X theta)."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.theta = nn.Linear(dim, dim, bias=False)

    def forward(self, feature: torch.Tensor,
                adjacency: torch.Tensor | None = None) -> torch.Tensor:
        n, c, h, w = feature.shape
        x = feature.flatten(2).transpose(1, 2)
        a = cosine_adjacency(x) if adjacency is None else adjacency
        out = F.relu(a @ self.theta(x))
        return out.transpose(1, 2).reshape(n, c, h, w)


class HeatmapHead(nn.Module):
    """Upsample, refine, and squash to a per-location content map."""

    def __init__(self, dim: int, upsample: int, hidden: int = 16) -> None:
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(dim, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, 1, 1)

    def logits(self, feature: torch.Tensor) -> torch.Tensor:
        up = F.interpolate(feature, scale_factor=self.upsample,
                           mode="bilinear", align_corners=False)
        return self.out(F.relu(self.conv(up)))

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(feature))


class ContentEncoder(nn.Module):
    """Encode (crop raster, heatmap) pairs into a content feature vector."""

    def __init__(self, content_dim: int) -> None:
        super().__init__()
        self.pre = nn.AvgPool2d(4, ceil_mode=True)
        self.conv1 = nn.Conv2d(2, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.pool = nn.MaxPool2d(2, ceil_mode=True)
        self.squeeze = nn.AdaptiveAvgPool2d(8)
        self.fc = nn.Linear(16 * 8 * 8, content_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pre(x)
        x = self.pool(F.relu(self.conv1(x)))
        x = self.pool(F.relu(self.conv2(x)))
        return self.fc(self.squeeze(x).flatten(1))


class RegionFeature(nn.Module):
    """RoI + RoD pooling fused into one crop descriptor."""

    def __init__(self, dim: int, roi_size: int, region_dim: int) -> None:
        super().__init__()
        self.roi_size = roi_size
        self.fc = nn.Linear(2 * dim * roi_size * roi_size, region_dim)

    def forward(self, feature: torch.Tensor, boxes: Sequence[Box],
                image_size: Size) -> torch.Tensor:
        roi = roi_align_feature(feature, boxes, image_size, self.roi_size)
        rod = rod_align_feature(feature, boxes, image_size, self.roi_size)
        return self.fc(torch.cat([roi.flatten(1), rod.flatten(1)], dim=1))


class ModelOutput(NamedTuple):
    scores: torch.Tensor
    heatmap: torch.Tensor
    heatmap_logits: torch.Tensor


class CropScorer(nn.Module):
    """End-to-end scorer: image + human box + candidate crops -> scores."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = build_backbone(config.backbone)
        self.fuse = MultiScaleFusion(self.backbone.out_channels, config.channels)
        self.human = (HumanFeature(config.channels, config.roi_size)
                      if config.use_human_feature else None)
        augmented = config.channels + (config.channels // 2 if config.use_human_feature else 0)
        self.partition = (PartitionAware(augmented, config.channels, config.partitions,
                                         config.use_residual)
                          if config.use_partition else None)
        self.graph = GraphRelation(config.channels) if config.use_graph else None
        self.heatmap_head = HeatmapHead(config.channels, config.heatmap_upsample)
        self.region = RegionFeature(config.channels, config.roi_size, config.region_dim)
        self.content = ContentEncoder(config.content_dim) if config.use_content else None
        head_in = config.region_dim + (config.content_dim if config.use_content else 0)
        self.score_head = nn.Linear(head_in, 1)

    def mined_feature(self, image: torch.Tensor, human_box: Box | None) -> torch.Tensor:
        """Basic map, partition-conditioned when a human box is given, then
        relation-mined."""
        h, w = image.shape[-2:]
        if min(h, w) < MIN_IMAGE_SIDE:
            raise ValidationError(f"image {w}x{h} is smaller than the minimum "
                                  f"side {MIN_IMAGE_SIDE}")
        size = Size(float(w), float(h))
        basic = self.fuse(self.backbone(image))
        feat = basic
        if self.partition is not None and human_box is not None:
            grid = partition_image(size, human_box)
            augmented = basic
            if self.human is not None:
                vec = self.human(basic, human_box, size)
                tiled = vec.view(1, -1, 1, 1).expand(1, vec.numel(), *basic.shape[-2:])
                augmented = torch.cat([basic, tiled], dim=1)
            feat = self.partition(augmented, basic, grid, size)
        if self.graph is not None:
            feat = self.graph(feat)
        return feat

    def forward(self, image: torch.Tensor, human_box: Box | None,
                crop_boxes: Sequence[Box]) -> ModelOutput:
        if not crop_boxes:
            raise ValidationError("need at least one candidate crop to score")
        h, w = image.shape[-2:]
        size = Size(float(w), float(h))
        feat = self.mined_feature(image, human_box)
        logits = self.heatmap_head.logits(feat)
        heat = torch.sigmoid(logits)
        parts = [self.region(feat, crop_boxes, size)]
        if self.content is not None:
            hh, hw = heat.shape[-2:]
            rasters = np.stack([rasterize(b, size, Size(hw, hh)) for b in crop_boxes])
            raster_t = torch.from_numpy(rasters).to(heat.dtype).unsqueeze(1)
            pair = torch.cat([raster_t, heat.expand(len(crop_boxes), -1, -1, -1)], dim=1)
            parts.append(self.content(pair))
        scores = self.score_head(torch.cat(parts, dim=1)).squeeze(-1)
        return ModelOutput(scores=scores, heatmap=heat, heatmap_logits=logits)


def _stable_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def init_parameters(model: CropScorer, seed: int) -> None:
    """Deterministic per-parameter initialization.

    Each conv/linear is seeded by its qualified name, so modules shared
    between two configurations (for example with and without the partition
    stage) receive identical weights for a given seed. Weights use fan-in
    Kaiming scaling, biases start at zero, and the final conv of every
    partition transform starts at zero so the stage begins as an identity.
    """
    with torch.no_grad():
        for name, module in model.named_modules():
            if not isinstance(module, (nn.Conv2d, nn.Linear)):
                continue
            gen = torch.Generator().manual_seed(_stable_seed(seed, name))
            fan_in = module.weight.shape[1] * (
                module.weight.shape[2] * module.weight.shape[3]
                if module.weight.dim() == 4 else 1)
            module.weight.copy_(torch.randn(module.weight.shape, generator=gen)
                                * math.sqrt(2.0 / fan_in))
            if module.bias is not None:
                module.bias.zero_()
        if model.partition is not None:
            for transform in model.partition.transforms:
                transform[-1].weight.zero_()
                transform[-1].bias.zero_()


def build_model(config: ModelConfig, seed: int = 0) -> CropScorer:
    """Construct a scorer with seed-determined initial weights."""
    model = CropScorer(config)
    init_parameters(model, seed)
    return model


def preprocess_image(pixels: np.ndarray, short_side: int) -> tuple[torch.Tensor, Size, tuple[float, float]]:
    """Resize so the short side matches and normalize to roughly [-1, 1].

    Returns the (1, 3, H, W) float32 tensor, the resized extent, and the
    (sx, sy) factors that map original-image coordinates into it.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValidationError(f"expected (H, W, 3) pixels, got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    scale = short_side / min(w, h)
    nw, nh = max(round(w * scale), 1), max(round(h * scale), 1)
    tensor = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
    tensor = tensor.permute(2, 0, 1).unsqueeze(0)
    if (nh, nw) != (h, w):
        tensor = F.interpolate(tensor, size=(nh, nw), mode="bilinear", align_corners=False)
    tensor = tensor.mul(2.0).sub(1.0)
    return tensor, Size(float(nw), float(nh)), (nw / w, nh / h)


def _open_unit_interval(values: np.ndarray) -> np.ndarray:
    tiny = np.finfo(np.float64).tiny
    return np.clip(values, tiny, np.nextafter(1.0, 0.0))


@torch.no_grad()
def score_crops(model: CropScorer, pixels: np.ndarray, human_box: Box | None,
                crops: Sequence[Box]) -> tuple[np.ndarray, np.ndarray]:
    """Score candidate crops on an image; returns float64 scores and heatmap.

    ``human_box`` may be None for images without a person; the model then
    scores from the basic feature map. The heatmap is recomputed from the
    logits in float64 so exported values stay strictly inside (0, 1)
    regardless of model precision.
    """
    model.eval()
    tensor, size, (sx, sy) = preprocess_image(pixels, model.config.short_side)
    scaled_human = human_box.scaled(sx, sy) if human_box is not None else None
    scaled_crops = [b.scaled(sx, sy) for b in crops]
    out = model(tensor.to(next(model.parameters()).dtype), scaled_human, scaled_crops)
    heat = torch.sigmoid(out.heatmap_logits.double()).squeeze(0).squeeze(0).numpy()
    return (out.scores.double().numpy(),
            _open_unit_interval(np.asarray(heat, dtype=np.float64)))


@torch.no_grad()
def image_heatmap(model: CropScorer, pixels: np.ndarray, human_box: Box | None) -> np.ndarray:
    """Predicted content heatmap for one image as float64 in (0, 1)."""
    model.eval()
    tensor, _, (sx, sy) = preprocess_image(pixels, model.config.short_side)
    scaled = human_box.scaled(sx, sy) if human_box is not None else None
    feat = model.mined_feature(tensor.to(next(model.parameters()).dtype), scaled)
    logits = model.heatmap_head.logits(feat).double()
    heat = torch.sigmoid(logits).squeeze(0).squeeze(0).numpy()
    return _open_unit_interval(np.asarray(heat, dtype=np.float64))

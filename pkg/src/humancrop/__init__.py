"""Human-centric image cropping with partition-aware and content-preserving
features: candidate crops are scored by a model that conditions its feature
map on the human bounding box and predicts an important-content heatmap."""

from .data import (AnnotatedImage, DatasetIndex, ScoredCrop, SynthSpec,
                   dataset_stats, load_annotations, save_annotations,
                   synth_generate)
from .geometry import (Box, CandidateParams, PartitionGrid, Size, baseline_a,
                       baseline_b, boundary_displacement, generate_candidates,
                       iou, partition_image, rasterize, select_main_subject)
from .heatmap import content_loss, pseudo_heatmap, select_highly_scored, softmax_weights
from .losses import LossBreakdown, ranking_loss, regression_loss, smooth_l1, total_loss
from .metrics import EvalReport, acc_topN, best_crop_eval, srcc
from .network import CropScorer, ModelConfig, build_model, image_heatmap, score_crops
from .checkpoint import load_checkpoint, save_checkpoint
from .training import Trainer, TrainSchedule, learning_rate

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "Box", "CandidateParams", "CropScorer", "DatasetIndex",
    "EvalReport", "LossBreakdown", "ModelConfig", "PartitionGrid", "ScoredCrop",
    "Size", "SynthSpec", "Trainer", "TrainSchedule", "acc_topN", "baseline_a",
    "baseline_b", "best_crop_eval", "boundary_displacement", "build_model",
    "content_loss", "dataset_stats", "generate_candidates", "image_heatmap",
    "iou", "learning_rate", "load_annotations", "load_checkpoint",
    "partition_image", "pseudo_heatmap", "ranking_loss", "rasterize",
    "regression_loss", "save_annotations", "save_checkpoint", "score_crops",
    "select_highly_scored", "select_main_subject", "smooth_l1",
    "softmax_weights", "srcc", "synth_generate", "total_loss", "__version__",
]

"""
Aseg - multimodal semantic segmentation on a numpy autodiff core
=================================================================
Encoder/decoder segmentation with efficient atrous pyramid pooling,
gated two-stream fusion, Taylor channel pruning with shortcut masks,
segmentation metrics and a synthetic multimodal data harness.

Quick Start:
    from aseg import ModelConfig, InMemoryDataset, SyntheticSpec
    from aseg import build_unimodal, train_unimodal, evaluate, miou, TrainSchedule

    data = InMemoryDataset.synthesize(SyntheticSpec(), n_samples=32)
    graph = build_unimodal(ModelConfig(), seed=0)
    train_unimodal(graph, data, TrainSchedule.unimodal(iterations=200))
    print(miou(evaluate(graph, data, "val")))
"""

__version__ = "1.0.0"

# Autodiff core
from .tensor import Parameter, Tensor, Tape, backward, grad_check, no_grad

# Layers and graphs
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, Sequential
from .graph import ChannelGroup, LayerGraph, count_flops, count_params, cost_report

# Blocks
from .blocks import (
    ASPP,
    EASPP,
    SSMA,
    AttentionConfig,
    ChannelAttention,
    EasppConfig,
    ResidualUnit,
    SsmaConfig,
    UnitConfig,
)

# Models
from .model import (
    EncoderConfig,
    FusionConfig,
    FusionGraph,
    ModelConfig,
    ModelOutput,
    UnimodalGraph,
    build_fusion,
    build_unimodal,
    transfer_encoder,
)

# Receptive fields
from .receptive import analytic_receptive_field, cascade_receptive_field, empirical_receptive_field

# Checkpoints
from .checkpoint import load_weights, save_weights

# Data
from .augment import AugmentConfig, augment
from .data import (
    Batch,
    DatasetManifest,
    InMemoryDataset,
    Sample,
    SyntheticSpec,
    batch_iterator,
    generate_synthetic,
    load_manifest,
    load_sample,
)
from .netpbm import load_pgm_labels, load_ppm, save_pgm_labels, save_ppm

# Training
from .training import (
    AdamConfig,
    AdamState,
    LossWeights,
    StageSpec,
    TrainSchedule,
    adam_step,
    cross_entropy_loss,
    evaluate,
    gate_statistics,
    total_loss,
    train_fusion_multistage,
    train_unimodal,
)

# Metrics
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    avg_precision,
    fnr,
    fpr,
    giou,
    iou,
    metrics_report,
    miou,
    pixel_accuracy,
    trimap_miou,
)

# Pruning
from .pruning import (
    PruneConfig,
    PrunePlan,
    PruneStage,
    Ranking,
    apply_prune_with_mask,
    l1_rank,
    rank_agreement,
    oracle_rank,
    prune_finetune_loop,
    select_prune_set,
    taylor_rank,
    zero_forced,
)

# Exceptions
from .exceptions import (
    AsegError,
    CheckpointError,
    ConfigError,
    GradientError,
    NetpbmError,
    PruneError,
    ShapeError,
    TrainingError,
    UndefinedMetricError,
)

# Logging
from .logging import configure_logging, get_logger

__all__ = [
    "__version__",
    "Tensor", "Parameter", "Tape", "backward", "grad_check", "no_grad",
    "Module", "Sequential", "Conv2d", "ConvTranspose2d", "BatchNorm2d",
    "ChannelGroup", "LayerGraph", "count_params", "count_flops", "cost_report",
    "UnitConfig", "ResidualUnit", "EasppConfig", "ASPP", "EASPP",
    "SsmaConfig", "SSMA", "AttentionConfig", "ChannelAttention",
    "EncoderConfig", "ModelConfig", "FusionConfig", "ModelOutput",
    "UnimodalGraph", "FusionGraph", "build_unimodal", "build_fusion", "transfer_encoder",
    "analytic_receptive_field", "cascade_receptive_field", "empirical_receptive_field",
    "save_weights", "load_weights",
    "AugmentConfig", "augment",
    "Sample", "Batch", "SyntheticSpec", "DatasetManifest", "InMemoryDataset",
    "generate_synthetic", "load_manifest", "load_sample", "batch_iterator",
    "save_ppm", "load_ppm", "save_pgm_labels", "load_pgm_labels",
    "LossWeights", "AdamConfig", "AdamState", "StageSpec", "TrainSchedule",
    "cross_entropy_loss", "total_loss", "adam_step",
    "train_unimodal", "train_fusion_multistage", "evaluate", "gate_statistics",
    "ConfusionMatrix", "MetricsReport", "metrics_report",
    "iou", "miou", "giou", "pixel_accuracy", "avg_precision", "fpr", "fnr", "trimap_miou",
    "Ranking", "PrunePlan", "PruneConfig", "PruneStage", "taylor_rank", "oracle_rank", "l1_rank",
    "rank_agreement",
    "select_prune_set",
    "apply_prune_with_mask", "zero_forced", "prune_finetune_loop",
    "AsegError", "ShapeError", "GradientError", "ConfigError", "CheckpointError",
    "NetpbmError", "UndefinedMetricError", "PruneError", "TrainingError",
    "configure_logging", "get_logger",
]

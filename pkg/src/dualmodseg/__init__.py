"""Semi-supervised dual-branch multi-modal 3D medical image segmentation."""

__version__ = "0.1.0"

from .data_model import (
    Batch,
    DataError,
    DatasetSplit,
    ModalitySample,
    SegMask,
    Volume,
    compose_batch,
    make_split,
)
from .estimator import DualModalitySegmenter
from .losses import (
    LossBundle,
    PseudoLabelPair,
    ce_loss,
    consistency_loss,
    dice_loss,
    make_pseudo_labels,
    supervised_loss,
    total_loss,
)
from .metrics import MetricsReport, asd, dice_score, evaluate_dataset, extract_surface
from .network import (
    DualBranchNet,
    forward_dual,
    inject_fused,
    mae_enhance,
    mae_weights,
    mmf_fuse,
    param_count,
)
from .preprocessing import (
    PatchSpec,
    WindowSpec,
    crop_nonzero,
    hu_window,
    minmax_normalize,
    random_patch,
)
from .synthetic import SynthSpec, generate_dataset, generate_sample
from .trainer import TrainConfig, evaluate, lr_schedule, run_ablation, train, train_step

__all__ = [
    "Batch",
    "DataError",
    "DatasetSplit",
    "DualBranchNet",
    "DualModalitySegmenter",
    "LossBundle",
    "MetricsReport",
    "ModalitySample",
    "PatchSpec",
    "PseudoLabelPair",
    "SegMask",
    "SynthSpec",
    "TrainConfig",
    "Volume",
    "WindowSpec",
    "asd",
    "ce_loss",
    "compose_batch",
    "consistency_loss",
    "crop_nonzero",
    "dice_loss",
    "dice_score",
    "evaluate",
    "evaluate_dataset",
    "extract_surface",
    "forward_dual",
    "generate_dataset",
    "generate_sample",
    "hu_window",
    "inject_fused",
    "lr_schedule",
    "mae_enhance",
    "mae_weights",
    "make_pseudo_labels",
    "make_split",
    "minmax_normalize",
    "mmf_fuse",
    "param_count",
    "random_patch",
    "run_ablation",
    "supervised_loss",
    "total_loss",
    "train",
    "train_step",
]

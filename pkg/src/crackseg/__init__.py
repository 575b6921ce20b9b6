"""Segmentation toolkit: four U-Net variants with attention gating and
multi-scale skip aggregation, on a small numpy autodiff core."""

from .tensor import (GradientTape, NumericError, ShapeError, TapeError,
                     Tensor, backward, concat_channels, elementwise,
                     tensor_full)
from .networks import NetworkConfig, SegNet, VARIANTS, build
from .training import (Adam, Checkpoint, TrainConfig, bce_with_logits,
                       load_checkpoint, restore_network, save_checkpoint,
                       train)
from .metrics import IoUResult, iou, miou
from .data import SamplePair, augment_flips, load_sample, synth_crack

__all__ = [
    "Adam", "Checkpoint", "GradientTape", "IoUResult", "NetworkConfig",
    "NumericError", "SamplePair", "SegNet", "ShapeError", "TapeError",
    "Tensor", "TrainConfig", "VARIANTS", "augment_flips", "backward",
    "bce_with_logits", "build", "concat_channels", "elementwise", "iou",
    "load_checkpoint", "load_sample", "miou", "restore_network",
    "save_checkpoint", "synth_crack", "tensor_full", "train",
]

__version__ = "0.1.0"

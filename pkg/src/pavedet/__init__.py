"""Partial self-attention detection blocks, a toy trainable detector, and
the detection-evaluation metric suite (mAP50, P/R, F1, FPS), with a CLI."""

__version__ = "0.1.0"

from .boxes import DetectionBox, GroundTruthBox, iou, nms
from .evaluation import average_precision, eval_report, f1, map50, pr_curve
from .tensor import Tensor, no_grad
from .toynet import (ModelConfig, build_toy_net, decode, flops_estimate,
                     forward, load_checkpoint, predict, save_checkpoint,
                     train_toy)

__all__ = [
    "Tensor", "no_grad", "__version__",
    "DetectionBox", "GroundTruthBox", "iou", "nms",
    "average_precision", "eval_report", "f1", "map50", "pr_curve",
    "ModelConfig", "build_toy_net", "decode", "flops_estimate", "forward",
    "load_checkpoint", "predict", "save_checkpoint", "train_toy",
]

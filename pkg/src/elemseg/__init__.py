"""Referring-expression segmentation over images with text-labeled elements."""

from .data import Sample, load_dataset, load_split
from .elements import Element
from .metrics import EvalReport, accuracy_hit, evaluate, iou
from .model import (ModelConfig, SegmentationModel, SegmentationOutput,
                    load_checkpoint, predict_mask, predict_pixel, save_checkpoint)
from .screens import GeneratorSpec, generate_dataset, render_screen
from .tensor import Graph, Tensor
from .textenc import encode_text, normalize_text
from .training import TrainConfig, run_ablation_grid, train

__version__ = "0.1.0"

__all__ = [
    "Element", "EvalReport", "GeneratorSpec", "Graph", "ModelConfig", "Sample",
    "SegmentationModel", "SegmentationOutput", "Tensor", "TrainConfig",
    "accuracy_hit", "encode_text", "evaluate", "generate_dataset", "iou",
    "load_checkpoint", "load_dataset", "load_split", "normalize_text",
    "predict_mask", "predict_pixel", "render_screen", "run_ablation_grid",
    "save_checkpoint", "train",
]

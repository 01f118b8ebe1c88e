"""Segmentation metrics and dataset evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Sample
from .model import SegmentationModel, SegmentationOutput, predict_mask, predict_pixel
from .tensor import blas_single_thread


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of two binary masks (0 for an empty prediction)."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    if not truth.any():
        raise ValueError("ground-truth mask is empty")
    union = np.count_nonzero(pred | truth)
    return np.count_nonzero(pred & truth) / union


def accuracy_hit(output: SegmentationOutput, truth: np.ndarray) -> int:
    """1 iff the highest-probability pixel lands inside the ground truth."""
    truth = np.asarray(truth, dtype=bool)
    if truth.shape != output.probabilities.shape[:2]:
        raise ValueError(
            f"mask shape {truth.shape} does not match output {output.probabilities.shape}")
    r, c = predict_pixel(output)
    return int(truth[r, c])


@dataclass
class EvalReport:
    split: str
    count: int
    miou: float
    accuracy: float
    family_accuracy: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "split": self.split,
            "count": self.count,
            "miou": self.miou,
            "accuracy": self.accuracy,
            "family_accuracy": {k: self.family_accuracy[k] for k in sorted(self.family_accuracy)},
        }, sort_keys=True)


def evaluate(model: SegmentationModel, samples: Sequence[Sample],
             split: str = "", threshold: float = 0.5) -> EvalReport:
    """mIOU and argmax-pixel accuracy over a split; deterministic in its inputs."""
    if not samples:
        raise ValueError(f"evaluation split {split!r} is empty")
    iou_sum = 0.0
    hits = 0
    fam_hits: dict[str, list[int]] = {}
    with blas_single_thread():
        for sample in samples:
            out = model.infer(sample.image, sample.elements, sample.expression)
            iou_sum += iou(predict_mask(out, threshold), sample.mask)
            hit = accuracy_hit(out, sample.mask)
            hits += hit
            fam_hits.setdefault(sample.family, []).append(hit)
    return EvalReport(
        split=split,
        count=len(samples),
        miou=iou_sum / len(samples),
        accuracy=hits / len(samples),
        family_accuracy={fam: sum(h) / len(h) for fam, h in fam_hits.items()},
    )

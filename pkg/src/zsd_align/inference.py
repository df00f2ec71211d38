"""From per-cell predictions to scored detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedding import ClassifierMatrix, TemperatureParam
from .loss import batch_scores
from .model import ToyModel, cxcywh_to_xyxy, forward_cells, stack_cells


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2
    class_index: int
    confidence: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")


@dataclass(frozen=True)
class InferenceConfig:
    objectness_threshold: float = 0.1
    score_cutoff: float = 0.01
    nms_iou: float = 0.5
    max_detections: int = 100

    def __post_init__(self):
        for name in ("objectness_threshold", "score_cutoff", "nms_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner-format boxes."""
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise ValueError(f"degenerate box {tuple(box)}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def rank_order(confidences: Sequence[float]) -> list[int]:
    """Indices by descending confidence, ties by lower index."""
    return sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))


def nms(dets: Sequence[Detection], iou_th: float = 0.5) -> list[int]:
    """Per-class greedy suppression; returns kept indices in rank order."""
    if not dets:
        return []
    order = rank_order([d.confidence for d in dets])
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    overlaps = iou_matrix(boxes, boxes)
    kept: list[int] = []
    kept_by_class: dict[int, list[int]] = {}
    for i in order:
        same = kept_by_class.setdefault(dets[i].class_index, [])
        if all(overlaps[i, j] <= iou_th for j in same):
            same.append(i)
            kept.append(i)
    return kept


def _to_detections(boxes_xyxy: np.ndarray, scores: np.ndarray) -> list[Detection]:
    boxes = np.clip(boxes_xyxy, 0.0, 1.0)
    out = []
    for box, s in zip(boxes, scores):
        if not (box[2] > box[0] and box[3] > box[1]):
            continue
        k = int(np.argmax(s))  # first maximum on ties
        out.append(Detection(tuple(float(v) for v in box), k, float(min(1.0, s[k]))))
    return out


def predict(
    model: ToyModel,
    features: np.ndarray,
    C_eval: ClassifierMatrix,
    tau: TemperatureParam,
    cfg: InferenceConfig = InferenceConfig(),
) -> list[Detection]:
    """Objectness filter, cosine classification, score cutoff, NMS, top-k.

    Confidence is the best class score alone; objectness only gates.
    """
    out = forward_cells(model, stack_cells([features], model.in_dim))
    keep = np.flatnonzero(out.objectness >= cfg.objectness_threshold)
    if keep.size == 0:
        return []
    scores = batch_scores(out.emb[keep], C_eval.matrix, tau.scale)
    dets = _to_detections(cxcywh_to_xyxy(out.boxes[keep]), scores)
    dets = [d for d in dets if d.confidence >= cfg.score_cutoff]
    dets = [dets[i] for i in nms(dets, cfg.nms_iou)]
    return dets[: cfg.max_detections]

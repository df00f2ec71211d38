"""Pseudo ground-truth selection for image-label samples and mixed-batch loss composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import ClassifierMatrix, TemperatureParam
from .loss import batch_loss_grad, batch_scores, temperature_grad

TRAIN_OBJECTNESS_FILTER = 0.001
OVERSAMPLE_RATIO = 4.0

DET = "det"
CLS = "cls"


@dataclass(frozen=True)
class BoxPrediction:
    box: tuple[float, float, float, float]  # cx, cy, w, h (normalized)
    objectness: float
    embedding: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (self.box[2] > 0 and self.box[3] > 0):
            raise ValueError(f"box width and height must be positive: {self.box}")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness outside [0, 1]: {self.objectness}")


@dataclass(frozen=True)
class PseudoAssignment:
    selected_index: int | None
    score: float = 0.0

    @property
    def present(self) -> bool:
        return self.selected_index is not None


@dataclass(frozen=True)
class BatchComposition:
    n_detection: int
    n_classification: int

    def __post_init__(self):
        if self.n_detection < 0 or self.n_classification < 0 or self.batch_size < 1:
            raise ValueError(f"invalid batch composition {self}")

    @property
    def batch_size(self) -> int:
        return self.n_detection + self.n_classification


@dataclass(frozen=True)
class ClassificationImageLoss:
    """Loss of one image-label sample plus per-output gradients.

    Gradients for boxes and objectness are always zero; only the selected
    prediction's embedding row can be non-zero.
    """

    loss: float
    assignment: PseudoAssignment
    d_embeddings: np.ndarray
    d_boxes: np.ndarray
    d_objectness: np.ndarray
    d_log_scale: float


@dataclass(frozen=True)
class BatchLoss:
    box: float
    obj: float
    cls: float
    det_denominator: int
    cls_denominator: int

    @property
    def total(self) -> float:
        return self.box + self.obj + self.cls


def _single_label(t) -> int:
    if isinstance(t, (list, tuple, np.ndarray)):
        if len(t) != 1:
            raise ValueError(f"image-label samples must carry exactly one label, got {list(t)}")
        t = t[0]
    return int(t)


def filter_by_objectness(preds: Sequence[BoxPrediction], th_obj: float) -> list[int]:
    if not 0.0 <= th_obj <= 1.0:
        raise ValueError(f"objectness threshold outside [0, 1]: {th_obj}")
    return [i for i, p in enumerate(preds) if p.objectness >= th_obj]


def select_from_arrays(
    objectness: np.ndarray, embeddings: np.ndarray, C: np.ndarray, scale: float, t: int, th_obj: float
) -> PseudoAssignment:
    """Array form of :func:`select_pseudo_box` used by the trainer."""
    keep = np.flatnonzero(objectness >= th_obj)
    if keep.size == 0:
        return PseudoAssignment(None, 0.0)
    s = batch_scores(embeddings[keep], C, scale)[:, t]
    j = int(np.argmax(s))  # first maximum -> lowest index
    return PseudoAssignment(int(keep[j]), float(s[j]))


def select_pseudo_box(
    preds: Sequence[BoxPrediction],
    C_C: ClassifierMatrix,
    tau: TemperatureParam,
    t,
    th_obj: float = TRAIN_OBJECTNESS_FILTER,
) -> PseudoAssignment:
    t = _single_label(t)
    if not 0 <= t < C_C.n_classes:
        raise IndexError(f"label {t} out of range for {C_C.n_classes} classes")
    if not preds:
        return PseudoAssignment(None, 0.0)
    obj = np.array([p.objectness for p in preds])
    emb = np.stack([np.asarray(p.embedding, dtype=np.float64) for p in preds])
    return select_from_arrays(obj, emb, C_C.matrix, tau.scale, t, th_obj)


def classification_image_loss(
    preds: Sequence[BoxPrediction],
    C_C: ClassifierMatrix,
    tau: TemperatureParam,
    t,
    th_obj: float = TRAIN_OBJECTNESS_FILTER,
) -> ClassificationImageLoss:
    t = _single_label(t)
    n = len(preds)
    d_emb = np.zeros((n, C_C.dim))
    zeros_box = np.zeros((n, 4))
    zeros_obj = np.zeros(n)
    a = select_pseudo_box(preds, C_C, tau, t, th_obj)
    if not a.present:
        return ClassificationImageLoss(0.0, a, d_emb, zeros_box, zeros_obj, 0.0)
    e = np.asarray(preds[a.selected_index].embedding, dtype=np.float64)
    loss, dE, dlog = batch_loss_grad(e[None, :], C_C.matrix, tau.scale, np.array([t]))
    d_emb[a.selected_index] = dE[0]
    return ClassificationImageLoss(
        float(loss[0]), a, d_emb, zeros_box, zeros_obj, temperature_grad(float(dlog[0]), tau)
    )


def compose_batch_loss(
    det_losses: Sequence[tuple[float, float, float | None]],
    cls_losses: Sequence[float | None],
    comp: BatchComposition,
) -> BatchLoss:
    """Combine per-sample losses of a mixed batch.

    ``det_losses`` holds one ``(box, obj, cls)`` triple per detection image and
    ``cls_losses`` one entry per image-label sample; ``None`` marks a sample
    that produced no classification loss (for example no pseudo box survived).
    Box and objectness terms are averaged over detection images only, the
    classification term over every sample that contributed one.
    """
    if len(det_losses) != comp.n_detection or len(cls_losses) != comp.n_classification:
        raise ValueError("loss lists do not match the batch composition")
    box = sum(d[0] for d in det_losses)
    obj = sum(d[1] for d in det_losses)
    contrib = [d[2] for d in det_losses if d[2] is not None] + [c for c in cls_losses if c is not None]
    n_det = comp.n_detection
    box = box / n_det if n_det else 0.0
    obj = obj / n_det if n_det else 0.0
    cls = sum(contrib) / len(contrib) if contrib else 0.0
    return BatchLoss(float(box), float(obj), float(cls), n_det, len(contrib))


def oversample_interleave(
    det_size: int, cls_size: int, ratio: float = OVERSAMPLE_RATIO, seed: int = 0, epoch: int = 0
) -> list[tuple[str, int]]:
    """One epoch of the joint training stream.

    Every image-label sample appears once; detection samples fill
    ``round(cls_size / ratio)`` slots, cycling through reshuffled passes of the
    detection set when more slots than samples are needed.
    """
    if det_size < 1 or cls_size < 1 or not ratio > 0:
        raise ValueError("det_size and cls_size must be >= 1 and ratio > 0")
    rng = np.random.default_rng([int(seed), int(epoch), 0x5EED])
    n_det = max(1, int(math.floor(cls_size / ratio + 0.5)))
    det_idx: list[int] = []
    while len(det_idx) < n_det:
        det_idx.extend(int(i) for i in rng.permutation(det_size))
    stream = [(DET, i) for i in det_idx[:n_det]] + [(CLS, int(i)) for i in range(cls_size)]
    order = rng.permutation(len(stream))
    return [stream[i] for i in order]

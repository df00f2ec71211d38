"""mAP@IoU and AR@k for detections grouped by image.

Detections are :class:`~zsd_align.inference.Detection` objects; ground truth
per image is a list of ``(box_xyxy, class_index)`` pairs in the same class
index space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .inference import Detection, iou_matrix, rank_order

N_RECALL_POINTS = 101

GroundTruth = Sequence[tuple[Sequence[float], int]]


@dataclass
class MatchResult:
    """Per class: TP/FP flags in descending-confidence order, and ground-truth counts."""

    flags: dict[int, list[bool]] = field(default_factory=dict)
    confidences: dict[int, list[float]] = field(default_factory=dict)
    n_gt: dict[int, int] = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(set(self.flags) | set(self.n_gt))


@dataclass
class EvalReport:
    subset: str
    per_class_ap: dict[str, float]
    map: float
    ar_at_100: float
    per_class_recall: dict[str, float] = field(default_factory=dict)
    classifier: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"subset": self.subset, "map": self.map, "ar100": self.ar_at_100,
                "per_class": self.per_class_ap, "per_class_recall": self.per_class_recall,
                "classifier": self.classifier}


def _match_image(dets: Sequence[Detection], gts: GroundTruth, iou_th: float) -> list[bool]:
    """TP flag per detection of one image (indexed like ``dets``)."""
    flags = [False] * len(dets)
    if not dets or not gts:
        return flags
    gt_boxes = np.array([g[0] for g in gts], dtype=np.float64)
    gt_cls = np.array([g[1] for g in gts])
    overlaps = iou_matrix(np.array([d.box for d in dets]), gt_boxes)
    matched = np.zeros(len(gts), dtype=bool)
    for i in rank_order([d.confidence for d in dets]):
        cand = (gt_cls == dets[i].class_index) & ~matched & (overlaps[i] >= iou_th)
        if not cand.any():
            continue
        row = np.where(cand, overlaps[i], -1.0)
        j = int(np.argmax(row))  # lowest gt index among equal IoUs
        matched[j] = True
        flags[i] = True
    return flags


def match_detections(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[GroundTruth],
    iou_th: float = 0.5,
) -> MatchResult:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth must cover the same images")
    records: dict[int, list[tuple[float, int, int, bool]]] = {}
    n_gt: dict[int, int] = {}
    for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        for _, k in gts:
            n_gt[int(k)] = n_gt.get(int(k), 0) + 1
        for i, (d, tp) in enumerate(zip(dets, _match_image(dets, gts, iou_th))):
            records.setdefault(d.class_index, []).append((d.confidence, img, i, tp))
    res = MatchResult(n_gt=n_gt)
    for k, recs in records.items():
        recs.sort(key=lambda r: (-r[0], r[1], r[2]))
        res.flags[k] = [r[3] for r in recs]
        res.confidences[k] = [r[0] for r in recs]
    return res


def pr_curve(match: MatchResult, cls: int) -> tuple[np.ndarray, np.ndarray]:
    flags = np.asarray(match.flags.get(cls, []), dtype=bool)
    n_gt = match.n_gt.get(cls, 0)
    if n_gt == 0 or flags.size == 0:
        return np.zeros(0), np.zeros(0)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    return tp / n_gt, tp / (tp + fp)


def average_precision(match: MatchResult, cls: int) -> float | None:
    """101-point interpolated AP; ``None`` when the class has no ground truth."""
    n_gt = match.n_gt.get(cls, 0)
    if n_gt == 0:
        return None
    flags = np.asarray(match.flags.get(cls, []), dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall threshold i/100 reached once tp * 100 >= i * n_gt (integer test, no rounding)
    total = 0.0
    steps = N_RECALL_POINTS - 1
    for i in range(N_RECALL_POINTS):
        idx = int(np.searchsorted(tp * steps, i * n_gt, side="left"))
        if idx < flags.size:
            total += envelope[idx]
    return float(total / N_RECALL_POINTS)


def mean_ap(per_class_ap: Mapping[int, float | None], subset: Iterable[int]) -> float:
    vals = [per_class_ap[k] for k in subset if per_class_ap.get(k) is not None]
    if not vals:
        raise ValueError("no class in the subset has ground truth")
    return float(sum(vals) / len(vals))


def _top_k(dets: Sequence[Detection], k: int) -> list[Detection]:
    order = rank_order([d.confidence for d in dets])[:k]
    return [dets[i] for i in sorted(order)]


def recall_per_class(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[GroundTruth],
    k: int = 100,
    iou_th: float = 0.5,
) -> dict[int, float]:
    match = match_detections([_top_k(d, k) for d in dets_per_image], gts_per_image, iou_th)
    return {c: sum(match.flags.get(c, [])) / n for c, n in match.n_gt.items() if n > 0}


def recall_at_k(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[GroundTruth],
    k: int = 100,
    iou_th: float = 0.5,
    subset: Iterable[int] | None = None,
) -> float:
    rec = recall_per_class(dets_per_image, gts_per_image, k, iou_th)
    keys = sorted(rec) if subset is None else [c for c in subset if c in rec]
    if not keys:
        raise ValueError("no class in the subset has ground truth")
    return float(sum(rec[c] for c in keys) / len(keys))


def evaluate(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[GroundTruth],
    names: Sequence[str],
    subset: Iterable[int] | None = None,
    subset_label: str = "all",
    iou_th: float = 0.5,
    k: int = 100,
) -> EvalReport:
    """Full report: per-class AP, mAP and AR@k over ``subset`` (default: all classes)."""
    subset = list(range(len(names))) if subset is None else list(subset)
    match = match_detections(dets_per_image, gts_per_image, iou_th)
    aps = {c: average_precision(match, c) for c in subset}
    rec = recall_per_class(dets_per_image, gts_per_image, k, iou_th)
    return EvalReport(
        subset=subset_label,
        per_class_ap={names[c]: aps[c] for c in subset if aps[c] is not None},
        map=mean_ap(aps, subset),
        ar_at_100=recall_at_k(dets_per_image, gts_per_image, k, iou_th, subset),
        per_class_recall={names[c]: rec[c] for c in subset if c in rec},
    )

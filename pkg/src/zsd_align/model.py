"""Per-cell grid detector with a decoupled embedding head, plus its detection losses.

The network is applied independently to every cell::

    h      = act(x @ W1 + b1)    act: identity (default) or tanh
    raw    = h @ Wb + bb      box offsets / log sizes
    logit  = h @ Wo + bo      objectness
    emb    = h @ We + be      class embedding

and boxes decode as ``cx = (col + 0.5 + tanh(raw0)) / G``,
``w = exp(raw2) / G`` (rows and heights alike).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .weak import BoxPrediction

log = logging.getLogger(__name__)

OBJ_EPS = 1e-7
PARAM_NAMES = ("W1", "b1", "Wb", "bb", "Wo", "bo", "We", "be")
ACTIVATIONS = ("identity", "tanh")
BOX_HEAD = ("Wb", "bb")
OBJ_HEAD = ("Wo", "bo")
EMB_HEAD = ("We", "be")


def param_shapes(in_dim: int, hidden: int, embed_dim: int) -> dict[str, tuple[int, ...]]:
    return {"W1": (in_dim, hidden), "b1": (hidden,), "Wb": (hidden, 4), "bb": (4,),
            "Wo": (hidden, 1), "bo": (1,), "We": (hidden, embed_dim), "be": (embed_dim,)}


@dataclass
class ToyModel:
    in_dim: int
    hidden: int
    embed_dim: int
    params: dict[str, np.ndarray] = field(repr=False)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        for name, shape in self.shapes().items():
            p = np.asarray(self.params[name], dtype=np.float64)
            if p.shape != shape:
                raise ValueError(f"parameter {name} has shape {p.shape}, expected {shape}")
            self.params[name] = p

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return param_shapes(self.in_dim, self.hidden, self.embed_dim)

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, embed_dim: int, activation: str = "identity") -> "ToyModel":
        shapes = param_shapes(in_dim, hidden, embed_dim)
        return cls(in_dim, hidden, embed_dim, {k: np.zeros(s) for k, s in shapes.items()}, activation)

    @classmethod
    def init(cls, in_dim: int, hidden: int, embed_dim: int, seed: int = 0,
             activation: str = "identity") -> "ToyModel":
        rng = np.random.default_rng([int(seed), 0x70D1])
        m = cls.zeros(in_dim, hidden, embed_dim, activation)
        m.params["W1"] = rng.standard_normal((in_dim, hidden)) / math.sqrt(in_dim)
        m.params["Wb"] = 0.1 * rng.standard_normal((hidden, 4)) / math.sqrt(hidden)
        m.params["Wo"] = 0.1 * rng.standard_normal((hidden, 1)) / math.sqrt(hidden)
        m.params["We"] = rng.standard_normal((hidden, embed_dim)) / math.sqrt(hidden)
        return m

    def copy(self) -> "ToyModel":
        return ToyModel(self.in_dim, self.hidden, self.embed_dim,
                        {k: v.copy() for k, v in self.params.items()}, self.activation)


@dataclass
class CellBatch:
    """Cells of one or more images stacked row-wise, with their grid positions."""

    x: np.ndarray
    col: np.ndarray
    row: np.ndarray
    grid: np.ndarray
    offsets: list[int]  # start row of each image; len = n_images + 1

    def image_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])


def stack_cells(features_list: Sequence[np.ndarray], in_dim: int | None = None) -> CellBatch:
    xs, cols, rows, grids, offsets = [], [], [], [], [0]
    for f in features_list:
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 3 or f.shape[0] != f.shape[1]:
            raise ValueError(f"features must be a square G x G x F tensor, got shape {f.shape}")
        if in_dim is not None and f.shape[2] != in_dim:
            raise ValueError(f"feature dimension {f.shape[2]} does not match model input {in_dim}")
        g = f.shape[0]
        r, c = np.divmod(np.arange(g * g), g)
        xs.append(f.reshape(g * g, -1))
        cols.append(c)
        rows.append(r)
        grids.append(np.full(g * g, g))
        offsets.append(offsets[-1] + g * g)
    return CellBatch(np.concatenate(xs), np.concatenate(cols), np.concatenate(rows),
                     np.concatenate(grids).astype(np.float64), offsets)


@dataclass
class Outputs:
    cells: CellBatch
    hidden: np.ndarray
    raw: np.ndarray
    logit: np.ndarray
    emb: np.ndarray

    @property
    def boxes(self) -> np.ndarray:
        """Decoded (cx, cy, w, h) per cell."""
        g = self.cells.grid
        return np.stack([
            (self.cells.col + 0.5 + np.tanh(self.raw[:, 0])) / g,
            (self.cells.row + 0.5 + np.tanh(self.raw[:, 1])) / g,
            np.exp(self.raw[:, 2]) / g,
            np.exp(self.raw[:, 3]) / g,
        ], axis=1)

    @property
    def objectness(self) -> np.ndarray:
        return sigmoid(self.logit)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_cells(model: ToyModel, cells: CellBatch) -> Outputs:
    p = model.params
    if cells.x.shape[1] != model.in_dim:
        raise ValueError(f"feature dimension {cells.x.shape[1]} does not match model input {model.in_dim}")
    h = cells.x @ p["W1"] + p["b1"]
    if model.activation == "tanh":
        h = np.tanh(h)
    return Outputs(cells, h, h @ p["Wb"] + p["bb"], (h @ p["Wo"] + p["bo"])[:, 0], h @ p["We"] + p["be"])


def forward(model: ToyModel, features: np.ndarray) -> list[BoxPrediction]:
    """One prediction per grid cell, row-major."""
    out = forward_cells(model, stack_cells([features], model.in_dim))
    boxes, obj = out.boxes, out.objectness
    return [BoxPrediction(tuple(float(v) for v in boxes[i]), float(obj[i]), out.emb[i].copy())
            for i in range(len(obj))]


def backward(model: ToyModel, out: Outputs, d_boxes: np.ndarray, d_logit: np.ndarray,
             d_emb: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given gradients on decoded boxes, objectness logits and embeddings."""
    p = model.params
    g = out.cells.grid
    t0, t1 = np.tanh(out.raw[:, 0]), np.tanh(out.raw[:, 1])
    d_raw = np.stack([
        d_boxes[:, 0] * (1 - t0 ** 2) / g,
        d_boxes[:, 1] * (1 - t1 ** 2) / g,
        d_boxes[:, 2] * np.exp(out.raw[:, 2]) / g,
        d_boxes[:, 3] * np.exp(out.raw[:, 3]) / g,
    ], axis=1)
    h = out.hidden
    grads = {
        "Wb": h.T @ d_raw, "bb": d_raw.sum(0),
        "Wo": h.T @ d_logit[:, None], "bo": np.array([d_logit.sum()]),
        "We": h.T @ d_emb, "be": d_emb.sum(0),
    }
    d_h = d_raw @ p["Wb"].T + d_logit[:, None] @ p["Wo"].T + d_emb @ p["We"].T
    d_pre = d_h * (1 - h ** 2) if model.activation == "tanh" else d_h
    grads["W1"] = out.cells.x.T @ d_pre
    grads["b1"] = d_pre.sum(0)
    return grads


# -- detection losses -------------------------------------------------------

def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def assign_center_cells(ground_truth, grid: int) -> list[tuple[int, int]]:
    """Map each object to the cell holding its box center as (cell index, gt index).

    A second object landing on an already claimed cell is dropped.
    """
    taken: dict[int, int] = {}
    for j, (box, _) in enumerate(ground_truth):
        x1, y1, x2, y2 = box
        c = min(grid - 1, max(0, int(math.floor((x1 + x2) / 2 * grid))))
        r = min(grid - 1, max(0, int(math.floor((y1 + y2) / 2 * grid))))
        cell = r * grid + c
        if cell in taken:
            log.warning("objects %d and %d share center cell %d; dropping %d", taken[cell], j, cell, j)
            continue
        taken[cell] = j
    return sorted(taken.items())


def iou_cxcywh_grad(pred: np.ndarray, gt_xyxy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU of center-format predictions against corner-format targets, with d IoU / d pred."""
    cx, cy, w, h = pred.T
    px1, px2, py1, py2 = cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2
    gx1, gy1, gx2, gy2 = gt_xyxy.T
    ix = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    iy = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    overlap = (ix > 0) & (iy > 0)
    ix, iy = np.clip(ix, 0, None), np.clip(iy, 0, None)
    inter = ix * iy
    ap = w * h
    union = ap + (gx2 - gx1) * (gy2 - gy1) - inter
    iou = inter / union
    d_inter = (union + inter) / union ** 2
    d_ap = -inter / union ** 2
    dix_r = (px2 < gx2).astype(float)
    dix_l = -(px1 > gx1).astype(float)
    diy_r = (py2 < gy2).astype(float)
    diy_l = -(py1 > gy1).astype(float)
    dI = np.stack([
        iy * (dix_r + dix_l),
        ix * (diy_r + diy_l),
        iy * 0.5 * (dix_r - dix_l),
        ix * 0.5 * (diy_r - diy_l),
    ], axis=1) * overlap[:, None]
    dA = np.stack([np.zeros_like(w), np.zeros_like(w), h, w], axis=1)
    return iou, d_inter[:, None] * dI + d_ap[:, None] * dA


def bce(p: np.ndarray, target: np.ndarray) -> np.ndarray:
    p = np.clip(p, OBJ_EPS, 1 - OBJ_EPS)
    return -(target * np.log(p) + (1 - target) * np.log(1 - p))


@dataclass
class DetectionLossGrad:
    box: float
    obj: float
    d_boxes: np.ndarray
    d_logit: np.ndarray
    assigned: list[tuple[int, int]]


def detection_loss_grad(boxes: np.ndarray, obj: np.ndarray, ground_truth, grid: int) -> DetectionLossGrad:
    """Box (1 - IoU) and objectness (BCE) losses of one image with gradients.

    Gradients are on decoded (cx, cy, w, h) and on the objectness logit.
    """
    n = len(obj)
    assigned = assign_center_cells(ground_truth, grid)
    target = np.zeros(n)
    d_boxes = np.zeros((n, 4))
    box_loss = 0.0
    if assigned:
        cells = np.array([c for c, _ in assigned])
        gts = np.array([ground_truth[j][0] for _, j in assigned], dtype=np.float64)
        target[cells] = 1.0
        iou, d_iou = iou_cxcywh_grad(boxes[cells], gts)
        box_loss = float(np.mean(1.0 - iou))
        d_boxes[cells] = -d_iou / len(cells)
    obj_loss = float(np.mean(bce(obj, target)))
    inside = (obj > OBJ_EPS) & (obj < 1 - OBJ_EPS)
    d_logit = np.where(inside, obj - target, 0.0) / n
    return DetectionLossGrad(box_loss, obj_loss, d_boxes, d_logit, assigned)


def detection_losses(preds: Sequence[BoxPrediction], ground_truth) -> tuple[float, float]:
    """Box loss and objectness loss of one image's per-cell predictions."""
    g = math.isqrt(len(preds))
    if g * g != len(preds):
        raise ValueError("predictions must cover a square grid")
    boxes = np.array([p.box for p in preds], dtype=np.float64)
    obj = np.array([p.objectness for p in preds], dtype=np.float64)
    r = detection_loss_grad(boxes, obj, ground_truth, g)
    return r.box, r.obj

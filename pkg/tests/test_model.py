import logging
import math

import numpy as np
import pytest

from oracles import box_iou
from zsd_align.model import (
    OBJ_EPS, ToyModel, backward, detection_loss_grad, detection_losses, forward, forward_cells, stack_cells,
)
from zsd_align.weak import BoxPrediction


def test_zero_model_predicts_cell_centers():
    m = ToyModel.zeros(7, 5, 4)
    g = 4
    preds = forward(m, np.random.default_rng(0).standard_normal((g, g, 7)))
    assert len(preds) == g * g
    for i, p in enumerate(preds):
        r, c = divmod(i, g)
        assert p.box == pytest.approx(((c + 0.5) / g, (r + 0.5) / g, 1 / g, 1 / g), abs=1e-15)
        assert p.objectness == 0.5
        assert not p.embedding.any()


def test_per_cell_locality():
    rng = np.random.default_rng(1)
    m = ToyModel.init(6, 8, 5, seed=1, activation="tanh")
    f = rng.standard_normal((3, 3, 6))
    base = forward(m, f)
    f2 = f.copy()
    f2[1, 2] += rng.standard_normal(6)
    moved = forward(m, f2)
    changed = [i for i, (a, b) in enumerate(zip(base, moved))
               if a.box != b.box or a.objectness != b.objectness or not np.array_equal(a.embedding, b.embedding)]
    assert changed == [1 * 3 + 2]


def test_dimension_mismatch():
    m = ToyModel.zeros(6, 4, 3)
    with pytest.raises(ValueError, match="feature dimension"):
        forward(m, np.zeros((3, 3, 5)))
    with pytest.raises(ValueError):
        ToyModel(6, 4, 3, {"W1": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        ToyModel.zeros(6, 4, 3, activation="relu")


def _preds_from(boxes, obj, d=2):
    return [BoxPrediction(tuple(b), float(o), np.ones(d)) for b, o in zip(boxes, obj)]


def test_perfect_predictions_losses():
    g = 4
    gt = [((0.1, 0.1, 0.4, 0.3), 0), ((0.55, 0.6, 0.95, 0.9), 1)]
    boxes = np.tile([0.5, 0.5, 0.25, 0.25], (g * g, 1))
    obj = np.full(g * g, OBJ_EPS / 10)
    for (x1, y1, x2, y2), _ in gt:
        cell = int((y1 + y2) / 2 * g) * g + int((x1 + x2) / 2 * g)
        boxes[cell] = [(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1]
        obj[cell] = 1.0
    box, objl = detection_losses(_preds_from(boxes, obj), gt)
    assert box == pytest.approx(0.0, abs=1e-12)
    assert objl <= -math.log(1 - OBJ_EPS) + 1e-15


def test_detection_losses_match_direct_recomputation():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = int(rng.integers(2, 6))
        n_obj = int(rng.integers(0, 4))
        gt = []
        for _ in range(n_obj):
            w, h = rng.uniform(0.1, 0.4, 2)
            cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
            gt.append(((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), int(rng.integers(3))))
        boxes = np.column_stack([rng.uniform(0, 1, (g * g, 2)), rng.uniform(0.05, 0.5, (g * g, 2))])
        obj = rng.uniform(0, 1, g * g)
        box, objl = detection_losses(_preds_from(boxes, obj), gt)
        # oracle: walk the cells, claim each object's center cell in order
        claimed = {}
        for j, (b, _) in enumerate(gt):
            cell = min(g - 1, int((b[1] + b[3]) / 2 * g)) * g + min(g - 1, int((b[0] + b[2]) / 2 * g))
            claimed.setdefault(cell, j)
        ious = []
        for cell, j in claimed.items():
            cx, cy, w, h = boxes[cell]
            ious.append(box_iou((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), gt[j][0]))
        ref_box = sum(1 - v for v in ious) / len(ious) if ious else 0.0
        ref_obj = 0.0
        for i in range(g * g):
            p = min(max(obj[i], OBJ_EPS), 1 - OBJ_EPS)
            ref_obj += -math.log(p) if i in claimed else -math.log(1 - p)
        ref_obj /= g * g
        assert abs(box - ref_box) <= 1e-12
        assert abs(objl - ref_obj) <= 1e-12


def test_shared_center_cell_drops_later(caplog):
    gt = [((0.1, 0.1, 0.4, 0.4), 0), ((0.15, 0.15, 0.35, 0.35), 1)]
    boxes = np.tile([0.5, 0.5, 0.2, 0.2], (4, 1))
    with caplog.at_level(logging.WARNING):
        r = detection_loss_grad(boxes, np.full(4, 0.5), gt, 2)
    assert r.assigned == [(0, 0)]
    assert "share center cell" in caplog.text


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    for act in ("identity", "tanh"):
        m = ToyModel.init(5, 6, 3, seed=2, activation=act)
        cells = stack_cells([rng.standard_normal((3, 3, 5)), rng.standard_normal((2, 2, 5))])
        wb, wl, we = rng.standard_normal((13, 4)), rng.standard_normal(13), rng.standard_normal((13, 3))

        def scalar(model):
            out = forward_cells(model, cells)
            return float(np.sum(out.boxes * wb) + np.sum(out.logit * wl) + np.sum(out.emb * we))

        out = forward_cells(m, cells)
        grads = backward(m, out, wb, wl, we)
        for name, p in m.params.items():
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                for sgn in (1, -1):
                    mm = m.copy()
                    mm.params[name][idx] += sgn * 1e-6
                    num[idx] += sgn * scalar(mm) / 2e-6
            err = np.linalg.norm(num - grads[name]) / max(np.linalg.norm(num), 1e-12)
            assert err < 1e-6, (act, name, err)


def test_init_deterministic():
    a = ToyModel.init(5, 4, 3, seed=7)
    b = ToyModel.init(5, 4, 3, seed=7)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = a.copy()
    c.params["W1"][0, 0] += 1
    assert a.params["W1"][0, 0] != c.params["W1"][0, 0]

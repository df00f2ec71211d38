import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import softmax, softmax_loss
from zsd_align.embedding import ClassifierMatrix, TemperatureParam
from zsd_align.loss import alignment_loss
from zsd_align.weak import (
    CLS, DET, BatchComposition, BoxPrediction, classification_image_loss, compose_batch_loss,
    filter_by_objectness, oversample_interleave, select_pseudo_box,
)


def make_preds(rng, n, d, obj=None):
    objs = rng.uniform(0, 1, n) if obj is None else obj
    return [BoxPrediction((0.5, 0.5, 0.2, 0.3), float(o), rng.standard_normal(d)) for o in objs]


def clf(rng, d, n):
    m = rng.standard_normal((d, n))
    return ClassifierMatrix(tuple(map(str, range(n))), m / np.linalg.norm(m, axis=0))


def exhaustive_select(preds, C, scale, t, th):
    """Reference: scan every survivor, keep the first strict maximum of s_t."""
    cols = [list(C.matrix[:, i]) for i in range(C.n_classes)]
    best, best_s = None, -1.0
    for i, p in enumerate(preds):
        if p.objectness < th:
            continue
        s = softmax(list(p.embedding), cols, scale)[t]
        if s > best_s:
            best, best_s = i, s
    return best, best_s


def test_box_prediction_validation():
    with pytest.raises(ValueError):
        BoxPrediction((0.5, 0.5, 0.0, 0.1), 0.5, np.ones(2))
    with pytest.raises(ValueError):
        BoxPrediction((0.5, 0.5, 0.1, 0.1), 1.5, np.ones(2))


def test_filter_trivial_cases():
    rng = np.random.default_rng(0)
    preds = make_preds(rng, 6, 3)
    assert filter_by_objectness(preds, 0.0) == list(range(6))
    low = make_preds(rng, 4, 3, obj=[0.0, 0.0005, 0.0009, 0.0])
    assert filter_by_objectness(low, 0.001) == []


@given(st.integers(0, 10_000))
def test_filter_matches_linear_scan(seed):
    rng = np.random.default_rng(seed)
    objs = rng.choice([0.0, 0.0005, 0.001, 0.0011, 0.5, 1.0], size=12)
    preds = make_preds(rng, 12, 3, obj=objs)
    assert filter_by_objectness(preds, 0.001) == [i for i in range(12) if objs[i] >= 0.001]


def test_select_no_survivor_and_single_survivor():
    rng = np.random.default_rng(1)
    C = clf(rng, 4, 3)
    tau = TemperatureParam()
    none = make_preds(rng, 5, 4, obj=[0.0] * 5)
    a = select_pseudo_box(none, C, tau, 1)
    assert not a.present
    loss = classification_image_loss(none, C, tau, 1)
    assert loss.loss == 0.0 and not loss.d_embeddings.any() and loss.d_log_scale == 0.0
    one = make_preds(rng, 5, 4, obj=[0.0, 0.0, 0.7, 0.0, 0.0])
    assert select_pseudo_box(one, C, tau, 1).selected_index == 2
    r = classification_image_loss(one, C, tau, 1)
    assert r.loss == pytest.approx(alignment_loss(one[2].embedding, C, tau, 1), abs=1e-12)


def test_select_ties_lowest_index():
    C = ClassifierMatrix(("a", "b"), np.eye(2))
    e = np.array([1.0, 0.2])
    preds = [BoxPrediction((0.5, 0.5, 0.1, 0.1), 0.5, e) for _ in range(4)]
    assert select_pseudo_box(preds, C, TemperatureParam(), 0).selected_index == 0


@settings(max_examples=100)
@given(st.integers(0, 100_000))
def test_select_matches_exhaustive_argmax(seed):
    rng = np.random.default_rng(seed)
    n_cls = int(rng.integers(1, 6))
    C = clf(rng, 5, n_cls)
    preds = make_preds(rng, 10, 5)
    t = int(rng.integers(n_cls))
    log_scale = float(rng.uniform(0, math.log(100)))
    a = select_pseudo_box(preds, C, TemperatureParam(log_scale), t, 0.3)
    idx, s = exhaustive_select(preds, C, math.exp(log_scale), t, 0.3)
    assert a.selected_index == idx
    if idx is not None:
        assert a.score == pytest.approx(s, abs=1e-12)


@given(st.integers(0, 10_000))
def test_select_invariant_to_permuting_non_maximal(seed):
    rng = np.random.default_rng(seed)
    C = clf(rng, 4, 3)
    preds = make_preds(rng, 8, 4, obj=np.full(8, 0.5))
    a = select_pseudo_box(preds, C, TemperatureParam(), 0)
    best = preds[a.selected_index]
    others = [p for i, p in enumerate(preds) if i != a.selected_index]
    perm = rng.permutation(len(others))
    shuffled = [others[i] for i in perm]
    shuffled.insert(3, best)
    b = select_pseudo_box(shuffled, C, TemperatureParam(), 0)
    assert shuffled[b.selected_index] is best


def test_classification_loss_routes_only_selected_embedding():
    rng = np.random.default_rng(7)
    C = clf(rng, 6, 4)
    tau = TemperatureParam(1.5)
    preds = make_preds(rng, 9, 6, obj=np.full(9, 0.5))
    r = classification_image_loss(preds, C, tau, 2)
    k = r.assignment.selected_index
    assert not r.d_boxes.any() and not r.d_objectness.any()
    mask = np.ones(9, dtype=bool)
    mask[k] = False
    assert not r.d_embeddings[mask].any()
    # finite-difference probe: nudging a non-selected embedding by a tiny amount leaves the loss unchanged
    cols = [list(C.matrix[:, i]) for i in range(4)]
    j = int(np.flatnonzero(mask)[0])
    for h in (1e-6, -1e-6):
        moved = list(preds)
        moved[j] = BoxPrediction(preds[j].box, preds[j].objectness, preds[j].embedding + h)
        assert classification_image_loss(moved, C, tau, 2).loss == r.loss
    assert r.loss == pytest.approx(softmax_loss(list(preds[k].embedding), cols, tau.scale, 2), abs=1e-12)


def test_multi_label_rejected():
    rng = np.random.default_rng(0)
    C = clf(rng, 3, 3)
    preds = make_preds(rng, 3, 3)
    with pytest.raises(ValueError, match="exactly one label"):
        classification_image_loss(preds, C, TemperatureParam(), [0, 1])
    assert classification_image_loss(preds, C, TemperatureParam(), [1]).assignment.present in (True, False)


def test_compose_all_detection_is_plain_average():
    det = [(0.2, 0.4, 1.0), (0.6, 0.8, 2.0)]
    out = compose_batch_loss(det, [], BatchComposition(2, 0))
    assert (out.box, out.obj, out.cls) == pytest.approx((0.4, 0.6, 1.5))
    assert out.total == pytest.approx(2.5)


def test_compose_no_detection_zero_box_obj():
    out = compose_batch_loss([], [1.0, None, 3.0], BatchComposition(0, 3))
    assert out.box == 0.0 and out.obj == 0.0
    assert out.cls == pytest.approx(2.0)
    assert out.cls_denominator == 2


def test_compose_one_det_three_cls_fixture():
    # hand computation: box 0.5/1, obj 0.25/1, cls (1 + 2 + 4) / 3 (one cls sample had no survivor)
    out = compose_batch_loss([(0.5, 0.25, 1.0)], [2.0, None, 4.0], BatchComposition(1, 3))
    assert out.det_denominator == 1
    assert out.cls_denominator == 3 <= 4
    assert out.box == 0.5 and out.obj == 0.25
    assert out.cls == pytest.approx(7.0 / 3.0, abs=1e-15)


@given(st.lists(st.floats(0, 5), min_size=3, max_size=3), st.floats(0.1, 4))
def test_compose_linear(vals, a):
    comp = BatchComposition(1, 2)
    base = compose_batch_loss([(vals[0], vals[1], vals[2])], [1.0, 2.0], comp)
    scaled = compose_batch_loss([(a * vals[0], vals[1], vals[2])], [1.0, 2.0], comp)
    assert scaled.box == pytest.approx(a * base.box)
    assert scaled.obj == base.obj and scaled.cls == base.cls


def test_compose_validates_counts():
    with pytest.raises(ValueError):
        compose_batch_loss([(1, 1, 1)], [], BatchComposition(2, 0))
    with pytest.raises(ValueError):
        BatchComposition(0, 0)


def test_interleave_400_cls_gives_100_det():
    stream = oversample_interleave(120, 400, 4.0, seed=0)
    kinds = Counter(k for k, _ in stream)
    assert kinds[CLS] == 400 and kinds[DET] == 100
    assert sorted(i for k, i in stream if k == CLS) == list(range(400))


def test_interleave_ratio_one_equal_sizes():
    stream = oversample_interleave(50, 50, 1.0, seed=3)
    assert sorted(i for k, i in stream if k == DET) == list(range(50))
    assert sorted(i for k, i in stream if k == CLS) == list(range(50))


def test_interleave_repeats_small_detection_set():
    stream = oversample_interleave(3, 40, 4.0, seed=1)
    det = [i for k, i in stream if k == DET]
    assert len(det) == 10
    assert set(det) == {0, 1, 2}


def test_interleave_deterministic_and_epoch_dependent():
    a = oversample_interleave(30, 80, 4.0, seed=11, epoch=2)
    assert a == oversample_interleave(30, 80, 4.0, seed=11, epoch=2)
    assert a != oversample_interleave(30, 80, 4.0, seed=11, epoch=3)


@given(st.integers(1, 60), st.integers(1, 300), st.floats(0.5, 8.0))
def test_interleave_ratio_within_one_sample(det_size, cls_size, ratio):
    stream = oversample_interleave(det_size, cls_size, ratio, seed=0)
    n_det = sum(1 for k, _ in stream if k == DET)
    assert sorted(i for k, i in stream if k == CLS) == list(range(cls_size))
    assert abs(n_det - cls_size / ratio) <= 1.0 or n_det == 1


def test_interleave_errors():
    with pytest.raises(ValueError):
        oversample_interleave(0, 5)
    with pytest.raises(ValueError):
        oversample_interleave(5, 5, 0.0)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ap_101, map_and_ar
from zsd_align.evaluation import (
    MatchResult, average_precision, evaluate, match_detections, mean_ap, pr_curve, recall_at_k,
)
from zsd_align.inference import Detection

BOX = (0.1, 0.1, 0.4, 0.4)
FAR = (0.6, 0.6, 0.9, 0.9)


def random_instance(rng, n_images=None, n_cls=3, k_dets=8):
    images = []
    for _ in range(int(rng.integers(1, 6)) if n_images is None else n_images):
        gts = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.uniform(0, 0.7, 2)
            w, h = rng.uniform(0.1, 0.3, 2)
            gts.append(((x, y, x + w, y + h), int(rng.integers(n_cls))))
        dets = []
        for _ in range(int(rng.integers(0, k_dets))):
            if gts and rng.uniform() < 0.6:
                (x1, y1, x2, y2), c = gts[int(rng.integers(len(gts)))]
                j = rng.normal(0, 0.04, 4)
                box = (x1 + j[0], y1 + j[1], max(x2 + j[2], x1 + j[0] + 0.01), max(y2 + j[3], y1 + j[1] + 0.01))
                c = c if rng.uniform() < 0.8 else int(rng.integers(n_cls))
            else:
                x, y = rng.uniform(0, 0.7, 2)
                box, c = (x, y, x + 0.2, y + 0.2), int(rng.integers(n_cls))
            dets.append((tuple(float(v) for v in box), c, float(rng.integers(1, 20) / 20)))
        images.append((dets, gts))
    return images


def to_lib(images):
    dets = [[Detection(b, c, s) for b, c, s in d] for d, _ in images]
    return dets, [g for _, g in images]


def test_fp_then_tp_is_half():
    dets = [[Detection(FAR, 0, 0.9), Detection(BOX, 0, 0.8)]]
    rep = evaluate(dets, [[(BOX, 0)]], ["a"])
    # precision envelope is 0.5 at every recall level
    assert rep.map == pytest.approx(0.5, abs=1e-12)


def test_single_tp_is_one_and_no_detections_is_zero():
    assert evaluate([[Detection(BOX, 0, 0.7)]], [[(BOX, 0)]], ["a"]).map == 1.0
    assert evaluate([[]], [[(BOX, 0)]], ["a"]).map == 0.0


def test_class_without_ground_truth_is_excluded():
    dets = [[Detection(BOX, 0, 0.7), Detection(FAR, 1, 0.9)]]
    rep = evaluate(dets, [[(BOX, 0)]], ["a", "b"])
    assert rep.per_class_ap == {"a": 1.0}
    assert rep.map == 1.0


def test_duplicate_detection_counts_once():
    dets = [[Detection(BOX, 0, 0.9), Detection(BOX, 0, 0.8)]]
    m = match_detections(dets, [[(BOX, 0)]])
    assert m.flags[0] == [True, False]
    rec, prec = pr_curve(m, 0)
    assert list(rec) == [1.0, 1.0] and list(prec) == [1.0, 0.5]


def test_iou_threshold_inclusive():
    # IoU of (0,0,2,1) against (0,0,1,1) is exactly 0.5
    dets = [[Detection((0.0, 0.0, 0.5, 0.25), 0, 0.9)]]
    gts = [[((0.0, 0.0, 0.25, 0.25), 0)]]
    assert match_detections(dets, gts, 0.5).flags[0] == [True]


def test_ap_matches_exact_fraction_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        flags = list(rng.uniform(size=n) < 0.5)
        n_gt = max(1, sum(flags) + int(rng.integers(0, 3)))
        m = MatchResult(flags={0: flags}, n_gt={0: n_gt})
        assert abs(average_precision(m, 0) - ap_101(flags, n_gt)) <= 1e-9


@settings(max_examples=100)
@given(st.integers(0, 100_000))
def test_report_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    images = random_instance(rng)
    aps, mean, ar = map_and_ar(images, 3)
    dets, gts = to_lib(images)
    if mean is None:
        with pytest.raises(ValueError):
            evaluate(dets, gts, ["a", "b", "c"])
        return
    rep = evaluate(dets, gts, ["a", "b", "c"])
    assert abs(rep.map - mean) <= 1e-9
    assert abs(rep.ar_at_100 - ar) <= 1e-9
    for c, v in aps.items():
        assert abs(rep.per_class_ap["abc"[c]] - v) <= 1e-9


def test_recall_truncates_top_k_across_classes():
    # two objects of different classes; with k=1 only the more confident detection counts
    dets = [[Detection(BOX, 0, 0.9), Detection(FAR, 1, 0.8)]]
    gts = [[(BOX, 0), (FAR, 1)]]
    assert recall_at_k(dets, gts, k=1) == pytest.approx(0.5)
    assert recall_at_k(dets, gts, k=100) == 1.0
    aps, _, ar = map_and_ar([([(BOX, 0, 0.9), (FAR, 1, 0.8)], gts[0])], 2, k=1)
    assert ar == pytest.approx(0.5)


def test_mean_ap_arithmetic_and_errors():
    assert mean_ap({0: 0.2, 1: 0.6, 2: None}, [0, 1, 2]) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        mean_ap({0: None}, [0])
    with pytest.raises(ValueError):
        mean_ap({}, [])


def test_mismatched_lengths():
    with pytest.raises(ValueError):
        match_detections([[]], [[], []])


@settings(max_examples=40)
@given(st.integers(0, 100_000))
def test_permuting_detections_within_image_keeps_map(seed):
    rng = np.random.default_rng(seed)
    images = random_instance(rng, n_images=3)
    dets, gts = to_lib(images)
    if not any(gts):
        return
    # distinct confidences so the ranking is permutation-free
    dets = [[Detection(d.box, d.class_index, float(rng.uniform(0.01, 1))) for d in ds] for ds in dets]
    base = evaluate(dets, gts, ["a", "b", "c"]).map
    shuffled = [[ds[i] for i in rng.permutation(len(ds))] for ds in dets]
    assert evaluate(shuffled, gts, ["a", "b", "c"]).map == pytest.approx(base, abs=1e-12)


@settings(max_examples=40)
@given(st.integers(0, 100_000))
def test_removing_a_false_positive_never_lowers_ap(seed):
    rng = np.random.default_rng(seed)
    images = random_instance(rng, n_images=3)
    dets, gts = to_lib(images)
    if not any(gts):
        return
    m = match_detections(dets, gts)
    base = {c: average_precision(m, c) for c in m.n_gt}
    for img, ds in enumerate(dets):
        for i, d in enumerate(ds):
            trimmed = [list(x) for x in dets]
            del trimmed[img][i]
            m2 = match_detections(trimmed, gts)
            c = d.class_index
            if c not in m.n_gt:
                continue
            before, after = m.flags[c], m2.flags.get(c, [])
            # a clean false positive: removing it leaves every other flag in place
            if any(not f and before[:j] + before[j + 1:] == after for j, f in enumerate(before)):
                assert average_precision(m2, c) >= base[c] - 1e-12

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import box_iou, nms_reference, softmax
from zsd_align.embedding import ClassifierMatrix, TemperatureParam
from zsd_align.inference import Detection, InferenceConfig, iou, nms, predict
from zsd_align.model import ToyModel, cxcywh_to_xyxy, forward


def random_dets(rng, n, n_cls=3, grid_scores=False):
    dets = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 0.8, 2)
        w, h = rng.uniform(0.05, 0.3, 2)
        conf = float(rng.integers(1, 6) / 5) if grid_scores else float(rng.uniform(0, 1))
        dets.append(Detection((x1, y1, min(1.0, x1 + w), min(1.0, y1 + h)), int(rng.integers(n_cls)), conf))
    return dets


def test_inference_defaults():
    cfg = InferenceConfig()
    assert (cfg.objectness_threshold, cfg.score_cutoff, cfg.nms_iou, cfg.max_detections) == (0.1, 0.01, 0.5, 100)
    with pytest.raises(ValueError):
        InferenceConfig(nms_iou=1.5)


def test_iou_cases():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    with pytest.raises(ValueError):
        iou((0, 0, 0, 1), (0, 0, 1, 1))


@given(st.lists(st.floats(0, 10), min_size=8, max_size=8), st.floats(0.1, 10))
def test_iou_symmetric_and_scale_invariant(v, s):
    a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 0.1, max(v[2], v[3]) + 0.1)
    b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 0.1, max(v[6], v[7]) + 0.1)
    assert iou(a, b) == pytest.approx(iou(b, a), abs=1e-15)
    assert iou(tuple(x * s for x in a), tuple(x * s for x in b)) == pytest.approx(iou(a, b), abs=1e-9)
    assert iou(a, b) == pytest.approx(box_iou(a, b), abs=1e-12)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection((0.5, 0, 0.4, 1), 0, 0.5)
    with pytest.raises(ValueError):
        Detection((0, 0, 1, 1), 0, 1.5)


def test_nms_trivial_cases():
    d = Detection((0.1, 0.1, 0.5, 0.5), 0, 0.3)
    assert nms([d]) == [0]
    pair = [Detection((0.1, 0.1, 0.5, 0.5), 0, 0.8), Detection((0.1, 0.1, 0.5, 0.5), 0, 0.9)]
    assert nms(pair) == [1]
    other_class = [pair[0], Detection((0.1, 0.1, 0.5, 0.5), 1, 0.9)]
    assert sorted(nms(other_class)) == [0, 1]


@settings(max_examples=100)
@given(st.integers(0, 100_000))
def test_nms_matches_reference(seed):
    rng = np.random.default_rng(seed)
    dets = random_dets(rng, int(rng.integers(0, 31)), grid_scores=bool(seed % 2))
    ref = nms_reference([d.box for d in dets], [d.class_index for d in dets], [d.confidence for d in dets], 0.5)
    assert nms(dets, 0.5) == ref


@settings(max_examples=60)
@given(st.integers(0, 100_000))
def test_nms_invariants(seed):
    rng = np.random.default_rng(seed)
    dets = random_dets(rng, 25)
    kept = [dets[i] for i in nms(dets, 0.5)]
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.class_index == b.class_index:
                assert iou(a.box, b.box) <= 0.5
    assert nms(kept, 0.5) == list(range(len(kept)))


def _fixture(seed=0, g=4, in_dim=6, d=5, n=3):
    rng = np.random.default_rng(seed)
    m = ToyModel.init(in_dim, 8, d, seed)
    m.params["bo"] = np.array([0.5])
    feats = rng.standard_normal((g, g, in_dim))
    cm = rng.standard_normal((d, n))
    C = ClassifierMatrix(tuple("abc"[:n]), cm / np.linalg.norm(cm, axis=0))
    return m, feats, C


def test_predict_empty_when_nothing_passes_objectness():
    m, feats, C = _fixture()
    m.params["bo"] = np.array([-50.0])
    assert predict(m, feats, C, TemperatureParam()) == []


def test_predict_matches_staged_recomputation():
    m, feats, C = _fixture(seed=3)
    tau = TemperatureParam(1.2)
    cfg = InferenceConfig()
    got = predict(m, feats, C, tau, cfg)
    cols = [list(C.matrix[:, i]) for i in range(C.n_classes)]
    staged = []
    for p in forward(m, feats):
        if p.objectness < cfg.objectness_threshold:
            continue
        s = softmax(list(p.embedding), cols, tau.scale)
        k = max(range(len(s)), key=lambda i: (s[i], -i))
        box = np.clip(cxcywh_to_xyxy(np.array(p.box)), 0, 1)
        if s[k] >= cfg.score_cutoff:
            staged.append(Detection(tuple(float(v) for v in box), k, s[k]))
    keep = nms_reference([d.box for d in staged], [d.class_index for d in staged],
                         [d.confidence for d in staged], cfg.nms_iou)[:cfg.max_detections]
    assert len(got) == len(keep)
    for a, i in zip(got, keep):
        b = staged[i]
        assert a.class_index == b.class_index
        assert a.confidence == pytest.approx(b.confidence, abs=1e-12)
        assert np.allclose(a.box, b.box, atol=1e-12)


def test_confidence_ignores_objectness():
    m, feats, C = _fixture(seed=4, g=1)
    tau = TemperatureParam()
    confs = []
    for bo in (-1.0, 0.0, 3.0, 8.0):  # objectness from ~0.27 to ~1, all above 0.1
        mm = m.copy()
        mm.params["Wo"] = np.zeros_like(mm.params["Wo"])
        mm.params["bo"] = np.array([bo])
        dets = predict(mm, feats, C, tau)
        assert len(dets) == 1
        confs.append(dets[0].confidence)
    assert len(set(confs)) == 1


def test_max_detections_truncates():
    m, feats, C = _fixture(seed=5, g=6)
    m.params["bo"] = np.array([5.0])
    m.params["bb"] = np.array([0.0, 0.0, -3.0, -3.0])  # tiny boxes, no overlaps
    dets = predict(m, feats, C, TemperatureParam(), InferenceConfig(max_detections=7, score_cutoff=0.0))
    assert len(dets) == 7
    assert [d.confidence for d in dets] == sorted((d.confidence for d in dets), reverse=True)

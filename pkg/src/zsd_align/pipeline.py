"""Glue between world, trainer, inference and evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .embedding import ClassifierMatrix, PromptTemplateSet, TemperatureParam, build_classifier
from .evaluation import EvalReport, MatchResult, evaluate, match_detections
from .inference import InferenceConfig, predict
from .model import ToyModel
from .train import DETECTION_ONLY, JOINT, TrainConfig, TrainResult, WeakConfig, train
from .world import DetectionSample, SyntheticWorldConfig, World, generate_world

ZSD = "zsd"
GZSD = "gzsd"
SUBSETS = ("seen", "unseen", "all")


@dataclass
class WorldClassifiers:
    vectors: dict[str, np.ndarray]
    detection: ClassifierMatrix
    classification: ClassifierMatrix


def world_classifiers(world: World, templates: PromptTemplateSet | None = None) -> WorldClassifiers:
    """C_D over the detection classes, C_C over every seen class."""
    vectors = world.class_vectors(templates)
    return WorldClassifiers(vectors, build_classifier(world.det_classes, vectors),
                            build_classifier(world.seen_classes, vectors))


def subset_classes(world: World, subset: str) -> list[str]:
    if subset == "seen":
        return world.seen_classes
    if subset == "unseen":
        return world.unseen_classes
    if subset == "all":
        return world.names
    raise ValueError(f"unknown subset {subset!r}; expected one of {SUBSETS}")


@dataclass
class Evaluation:
    report: EvalReport
    match: MatchResult
    classifier: ClassifierMatrix
    detections: list = field(default_factory=list)


def evaluate_model(
    world: World,
    model: ToyModel,
    tau: TemperatureParam,
    vectors: dict[str, np.ndarray],
    subset: str = "unseen",
    mode: str = ZSD,
    infer_cfg: InferenceConfig = InferenceConfig(),
    samples: Sequence[DetectionSample] | None = None,
    iou_th: float = 0.5,
    k: int = 100,
) -> Evaluation:
    """Predict on ``samples`` (default: the test set) and score one class subset.

    ``zsd`` classifies against the subset's classes only, ``gzsd`` against all
    classes; ground truth outside the subset is ignored either way.
    """
    if mode not in (ZSD, GZSD):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    samples = world.test if samples is None else samples
    wanted = subset_classes(world, subset)
    clf_names = wanted if mode == ZSD else world.names
    clf = build_classifier(clf_names, vectors)
    col = {world.names.index(n): j for j, n in enumerate(clf_names)}
    dets = [predict(model, s.features, clf, tau, infer_cfg) for s in samples]
    gts = [[(box, col[k_]) for box, k_ in s.ground_truth if world.names[k_] in wanted] for s in samples]
    subset_cols = [clf_names.index(n) for n in wanted]
    report = evaluate(dets, gts, clf_names, subset_cols, subset, iou_th, k)
    report.classifier = list(clf_names)
    return Evaluation(report, match_detections(dets, gts, iou_th), clf, dets)


def make_evaluator(world: World, vectors: dict[str, np.ndarray], infer_cfg: InferenceConfig = InferenceConfig()):
    """Per-epoch metrics: unseen and seen mAP (each with its own classifier), unseen AR@100."""

    def _eval(model: ToyModel, tau: TemperatureParam) -> dict:
        out = {"map_unseen": None, "map_seen": None, "ar100_unseen": None}
        for subset in ("unseen", "seen"):
            try:
                rep = evaluate_model(world, model, tau, vectors, subset, ZSD, infer_cfg).report
            except ValueError:
                continue
            out[f"map_{subset}"] = rep.map
            if subset == "unseen":
                out["ar100_unseen"] = rep.ar_at_100
        return out

    return _eval


# -- directional gain experiment ----------------------------------------------

@dataclass
class GainRun:
    seed: int
    map_detection_only: float
    map_joint: float
    steps_detection_only: int
    steps_joint: int
    seconds: float

    @property
    def gain(self) -> float:
        return self.map_joint - self.map_detection_only


@dataclass
class GainExperiment:
    world: SyntheticWorldConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    weak: WeakConfig = WeakConfig()
    hidden: int = 32
    activation: str = "identity"
    infer: InferenceConfig = InferenceConfig()

    def run(self, seed: int) -> GainRun:
        """Pretrain on detection data, then continue either jointly or on detection data alone.

        Both continuations take the same number of optimizer steps.
        """
        t0 = time.perf_counter()
        world = generate_world(replace(self.world, seed=seed))
        clfs = world_classifiers(world)
        cfg = world.config
        model = ToyModel.init(cfg.in_dim, self.hidden, cfg.embed_dim, seed, self.activation)
        tau = TemperatureParam()
        pairs = (clfs.detection, clfs.classification)
        pre = train(world, model, pairs, tau, replace(self.pretrain, seed=seed), self.weak, DETECTION_ONLY)
        joint = train(world, pre.model, pairs, pre.tau, replace(self.finetune, seed=seed), self.weak, JOINT)
        control_cfg = replace(self.finetune, seed=seed, max_steps=joint.state.step)
        control = train(world, pre.model, pairs, pre.tau, control_cfg, self.weak, DETECTION_ONLY)

        def score(r: TrainResult) -> float:
            return evaluate_model(world, r.model, r.tau, clfs.vectors, "unseen", ZSD, self.infer).report.map

        return GainRun(seed, score(control), score(joint), control.state.step, joint.state.step,
                       time.perf_counter() - t0)

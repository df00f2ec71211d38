"""Framework-free training of the toy detector on detection and image-label data."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .embedding import ClassifierMatrix, TemperatureParam, clip_temperature
from .loss import batch_loss_grad, temperature_grad
from .model import ToyModel, backward, detection_loss_grad, forward_cells, stack_cells
from .weak import CLS, DET, BatchComposition, BatchLoss, compose_batch_loss, oversample_interleave, select_from_arrays
from .world import DetectionSample, ImageLabelSample, World

log = logging.getLogger(__name__)

DETECTION_ONLY = "detection_only"
JOINT = "joint"
MODES = (DETECTION_ONLY, JOINT)
TEMPERATURE_KEY = "log_scale"


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    total_epochs: int = 30
    grad_accumulation: int = 4
    min_lr_ratio: float = 0.05
    batch_size: int = 6
    max_steps: int | None = None
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.total_epochs > 0 and self.max_steps is None and not self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")
        if self.grad_accumulation < 1 or self.batch_size < 1:
            raise ValueError("grad_accumulation and batch_size must be >= 1")


@dataclass(frozen=True)
class WeakConfig:
    th_obj: float = 0.001
    oversample_ratio: float = 4.0


@dataclass
class OptimizerState:
    buffers: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}, 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: v.copy() for k, v in self.buffers.items()}, self.step)


# -- schedule and optimizer ---------------------------------------------------

def horizon(cfg: TrainConfig, steps_per_epoch: int = 1) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.total_epochs * steps_per_epoch


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Learning rate for optimizer step ``step`` (1-based; 0 is the start).

    Linear warm-up from 0 reaches ``base_lr`` at the end of the warm-up epochs,
    then a half cosine decays to ``min_lr_ratio * base_lr`` at the last step.
    """
    total = horizon(cfg, steps_per_epoch)
    warm = cfg.warmup_epochs * steps_per_epoch
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside the training horizon [0, {total}]")
    if warm >= total:
        raise ValueError("warm-up must end before the training horizon")
    if step < warm:
        return cfg.base_lr * step / warm
    lo = cfg.min_lr_ratio * cfg.base_lr
    progress = (step - warm) / (total - warm)
    return lo + (cfg.base_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
    max_log_scale: float = math.log(100.0),
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Momentum SGD with coupled weight decay; the temperature is not decayed and is clipped."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    new_params, new_buf = {}, {}
    for k, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads.get(k, 0.0), dtype=np.float64)
        wd = 0.0 if k == TEMPERATURE_KEY else cfg.weight_decay
        buf = cfg.momentum * state.buffers[k] + g + wd * p
        new_buf[k] = buf
        new_params[k] = p - lr * buf
    if TEMPERATURE_KEY in new_params:
        new_params[TEMPERATURE_KEY] = np.minimum(new_params[TEMPERATURE_KEY], max_log_scale)
    return new_params, OptimizerState(new_buf, state.step + 1)


# -- batch loss ---------------------------------------------------------------

@dataclass
class BatchResult:
    loss: BatchLoss
    grads: dict[str, np.ndarray]
    no_survivor: int = 0


def batch_loss_and_grads(
    model: ToyModel,
    tau: TemperatureParam,
    items: Sequence[DetectionSample | ImageLabelSample],
    C_D: ClassifierMatrix,
    C_C: ClassifierMatrix,
    det_columns: Mapping[int, int],
    cls_columns: Mapping[int, int],
    th_obj: float = 0.001,
) -> BatchResult:
    """Loss and gradients of one mixed batch.

    ``det_columns`` / ``cls_columns`` map world class indices to classifier
    columns of ``C_D`` / ``C_C``. Image-label samples contribute only through
    the embedding of their pseudo box.
    """
    cells = stack_cells([s.features for s in items], model.in_dim)
    out = forward_cells(model, cells)
    boxes, obj = out.boxes, out.objectness
    n_cells = len(obj)
    d_boxes = np.zeros((n_cells, 4))
    d_logit = np.zeros(n_cells)
    d_emb = np.zeros_like(out.emb)
    dlog = 0.0
    scale = tau.scale

    det_terms, cls_terms = [], []
    det_grads, cls_grads = [], []  # per-sample pieces, scaled after composition
    no_survivor = 0
    for i, s in enumerate(items):
        sl = cells.image_slice(i)
        if isinstance(s, DetectionSample):
            g = s.features.shape[0]
            r = detection_loss_grad(boxes[sl], obj[sl], s.ground_truth, g)
            cls_loss = None
            if r.assigned:
                rows = np.array([sl.start + c for c, _ in r.assigned])
                try:
                    targets = np.array([det_columns[s.ground_truth[j][1]] for _, j in r.assigned])
                except KeyError as exc:
                    raise ValueError(f"detection class {exc} missing from the detection classifier") from None
                losses, dE, dl = batch_loss_grad(out.emb[rows], C_D.matrix, scale, targets)
                m = len(rows)
                cls_loss = float(losses.mean())
                cls_grads.append((rows, dE / m, float(dl.sum()) / m))
            det_terms.append((r.box, r.obj, cls_loss))
            det_grads.append((sl, r.d_boxes, r.d_logit))
        else:
            t = cls_columns[s.label]
            a = select_from_arrays(obj[sl], out.emb[sl], C_C.matrix, scale, t, th_obj)
            if not a.present:
                no_survivor += 1
                cls_terms.append(None)
                continue
            row = sl.start + a.selected_index
            losses, dE, dl = batch_loss_grad(out.emb[row:row + 1], C_C.matrix, scale, np.array([t]))
            cls_terms.append(float(losses[0]))
            cls_grads.append((np.array([row]), dE, float(dl[0])))

    comp = BatchComposition(len(det_terms), len(cls_terms))
    loss = compose_batch_loss(det_terms, cls_terms, comp)
    if loss.det_denominator:
        for sl, db, dlg in det_grads:
            d_boxes[sl] += db / loss.det_denominator
            d_logit[sl] += dlg / loss.det_denominator
    if loss.cls_denominator:
        for rows, dE, dl in cls_grads:
            d_emb[rows] += dE / loss.cls_denominator
            dlog += dl / loss.cls_denominator
    grads = backward(model, out, d_boxes, d_logit, d_emb)
    grads[TEMPERATURE_KEY] = np.array(temperature_grad(dlog, tau))
    return BatchResult(loss, grads, no_survivor)


# -- training loop ------------------------------------------------------------

def epoch_stream(world: World, mode: str, epoch: int, seed: int, ratio: float) -> list[tuple[str, int]]:
    if mode == DETECTION_ONLY:
        rng = np.random.default_rng([int(seed), int(epoch), 0xDE7])
        return [(DET, int(i)) for i in rng.permutation(len(world.det_train))]
    if mode == JOINT:
        return oversample_interleave(len(world.det_train), len(world.cls_train), ratio, seed, epoch)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def steps_per_epoch(stream_len: int, cfg: TrainConfig) -> int:
    n_batches = math.ceil(stream_len / cfg.batch_size)
    return max(1, math.ceil(n_batches / cfg.grad_accumulation))


def column_maps(world: World, C_D: ClassifierMatrix, C_C: ClassifierMatrix) -> tuple[dict[int, int], dict[int, int]]:
    index = {n: i for i, n in enumerate(world.names)}
    det = {index[n]: j for j, n in enumerate(C_D.names) if n in index}
    cls = {index[n]: j for j, n in enumerate(C_C.names) if n in index}
    return det, cls


@dataclass
class TrainResult:
    model: ToyModel
    tau: TemperatureParam
    state: OptimizerState
    epoch: int
    log: list[dict] = field(default_factory=list)


def train(
    world: World,
    model: ToyModel,
    classifiers: tuple[ClassifierMatrix, ClassifierMatrix],
    tau: TemperatureParam,
    train_cfg: TrainConfig,
    weak_cfg: WeakConfig = WeakConfig(),
    mode: str = DETECTION_ONLY,
    evaluator: Callable[[ToyModel, TemperatureParam], dict] | None = None,
    state: OptimizerState | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[dict, TrainResult], None] | None = None,
    max_epochs: int | None = None,
) -> TrainResult:
    """Run (or continue) one training phase.

    ``state`` and ``start_epoch`` resume a phase in the middle. Each epoch's
    sample order depends only on ``(train_cfg.seed, epoch)``, so resumed runs
    replay exactly what an uninterrupted run would have done. ``max_epochs``
    stops this call early; ``on_epoch`` receives each log record together with
    a snapshot of the run so far.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == JOINT and not world.cls_train:
        raise ValueError("joint training needs image-label samples")
    if not world.det_train:
        raise ValueError("training needs detection samples")
    C_D, C_C = classifiers
    det_cols, cls_cols = column_maps(world, C_D, C_C)
    model = model.copy()
    params = dict(model.params)
    params[TEMPERATURE_KEY] = np.array(float(tau.log_scale))
    state = state.copy() if state is not None else OptimizerState.zeros_like(params)
    result = TrainResult(model, tau, state, start_epoch)

    if train_cfg.total_epochs == 0 and train_cfg.max_steps is None:
        return result

    stream_len = len(epoch_stream(world, mode, 0, train_cfg.seed, weak_cfg.oversample_ratio))
    spe = steps_per_epoch(stream_len, train_cfg)
    total_steps = horizon(train_cfg, spe)
    epoch = start_epoch
    while state.step < total_steps and (max_epochs is None or epoch - start_epoch < max_epochs):
        stream = epoch_stream(world, mode, epoch, train_cfg.seed, weak_cfg.oversample_ratio)
        batches = [stream[i:i + train_cfg.batch_size] for i in range(0, len(stream), train_cfg.batch_size)]
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0}
        n_batches = no_survivor = 0
        lr = 0.0
        for g0 in range(0, len(batches), train_cfg.grad_accumulation):
            if state.step >= total_steps:
                break
            group = batches[g0:g0 + train_cfg.grad_accumulation]
            acc: dict[str, np.ndarray] = {}
            for batch in group:
                items = [world.det_train[i] if kind == DET else world.cls_train[i] for kind, i in batch]
                res = batch_loss_and_grads(model, TemperatureParam(float(params[TEMPERATURE_KEY]),
                                                                   tau.max_effective_scale),
                                           items, C_D, C_C, det_cols, cls_cols, weak_cfg.th_obj)
                if not math.isfinite(res.loss.total):
                    raise NumericError(f"non-finite loss at step {state.step}")
                for k, v in res.grads.items():
                    acc[k] = acc[k] + v if k in acc else v.copy()
                sums["box"] += res.loss.box
                sums["obj"] += res.loss.obj
                sums["cls"] += res.loss.cls
                n_batches += 1
                no_survivor += res.no_survivor
            acc = {k: v / len(group) for k, v in acc.items()}
            lr = lr_schedule(state.step + 1, train_cfg, spe)
            params, state = sgd_step(params, acc, state, lr, train_cfg, math.log(tau.max_effective_scale))
            model.params.update({k: v for k, v in params.items() if k != TEMPERATURE_KEY})
        epoch += 1
        tau_now = clip_temperature(TemperatureParam(float(params[TEMPERATURE_KEY]), tau.max_effective_scale))
        record = {
            "epoch": epoch,
            "mode": mode,
            "steps": state.step,
            "lr": lr,
            "samples_det": sum(1 for kind, _ in stream if kind == DET),
            "samples_cls": sum(1 for kind, _ in stream if kind == CLS),
            "no_survivor": no_survivor,
            "loss_box": sums["box"] / max(1, n_batches),
            "loss_obj": sums["obj"] / max(1, n_batches),
            "loss_cls": sums["cls"] / max(1, n_batches),
            "temperature": tau_now.scale,
            "map_unseen": None,
            "map_seen": None,
            "ar100_unseen": None,
        }
        last = state.step >= total_steps
        if evaluator is not None and (last or (train_cfg.eval_every and epoch % train_cfg.eval_every == 0)):
            record.update(evaluator(model, tau_now))
        result.log.append(record)
        if on_epoch is not None:
            on_epoch(record, TrainResult(model.copy(), tau_now, state.copy(), epoch, list(result.log)))
        log.info("epoch %d: box %.4f obj %.4f cls %.4f", epoch, record["loss_box"],
                 record["loss_obj"], record["loss_cls"])
    result.model = model
    result.tau = clip_temperature(TemperatureParam(float(params[TEMPERATURE_KEY]), tau.max_effective_scale))
    result.state = state
    result.epoch = epoch
    return result

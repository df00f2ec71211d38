"""On-disk formats: COCO-shaped annotations, raw feature tensors, labels, checkpoints, logs.

Every format is JSON (or JSON lines) except feature tensors, which are flat
little-endian float32 arrays next to a JSON sidecar giving their shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import ClassEntry, ClassRegistry, TemperatureParam
from .model import ToyModel
from .splits import SplitSpec
from .train import OptimizerState
from .world import POS_CHANNELS, DetectionSample, ImageLabelSample, SyntheticWorldConfig, World

FEATURE_DTYPE = "<f4"
CHECKPOINT_FORMAT = 1

DET_TRAIN = "det_train"
TEST = "test"
CLS_TRAIN = "cls_train"


class DataError(ValueError):
    """Malformed or inconsistent input files."""


def _read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def write_json(path: str | Path, doc, indent: int | None = 1) -> None:
    Path(path).write_text(json.dumps(doc, indent=indent, sort_keys=True) + "\n", encoding="utf-8")


# -- annotations ----------------------------------------------------------------

@dataclass
class AnnotationFile:
    """Images, annotations (image id, xyxy box in [0, 1], category name) and categories."""

    images: list[dict] = field(default_factory=list)
    annotations: list[dict] = field(default_factory=list)
    categories: list[dict] = field(default_factory=list)

    def __post_init__(self):
        image_ids = [im["id"] for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise DataError("duplicate image ids")
        names = [c["name"] for c in self.categories]
        if len(set(names)) != len(names):
            raise DataError("duplicate category names")
        known_images, known_names = set(image_ids), set(names)
        for a in self.annotations:
            if a["image_id"] not in known_images:
                raise DataError(f"annotation {a.get('id')} references unknown image {a['image_id']}")
            if a["category"] not in known_names:
                raise DataError(f"annotation {a.get('id')} references unknown category {a['category']!r}")
            x1, y1, x2, y2 = a["bbox"]
            if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
                raise DataError(f"annotation {a.get('id')} has an invalid box {a['bbox']}")

    def to_json(self) -> dict:
        return {"images": self.images, "annotations": self.annotations, "categories": self.categories}

    @classmethod
    def from_json(cls, doc: Mapping) -> "AnnotationFile":
        try:
            return cls(list(doc["images"]), list(doc["annotations"]), list(doc["categories"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"not an annotation file ({exc})") from None

    def ground_truth(self, names: Sequence[str]) -> list[tuple[tuple, ...]]:
        """Per image (in file order): ``((x1, y1, x2, y2), class_index)`` tuples."""
        index = {n: i for i, n in enumerate(names)}
        per_image: dict[int, list] = {im["id"]: [] for im in self.images}
        for a in self.annotations:
            if a["category"] not in index:
                raise DataError(f"category {a['category']!r} is not a known class")
            per_image[a["image_id"]].append((tuple(float(v) for v in a["bbox"]), index[a["category"]]))
        return [tuple(per_image[im["id"]]) for im in self.images]


def annotations_from_samples(samples: Sequence[DetectionSample], names: Sequence[str],
                             categories: Sequence[ClassEntry]) -> AnnotationFile:
    images, anns = [], []
    for i, s in enumerate(samples):
        g = s.features.shape[0]
        images.append({"id": i, "grid": g})
        for box, k in s.ground_truth:
            anns.append({"id": len(anns), "image_id": i, "bbox": [float(v) for v in box], "category": names[k]})
    cats = [{"name": c.name, "superclass": c.superclass} for c in categories]
    return AnnotationFile(images, anns, cats)


# -- feature tensors ------------------------------------------------------------

def write_features(stem: str | Path, array: np.ndarray) -> None:
    """``<stem>.f32`` (raw little-endian float32) plus ``<stem>.json`` with the shape."""
    stem = Path(stem)
    arr = np.ascontiguousarray(array, dtype=FEATURE_DTYPE)
    stem.with_suffix(".f32").write_bytes(arr.tobytes())
    write_json(stem.with_suffix(".json"), {"dtype": "float32", "byteorder": "little", "shape": list(arr.shape)})


def read_features(stem: str | Path) -> np.ndarray:
    stem = Path(stem)
    meta = _read_json(stem.with_suffix(".json"))
    try:
        shape = tuple(int(d) for d in meta["shape"])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"{stem}.json: missing or invalid shape") from None
    if meta.get("dtype", "float32") != "float32" or meta.get("byteorder", "little") != "little":
        raise DataError(f"{stem}.json: only little-endian float32 is supported")
    try:
        raw = stem.with_suffix(".f32").read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file: {stem}.f32") from None
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(raw) != expected:
        raise DataError(f"{stem}.f32 holds {len(raw)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype=FEATURE_DTYPE).reshape(shape).astype(np.float64)


def _stack(samples) -> np.ndarray:
    if not samples:
        return np.zeros(0)
    return np.stack([s.features for s in samples])


# -- dataset directory ----------------------------------------------------------

def write_world(world: World, out_dir: str | Path) -> list[Path]:
    """Write the generated world as plain files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = world.names
    by_name = {e.name: e for e in world.registry}
    written = []

    def put_json(name, doc):
        write_json(out / name, doc)
        written.append(out / name)

    put_json(f"{DET_TRAIN}_annotations.json",
             annotations_from_samples(world.det_train, names, [by_name[n] for n in world.det_classes]).to_json())
    put_json(f"{TEST}_annotations.json",
             annotations_from_samples(world.test, names, list(world.registry)).to_json())
    put_json("classification_labels.json", {
        "categories": list(world.seen_classes),
        "images": [{"id": i, "label": names[s.label]} for i, s in enumerate(world.cls_train)],
    })
    put_json("split.json", SplitSpec(tuple(world.seen_classes), tuple(world.unseen_classes)).to_json())
    put_json("classes.json", {"classes": [
        {"name": e.name, "superclass": e.superclass, "frequency": e.frequency, "role": e.role,
         "detection": e.name in world.det_classes} for e in world.registry]})
    put_json("text_embeddings.json", {
        "dim": world.config.embed_dim,
        "classes": {k: [float(x) for x in v] for k, v in sorted(world.text_embeddings.items())},
    })
    for stem, samples in ((DET_TRAIN, world.det_train), (CLS_TRAIN, world.cls_train), (TEST, world.test)):
        write_features(out / stem, _stack(samples))
        written += [out / f"{stem}.f32", out / f"{stem}.json"]
    return written


def read_world(data_dir: str | Path, config: SyntheticWorldConfig | None = None) -> World:
    """Load a dataset directory written by :func:`write_world`.

    Prototypes are not stored; the returned world has an empty prototype array.
    """
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"dataset directory not found: {d}")
    classes = _read_json(d / "classes.json")
    try:
        entries = [ClassEntry(c["name"], c.get("superclass"), c.get("frequency"), c["role"])
                   for c in classes["classes"]]
        det_flags = {c["name"]: bool(c["detection"]) for c in classes["classes"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{d / 'classes.json'}: malformed ({exc})") from None
    registry = ClassRegistry(tuple(entries))
    names = registry.names
    index = {n: i for i, n in enumerate(names)}
    det_classes = [n for n in names if det_flags[n]]
    label_only = [n for n in registry.subset("seen").names if not det_flags[n]]

    def detection_set(stem):
        ann = AnnotationFile.from_json(_read_json(d / f"{stem}_annotations.json"))
        feats = read_features(d / stem)
        if len(feats) != len(ann.images):
            raise DataError(f"{stem}: {len(feats)} feature tensors for {len(ann.images)} images")
        return [DetectionSample(f, gt) for f, gt in zip(feats, ann.ground_truth(names))]

    det_train = detection_set(DET_TRAIN)
    test = detection_set(TEST)
    for s in det_train:
        for _, k in s.ground_truth:
            if names[k] not in det_classes:
                raise DataError(f"training annotation uses non-detection class {names[k]!r}")
    labels = _read_json(d / "classification_labels.json")
    feats = read_features(d / CLS_TRAIN)
    images = labels.get("images", [])
    if len(images) != len(feats):
        raise DataError(f"{CLS_TRAIN}: {len(feats)} feature tensors for {len(images)} labels")
    cls_train = []
    for im, f in zip(images, feats):
        if im["label"] not in index:
            raise DataError(f"classification label {im['label']!r} is not a known class")
        cls_train.append(ImageLabelSample(f, index[im["label"]]))
    text = _read_json(d / "text_embeddings.json")
    try:
        text_embeddings = {k: np.asarray(v, dtype=np.float64) for k, v in text["classes"].items()}
    except (KeyError, TypeError, AttributeError) as exc:
        raise DataError(f"{d / 'text_embeddings.json'}: malformed ({exc})") from None
    sample = (det_train or test)[0].features if (det_train or test) else None
    if config is None:
        if sample is None:
            raise DataError(f"{d}: no detection images to infer the world shape from")
        config = SyntheticWorldConfig(
            grid_size=sample.shape[0], feature_dim=sample.shape[-1] - POS_CHANNELS,
            embed_dim=int(text["dim"]), n_label_only=len(label_only),
            split=(tuple(registry.subset("seen").names), tuple(registry.subset("unseen").names)),
            cls_grid_size=cls_train[0].features.shape[0] if cls_train else None,
            cls_pool="label_only" if label_only and {names[s.label] for s in cls_train} <= set(label_only)
            else "seen",
            det_images=len(det_train), cls_images=len(cls_train), test_images=len(test))
    return World(config, registry, det_classes, label_only, np.zeros((len(names), config.feature_dim)),
                 text_embeddings, det_train, cls_train, test)


def read_split(path: str | Path) -> SplitSpec:
    doc = _read_json(path)
    try:
        return SplitSpec.from_json(doc)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a split file ({exc})") from None


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    model: ToyModel
    tau: TemperatureParam
    state: OptimizerState
    mode: str | None
    epoch: int
    config_hash: str
    phases: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def arr(a):
            a = np.asarray(a, dtype=np.float64)
            return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}

        return {
            "format": CHECKPOINT_FORMAT,
            "config_hash": self.config_hash,
            "mode": self.mode,
            "epoch": self.epoch,
            "phases": list(self.phases),
            "model": {
                "in_dim": self.model.in_dim,
                "hidden": self.model.hidden,
                "embed_dim": self.model.embed_dim,
                "activation": self.model.activation,
                "params": {k: arr(v) for k, v in sorted(self.model.params.items())},
            },
            "temperature": {"log_scale": float(self.tau.log_scale),
                            "max_effective_scale": float(self.tau.max_effective_scale)},
            "optimizer": {"step": self.state.step,
                          "buffers": {k: arr(v) for k, v in sorted(self.state.buffers.items())}},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Checkpoint":
        def arr(d):
            return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])

        try:
            if doc["format"] != CHECKPOINT_FORMAT:
                raise DataError(f"unsupported checkpoint format {doc['format']!r}")
            m = doc["model"]
            model = ToyModel(int(m["in_dim"]), int(m["hidden"]), int(m["embed_dim"]),
                             {k: arr(v) for k, v in m["params"].items()}, m["activation"])
            t = doc["temperature"]
            tau = TemperatureParam(float(t["log_scale"]), float(t["max_effective_scale"]))
            o = doc["optimizer"]
            state = OptimizerState({k: arr(v) for k, v in o["buffers"].items()}, int(o["step"]))
            return cls(model, tau, state, doc["mode"], int(doc["epoch"]), str(doc["config_hash"]),
                       list(doc.get("phases", [])))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"malformed checkpoint ({exc})") from None


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    write_json(path, ckpt.to_json(), indent=None)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_json(_read_json(path))


# -- metric log -----------------------------------------------------------------

def append_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    return [json.loads(line) for line in lines if line.strip()]

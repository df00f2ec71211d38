"""Synthetic detection / image-label world used to exercise joint training at desk scale.

Each cell of an image is a feature vector laid out as::

    [is_center, dx, dy, log(w*G), log(h*G) | class prototype (feature_dim)]

The first ``POS_CHANNELS`` entries are the positional encoding of the object
covering the cell (zero on background); the remaining ``feature_dim`` entries
carry the class prototype. Gaussian noise is added to the prototype channels
of every cell, background included.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .embedding import ClassEntry, ClassRegistry, PromptTemplateSet, build_class_embedding
from .splits import shipped_templates

log = logging.getLogger(__name__)

POS_CHANNELS = 5
MAX_PLACEMENT_TRIES = 200

Box = tuple[float, float, float, float]  # x1, y1, x2, y2 (normalized)


@dataclass(frozen=True)
class SyntheticWorldConfig:
    grid_size: int = 8
    feature_dim: int = 12
    n_classes: int = 12
    n_unseen: int = 3
    n_label_only: int = 0
    noise_sigma: float = 0.1
    objects_per_image: tuple[int, int] = (1, 3)
    det_images: int = 200
    cls_images: int = 400
    test_images: int = 100
    embed_dim: int = 32
    embed_noise: float = 0.1
    template_noise: float = 0.05
    cls_grid_size: int | None = None
    cls_pool: str = "seen"
    test_pool: str = "all"
    det_box_size: tuple[float, float] = (0.15, 0.4)
    cls_box_size: tuple[float, float] = (0.4, 0.8)
    novel_dims: int = 0  # prototype directions absent from every detection class
    split: tuple[tuple[str, ...], tuple[str, ...]] | None = None  # (seen, unseen) names
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if self.split is not None:
            seen, unseen = self.split
            object.__setattr__(self, "split", (tuple(seen), tuple(unseen)))
            object.__setattr__(self, "n_classes", len(seen) + len(unseen))
            object.__setattr__(self, "n_unseen", len(unseen))
        checks = [
            (self.grid_size >= 2, "grid_size must be >= 2"),
            (self.feature_dim >= 4, "feature_dim must be >= 4"),
            (self.n_classes >= 4 or self.split is not None, "n_classes must be >= 4"),
            (1 <= self.n_unseen < self.n_classes, "need 1 <= n_unseen < n_classes"),
            (0 <= self.n_label_only < self.n_classes - self.n_unseen, "need at least one detection class"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (0 <= self.novel_dims < self.feature_dim, "need 0 <= novel_dims < feature_dim"),
            (1 <= lo <= hi, "objects_per_image must be a range 1 <= lo <= hi"),
            (self.det_images >= 0 and self.cls_images >= 0 and self.test_images >= 0, "counts must be >= 0"),
            (self.embed_dim >= 2, "embed_dim must be >= 2"),
            (self.cls_pool in ("seen", "label_only"), "cls_pool must be 'seen' or 'label_only'"),
            (self.test_pool in ("all", "seen", "unseen"), "test_pool must be all|seen|unseen"),
            (self.cls_pool != "label_only" or self.n_label_only > 0, "cls_pool 'label_only' needs n_label_only > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        if self.cls_grid_size is None:
            object.__setattr__(self, "cls_grid_size", max(2, self.grid_size // 2))

    @property
    def in_dim(self) -> int:
        return POS_CHANNELS + self.feature_dim


@dataclass(frozen=True)
class DetectionSample:
    features: np.ndarray = field(repr=False)
    ground_truth: tuple[tuple[Box, int], ...]


@dataclass(frozen=True)
class ImageLabelSample:
    features: np.ndarray = field(repr=False)
    label: int


@dataclass
class World:
    config: SyntheticWorldConfig
    registry: ClassRegistry
    det_classes: list[str]
    label_only_classes: list[str]
    prototypes: np.ndarray = field(repr=False)
    text_embeddings: dict[str, np.ndarray] = field(repr=False)
    det_train: list[DetectionSample] = field(repr=False)
    cls_train: list[ImageLabelSample] = field(repr=False)
    test: list[DetectionSample] = field(repr=False)

    @property
    def names(self) -> list[str]:
        return self.registry.names

    @property
    def seen_classes(self) -> list[str]:
        return self.registry.subset("seen").names

    @property
    def unseen_classes(self) -> list[str]:
        return self.registry.subset("unseen").names

    @property
    def cls_pool_classes(self) -> list[str]:
        if self.config.cls_pool == "label_only":
            return list(self.label_only_classes)
        return self.seen_classes

    def class_vectors(self, templates: PromptTemplateSet | None = None) -> dict[str, np.ndarray]:
        """Per-class target embeddings averaged over the prompt templates."""
        templates = templates or shipped_templates()
        lookup = self.text_embeddings.__getitem__
        return {n: build_class_embedding(n, templates, lookup) for n in self.names}


def _cell_of(x: float, g: int) -> int:
    return min(g - 1, max(0, int(math.floor(x * g))))


def _covered_cells(box: Box, g: int) -> list[tuple[int, int]]:
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    cells = {(_cell_of(cy, g), _cell_of(cx, g))}
    for r in range(g):
        for c in range(g):
            px, py = (c + 0.5) / g, (r + 0.5) / g
            if x1 <= px <= x2 and y1 <= py <= y2:
                cells.add((r, c))
    return sorted(cells)


def positional_encoding(box: Box, g: int, r: int, c: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    is_center = float(_cell_of(cx, g) == c and _cell_of(cy, g) == r)
    return np.array([is_center, cx * g - (c + 0.5), cy * g - (r + 0.5),
                     math.log((x2 - x1) * g), math.log((y2 - y1) * g)])


def render(g: int, objects: Sequence[tuple[Box, int]], prototypes: np.ndarray, sigma: float,
           rng: np.random.Generator) -> np.ndarray:
    f = prototypes.shape[1]
    feats = np.zeros((g, g, POS_CHANNELS + f))
    for box, k in objects:
        for r, c in _covered_cells(box, g):
            feats[r, c, :POS_CHANNELS] = positional_encoding(box, g, r, c)
            feats[r, c, POS_CHANNELS:] = prototypes[k]
    if sigma > 0:
        feats[..., POS_CHANNELS:] += sigma * rng.standard_normal((g, g, f))
    return feats


def _random_box(rng, size_range, center_range=(0.0, 1.0)) -> Box:
    w, h = rng.uniform(*size_range, size=2)
    lo, hi = center_range
    cx = rng.uniform(max(lo, w / 2), min(hi, 1 - w / 2))
    cy = rng.uniform(max(lo, h / 2), min(hi, 1 - h / 2))
    return (float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2))


def _place_objects(rng, g, classes: Sequence[int], size_range, center_range=(0.0, 1.0)):
    placed: list[tuple[Box, int]] = []
    used: set[tuple[int, int]] = set()
    for k in classes:
        for _ in range(MAX_PLACEMENT_TRIES):
            box = _random_box(rng, size_range, center_range)
            cells = set(_covered_cells(box, g))
            if not cells & used:
                placed.append((box, int(k)))
                used |= cells
                break
        else:
            raise RuntimeError(f"infeasible object placement after {MAX_PLACEMENT_TRIES} tries")
    return placed


def _assign_roles(cfg: SyntheticWorldConfig, rng) -> tuple[list[str], list[str], list[str], list[str]]:
    if cfg.split is not None:
        seen, unseen = list(cfg.split[0]), list(cfg.split[1])
        names = seen + unseen
        label_only = seen[len(seen) - cfg.n_label_only:] if cfg.n_label_only else []
        det = [n for n in seen if n not in label_only]
        return names, det, label_only, unseen
    width = max(2, len(str(cfg.n_classes - 1)))
    names = [f"class_{i:0{width}d}" for i in range(cfg.n_classes)]
    perm = [int(i) for i in rng.permutation(cfg.n_classes)]
    unseen = sorted(names[i] for i in perm[: cfg.n_unseen])
    label_only = sorted(names[i] for i in perm[cfg.n_unseen: cfg.n_unseen + cfg.n_label_only])
    det = [n for n in names if n not in unseen and n not in label_only]
    return names, det, label_only, unseen


def generate_world(cfg: SyntheticWorldConfig, templates: PromptTemplateSet | None = None) -> World:
    """Build prototypes, text embeddings and the three sample sets from ``cfg.seed``."""
    templates = templates or shipped_templates()
    rng = np.random.default_rng(cfg.seed)
    names, det, label_only, unseen = _assign_roles(cfg, rng)
    registry = ClassRegistry(tuple(
        ClassEntry(n, role="unseen" if n in unseen else "seen") for n in names))
    index = {n: i for i, n in enumerate(names)}

    protos = rng.standard_normal((len(names), cfg.feature_dim))
    if cfg.novel_dims:
        # detection classes never touch the trailing novel directions
        protos[[index[n] for n in det], cfg.feature_dim - cfg.novel_dims:] = 0.0
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    # text side: prototypes pushed through a fixed random map plus class and template noise
    text_map = rng.standard_normal((cfg.embed_dim, cfg.feature_dim)) / math.sqrt(cfg.feature_dim)
    text = {}
    for n in names:
        base = text_map @ protos[index[n]]
        base = base / np.linalg.norm(base)
        base = base + cfg.embed_noise * rng.standard_normal(cfg.embed_dim) / math.sqrt(cfg.embed_dim)
        for prompt in templates.fill(n):
            text[prompt] = base + cfg.template_noise * rng.standard_normal(cfg.embed_dim) / math.sqrt(cfg.embed_dim)

    g, gc = cfg.grid_size, cfg.cls_grid_size
    lo, hi = cfg.objects_per_image
    det_idx = [index[n] for n in det]

    def det_sample(pool):
        count = int(rng.integers(lo, hi + 1))
        objs = _place_objects(rng, g, rng.choice(pool, size=count), cfg.det_box_size)
        return DetectionSample(render(g, objs, protos, cfg.noise_sigma, rng), tuple(objs))

    det_train = [det_sample(det_idx) for _ in range(cfg.det_images)]

    pool_names = label_only if cfg.cls_pool == "label_only" else [n for n in names if n not in unseen]
    pool = [index[n] for n in pool_names]
    cls_train = []
    for _ in range(cfg.cls_images):
        k = int(rng.choice(pool))
        objs = _place_objects(rng, gc, [k], cfg.cls_box_size, center_range=(0.25, 0.75))
        cls_train.append(ImageLabelSample(render(gc, objs, protos, cfg.noise_sigma, rng), k))

    test_pool = {
        "all": list(range(len(names))),
        "seen": [index[n] for n in names if n not in unseen],
        "unseen": [index[n] for n in unseen],
    }[cfg.test_pool]
    test = [det_sample(test_pool) for _ in range(cfg.test_images)]

    log.debug("generated world: %d det, %d cls, %d test images", len(det_train), len(cls_train), len(test))
    return World(cfg, registry, det, label_only, protos, text, det_train, cls_train, test)


def world_config_from_mapping(m: Mapping) -> SyntheticWorldConfig:
    kw = dict(m)
    for key in ("objects_per_image", "det_box_size", "cls_box_size"):
        if key in kw and kw[key] is not None:
            kw[key] = tuple(kw[key])
    if kw.get("split") is not None:
        kw["split"] = (tuple(kw["split"]["seen"]), tuple(kw["split"]["unseen"])) \
            if isinstance(kw["split"], Mapping) else tuple(tuple(x) for x in kw["split"])
    return replace(SyntheticWorldConfig(), **kw) if kw else SyntheticWorldConfig()

"""Embeddings, class registries, prompt templates and the fixed classifier."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

PLACEHOLDER = "{class}"
DEFAULT_DIM = 512
INIT_LOG_SCALE = math.log(1.0 / 0.07)
MAX_EFFECTIVE_SCALE = 100.0


class DegenerateEmbeddingError(ValueError):
    pass


def as_embedding(values, dim: int | None = None) -> np.ndarray:
    """Validate and widen a vector to a float64 embedding."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"embedding must be a non-empty vector, got shape {v.shape}")
    if dim is not None and v.size != dim:
        raise ValueError(f"embedding dimension {v.size} != expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding contains non-finite entries")
    return v


def normalize(v) -> np.ndarray:
    v = as_embedding(v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero norm")
    return v / norm


def cosine_similarity(a, b) -> float:
    a = as_embedding(a)
    b = as_embedding(b)
    if a.size != b.size:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero norm")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


@dataclass(frozen=True)
class ClassEntry:
    name: str
    superclass: str | None = None
    frequency: int | None = None
    role: str = "seen"

    def __post_init__(self):
        if not self.name:
            raise ValueError("class name must be non-empty")
        if self.role not in ("seen", "unseen"):
            raise ValueError(f"role must be 'seen' or 'unseen', got {self.role!r}")
        if self.frequency is not None and self.frequency < 0:
            raise ValueError(f"negative frequency for {self.name!r}")


@dataclass(frozen=True)
class ClassRegistry:
    entries: tuple[ClassEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        names = [e.name for e in self.entries]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate class names: {dupes}")

    @classmethod
    def from_names(cls, names: Iterable[str], role: str = "seen") -> "ClassRegistry":
        return cls(tuple(ClassEntry(n, role=role) for n in names))

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, role: str) -> "ClassRegistry":
        return ClassRegistry(tuple(e for e in self.entries if e.role == role))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class PromptTemplateSet:
    templates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        if not self.templates:
            raise ValueError("at least one template is required")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ValueError(f"template must contain {PLACEHOLDER} exactly once: {t!r}")

    def fill(self, class_name: str) -> list[str]:
        return [t.replace(PLACEHOLDER, class_name) for t in self.templates]

    def __len__(self) -> int:
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)


@dataclass(frozen=True)
class ClassifierMatrix:
    """Fixed linear classifier with one unit-norm column per class.

    ``matrix`` has shape (D, n) and is read-only.
    """

    names: tuple[str, ...]
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        if m.ndim != 2 or m.shape[1] != len(self.names):
            raise ValueError(f"matrix shape {m.shape} does not match {len(self.names)} classes")
        norms = np.linalg.norm(m, axis=0)
        if not np.allclose(norms, 1.0, rtol=0.0, atol=1e-6):
            raise ValueError("classifier columns must be unit-norm")
        m.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[1]

    @property
    def frozen(self) -> bool:
        return True

    def column(self, i: int) -> np.ndarray:
        return self.matrix[:, i]

    def to_mapping(self) -> dict[str, np.ndarray]:
        return {n: self.matrix[:, i].copy() for i, n in enumerate(self.names)}


@dataclass(frozen=True)
class TemperatureParam:
    """Learnable log-scale; the softmax multiplies cosines by ``exp(log_scale)``."""

    log_scale: float = INIT_LOG_SCALE
    max_effective_scale: float = MAX_EFFECTIVE_SCALE

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    @property
    def max_log_scale(self) -> float:
        return math.log(self.max_effective_scale)

    def at_boundary(self) -> bool:
        return self.log_scale >= self.max_log_scale


def clip_temperature(t: TemperatureParam) -> TemperatureParam:
    if t.log_scale > t.max_log_scale:
        return TemperatureParam(t.max_log_scale, t.max_effective_scale)
    return t


def build_class_embedding(
    class_name: str,
    templates: PromptTemplateSet,
    encoder: Callable[[str], np.ndarray],
) -> np.ndarray:
    """Average the encoder output over all filled templates, then normalize."""
    vecs = [as_embedding(encoder(text)) for text in templates.fill(class_name)]
    dims = {v.size for v in vecs}
    if len(dims) != 1:
        raise ValueError(f"encoder returned mixed dimensions {sorted(dims)}")
    # sorted summation keeps the mean independent of template order
    stacked = np.stack(vecs)
    mean = np.sum(np.sort(stacked, axis=0), axis=0) / len(vecs)
    if np.linalg.norm(mean) <= 1e-12 * max(np.linalg.norm(v) for v in vecs):
        raise DegenerateEmbeddingError(f"cancelling template embeddings for {class_name!r}")
    return normalize(mean)


def build_classifier(registry: ClassRegistry | Sequence[str], per_class: Mapping[str, np.ndarray]) -> ClassifierMatrix:
    names = registry.names if isinstance(registry, ClassRegistry) else list(registry)
    missing = [n for n in names if n not in per_class]
    if missing:
        raise KeyError(f"missing embeddings for classes: {missing}")
    cols = [normalize(per_class[n]) for n in names]
    dims = {c.size for c in cols}
    if len(dims) > 1:
        raise ValueError(f"dimension mismatch among class embeddings: {sorted(dims)}")
    if not cols:
        raise ValueError("cannot build a classifier over zero classes")
    return ClassifierMatrix(tuple(names), np.stack(cols, axis=1))


def pseudo_encoder(text: str, dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Deterministic stand-in for a text encoder.

    Entries come from a BLAKE2b stream keyed by ``seed``; each 8-byte block is
    mapped to a uniform value in (-1, 1) and the vector is unit-normalized.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    key = int(seed).to_bytes(16, "little", signed=True)
    payload = text.encode("utf-8")
    chunks = []
    counter = 0
    while len(chunks) * 8 < dim * 8:
        h = hashlib.blake2b(payload + counter.to_bytes(8, "little"), key=key, digest_size=64)
        chunks.append(h.digest())
        counter += 1
    raw = np.frombuffer(b"".join(chunks)[: dim * 8], dtype="<u8")
    u = (raw.astype(np.float64) + 0.5) / 2.0**64
    return normalize(2.0 * u - 1.0)


# -- embedding file format ---------------------------------------------------

def load_embedding_file(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    """Read ``{"dim": D, "classes": {name: [floats]}}``; vectors are widened and normalized."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        dim = int(doc["dim"])
        classes = doc["classes"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not an embedding file ({exc})") from None
    out = {}
    for name, values in classes.items():
        v = as_embedding(np.asarray(values, dtype=np.float64))
        if v.size != dim:
            raise ValueError(f"{path}: class {name!r} has dimension {v.size}, expected {dim}")
        out[name] = normalize(v)
    return dim, out


def dump_embedding_file(path: str | Path, vectors: Mapping[str, np.ndarray]) -> None:
    vectors = {k: as_embedding(v) for k, v in vectors.items()}
    dims = {v.size for v in vectors.values()}
    if len(dims) != 1:
        raise ValueError(f"inconsistent dimensions: {sorted(dims)}")
    doc = {"dim": dims.pop(), "classes": {k: [float(x) for x in v] for k, v in vectors.items()}}
    Path(path).write_text(json.dumps(doc, indent=None) + "\n", encoding="utf-8")


def dump_classifier(path: str | Path, clf: ClassifierMatrix) -> None:
    dump_embedding_file(path, clf.to_mapping())


def load_classifier(path: str | Path, names: Sequence[str] | None = None) -> ClassifierMatrix:
    _, vectors = load_embedding_file(path)
    return build_classifier(list(names) if names is not None else list(vectors), vectors)

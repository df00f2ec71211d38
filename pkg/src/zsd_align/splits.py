"""Seen/unseen split procedure, class exclusion filtering and shipped prompt data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .embedding import ClassEntry, ClassRegistry, PromptTemplateSet

TEMPLATES = (
    "itap of a {class}.",
    "a bad photo of the {class}.",
    "a origami {class}.",
    "a photo of the large {class}.",
    "a {class} in a video game.",
    "art of the {class}.",
    "a photo of the small {class}.",
)

# image-classification classes overlapping the unseen detection classes
EXCLUSIONS = (
    "airplane wing", "airliner", "military aircraft", "high-speed train",
    "parking meter", "tabby cat", "tiger cat", "Persian cat", "Siamese cat", "Egyptian Mau",
    "brown bear", "American black bear", "polar bear", "sloth bear", "hot dog", "toilet seat",
    "computer mouse", "toaster", "hair dryer",
)


@dataclass(frozen=True)
class SplitSpec:
    seen: tuple[str, ...]
    unseen: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "seen", tuple(self.seen))
        object.__setattr__(self, "unseen", tuple(self.unseen))
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ValueError(f"seen and unseen overlap: {sorted(overlap)}")

    def to_json(self) -> dict:
        return {"seen": list(self.seen), "unseen": list(self.unseen)}

    @classmethod
    def from_json(cls, doc: dict) -> "SplitSpec":
        return cls(tuple(doc["seen"]), tuple(doc["unseen"]))


@dataclass(frozen=True)
class ExclusionList:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))


@dataclass(frozen=True)
class FilterReport:
    kept: list[str]
    matched: list[str] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)


def shipped_templates() -> PromptTemplateSet:
    return PromptTemplateSet(TEMPLATES)


def shipped_exclusions() -> ExclusionList:
    return ExclusionList(EXCLUSIONS)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_rare_split(registry: ClassRegistry, fraction: float = 0.2) -> SplitSpec:
    """Mark the rarest ``fraction`` of every superclass as unseen.

    Within a superclass classes are ordered by ascending frequency (ties by
    name) and ``round(fraction * size)`` of them, rounding halves up, become
    unseen. Output lists follow registry order.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    for e in registry:
        if e.superclass is None or e.frequency is None:
            raise ValueError(f"class {e.name!r} lacks a superclass or frequency")
    groups: dict[str, list[ClassEntry]] = {}
    for e in registry:
        groups.setdefault(e.superclass, []).append(e)
    unseen: set[str] = set()
    for members in groups.values():
        members = sorted(members, key=lambda e: (e.frequency, e.name))
        k = _round_half_up(fraction * len(members))
        unseen.update(e.name for e in members[:k])
    return SplitSpec(
        tuple(n for n in registry.names if n not in unseen),
        tuple(n for n in registry.names if n in unseen),
    )


def apply_split(registry: ClassRegistry, split: SplitSpec) -> ClassRegistry:
    unseen = set(split.unseen)
    return ClassRegistry(tuple(
        ClassEntry(e.name, e.superclass, e.frequency, "unseen" if e.name in unseen else "seen")
        for e in registry))


def filter_classification_classes(names: Sequence[str], exclusion: ExclusionList | Iterable[str]) -> FilterReport:
    excl = exclusion.names if isinstance(exclusion, ExclusionList) else tuple(exclusion)
    drop = set(excl)
    present = set(names)
    ordered = list(dict.fromkeys(excl))
    return FilterReport(
        kept=[n for n in names if n not in drop],
        matched=[n for n in ordered if n in present],
        unmatched=[n for n in ordered if n not in present],
    )


def load_registry(path: str | Path) -> ClassRegistry:
    """Read ``{"classes": [{"name", "superclass", "frequency"}, ...]}``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return registry_from_json(doc)


def registry_from_json(doc: dict) -> ClassRegistry:
    entries = []
    for item in doc["classes"]:
        if isinstance(item, str):
            entries.append(ClassEntry(item))
            continue
        entries.append(ClassEntry(
            item["name"], item.get("superclass"), item.get("frequency"), item.get("role", "seen")))
    return ClassRegistry(tuple(entries))


def coco_registry() -> ClassRegistry:
    """The 80 COCO categories with supercategories and train2017 instance counts."""
    text = resources.files("zsd_align").joinpath("data/coco_categories.json").read_text(encoding="utf-8")
    return registry_from_json(json.loads(text))

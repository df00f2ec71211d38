"""Nested experiment configuration with strict keys, ``--set`` overrides and seed handling."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

from .embedding import INIT_LOG_SCALE, MAX_EFFECTIVE_SCALE
from .inference import InferenceConfig
from .train import TrainConfig, WeakConfig
from .world import SyntheticWorldConfig, world_config_from_mapping

SEED_ENV = "ZSD_ALIGN_SEED"
HASHED_SECTIONS = ("world", "model", "seeds")


class ConfigError(ValueError):
    pass


def _defaults_of(cls, skip=()) -> dict:
    obj = cls()
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def default_config() -> dict:
    """A fresh copy of every setting with its default value."""
    train = _defaults_of(TrainConfig, skip=("seed",))
    train["pretrain_epochs"] = None  # detection-only phase length; None -> total_epochs
    world = _defaults_of(SyntheticWorldConfig, skip=("seed",))
    return {
        "world": world,
        "model": {
            "hidden": 32,
            "activation": "identity",
            "init_log_scale": INIT_LOG_SCALE,
            "max_effective_scale": MAX_EFFECTIVE_SCALE,
        },
        "train": train,
        "weak": _defaults_of(WeakConfig),
        "inference": _defaults_of(InferenceConfig),
        "evaluation": {"iou_threshold": 0.5, "max_detections": 100, "subset": "unseen", "mode": "zsd"},
        "paths": {
            "data_dir": "data",
            "run_dir": "run",
            "split_file": None,
            "classifier": None,
        },
        "seeds": {"world": 0, "model": 0, "train": 0},
    }


# keys whose value may be null or a container instead of the default's type
_FLEXIBLE = {
    ("world", "split"), ("world", "cls_grid_size"), ("train", "max_steps"), ("train", "pretrain_epochs"),
    ("paths", "split_file"), ("paths", "classifier"),
}


def _check_keys(doc: Mapping, ref: Mapping, prefix: tuple[str, ...] = ()) -> None:
    for key, value in doc.items():
        where = ".".join(prefix + (key,))
        if key not in ref:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(ref[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where!r} must be a mapping")
            _check_keys(value, ref[key], prefix + (key,))


def merge(base: dict, overrides: Mapping) -> dict:
    """Deep-merge ``overrides`` into a copy of ``base``; unknown keys are rejected."""
    _check_keys(overrides, base)
    out = copy.deepcopy(base)

    def rec(dst, src):
        for k, v in src.items():
            if isinstance(v, Mapping) and isinstance(dst.get(k), dict):
                rec(dst[k], v)
            else:
                dst[k] = copy.deepcopy(v)

    rec(out, overrides)
    return out


def parse_value(text: str) -> Any:
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_set(cfg: dict, assignment: str) -> dict:
    """Apply one ``section.key=value`` override."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node: dict = {}
    leaf = node
    for k in keys[:-1]:
        leaf[k] = {}
        leaf = leaf[k]
    leaf[keys[-1]] = parse_value(raw)
    return merge(cfg, node)


def apply_seed_env(cfg: dict, environ: Mapping[str, str] = os.environ) -> dict:
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    out = copy.deepcopy(cfg)
    out["seeds"] = {k: seed for k in out["seeds"]}
    return out


def load_config(path: str | Path | None = None, sets: list[str] | tuple[str, ...] = (),
                environ: Mapping[str, str] = os.environ) -> dict:
    """Defaults, then the JSON file at ``path``, then ``--set`` overrides, then the seed variable."""
    cfg = default_config()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, doc)
    for s in sets:
        cfg = apply_set(cfg, s)
    cfg = apply_seed_env(cfg, environ)
    validate(cfg)
    return cfg


def _typecheck(cfg: dict, ref: dict, prefix=()) -> None:
    for key, dv in ref.items():
        v = cfg[key]
        where = prefix + (key,)
        if isinstance(dv, dict):
            _typecheck(v, dv, where)
            continue
        if where in _FLEXIBLE or dv is None:
            continue
        ok = (isinstance(v, bool) if isinstance(dv, bool)
              else isinstance(v, int) and not isinstance(v, bool) if isinstance(dv, int)
              else isinstance(v, (int, float)) and not isinstance(v, bool) if isinstance(dv, float)
              else isinstance(v, list) if isinstance(dv, list)
              else isinstance(v, str))
        if not ok:
            raise ConfigError(f"{'.'.join(where)!r} has the wrong type: {v!r}")


def validate(cfg: dict) -> None:
    _typecheck(cfg, default_config())
    try:
        world_section(cfg)
        train_section(cfg, "joint")
        weak_section(cfg)
        inference_section(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg["model"]["hidden"] < 1:
        raise ConfigError("model.hidden must be >= 1")
    if not math.isfinite(cfg["model"]["init_log_scale"]):
        raise ConfigError("model.init_log_scale must be finite")
    if cfg["model"]["max_effective_scale"] <= 0:
        raise ConfigError("model.max_effective_scale must be > 0")
    if cfg["evaluation"]["mode"] not in ("zsd", "gzsd"):
        raise ConfigError("evaluation.mode must be zsd or gzsd")
    if cfg["evaluation"]["subset"] not in ("seen", "unseen", "all"):
        raise ConfigError("evaluation.subset must be seen, unseen or all")


# -- typed views ----------------------------------------------------------------

def world_section(cfg: Mapping) -> SyntheticWorldConfig:
    return world_config_from_mapping({**cfg["world"], "seed": cfg["seeds"]["world"]})


def train_section(cfg: Mapping, mode: str) -> TrainConfig:
    t = dict(cfg["train"])
    pre = t.pop("pretrain_epochs")
    if mode == "detection_only" and pre is not None:
        t["total_epochs"] = pre
    return TrainConfig(**t, seed=cfg["seeds"]["train"])


def weak_section(cfg: Mapping) -> WeakConfig:
    return WeakConfig(**cfg["weak"])


def inference_section(cfg: Mapping) -> InferenceConfig:
    return InferenceConfig(**cfg["inference"])


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: Mapping) -> str:
    """Fingerprint of the settings a checkpoint depends on (world, model, seeds)."""
    doc = {k: cfg[k] for k in HASHED_SECTIONS}
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()[:16]

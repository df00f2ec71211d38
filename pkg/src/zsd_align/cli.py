"""``zsd-align`` command line: build-classifier, gen-world, split, train, evaluate, infer.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, config_hash, inference_section, load_config, train_section, weak_section, world_section
from .embedding import (PromptTemplateSet, TemperatureParam, build_class_embedding, build_classifier,
                        dump_classifier, load_embedding_file)
from .evaluation import evaluate, match_detections
from .inference import predict
from .io import (Checkpoint, DataError, append_jsonl, load_checkpoint, read_split, read_world, save_checkpoint,
                 write_json, write_world)
from .model import ToyModel
from .pipeline import GZSD, ZSD, make_evaluator, subset_classes
from .plotting import plot_pr_curves, pr_rows, write_pr_csv
from .splits import coco_registry, load_registry, make_rare_split, shipped_templates
from .train import (DETECTION_ONLY, JOINT, TEMPERATURE_KEY, NumericError, OptimizerState, epoch_stream, horizon,
                    steps_per_epoch, train)
from .world import generate_world

log = logging.getLogger("zsd_align")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.json"
METRICS_NAME = "metrics.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> dict:
    return load_config(args.config, args.set or ())


def _templates(arg):
    if arg in (None, "shipped"):
        return shipped_templates()
    doc = json.loads(Path(arg).read_text(encoding="utf-8"))
    return PromptTemplateSet(tuple(doc["templates"] if isinstance(doc, dict) else doc))


def _class_vectors(cfg, world) -> dict:
    path = cfg["paths"]["classifier"]
    if path:
        _, vectors = load_embedding_file(path)
        return vectors
    return world.class_vectors(shipped_templates())


# -- commands -------------------------------------------------------------------

def cmd_build_classifier(args) -> int:
    registry = load_registry(args.registry)
    _, vectors = load_embedding_file(args.embeddings)
    if args.templates is not None:
        templates = _templates(args.templates)

        def lookup(prompt):
            if prompt not in vectors:
                raise KeyError(f"missing embedding for prompt {prompt!r}")
            return vectors[prompt]

        missing = [n for n in registry.names if not all(p in vectors for p in templates.fill(n))]
        if missing:
            raise KeyError(f"missing embeddings for classes: {missing}")
        per_class = {n: build_class_embedding(n, templates, lookup) for n in registry.names}
    else:
        per_class = vectors
    clf = build_classifier(registry, per_class)
    dump_classifier(args.out, clf)
    print(f"classifier: dim={clf.dim} classes={clf.n_classes} -> {args.out}")
    return EXIT_OK


def cmd_gen_world(args) -> int:
    cfg = _config(args)
    wcfg = world_section(cfg)
    if cfg["paths"]["split_file"]:
        split = read_split(cfg["paths"]["split_file"])
        wcfg = replace(wcfg, split=(split.seen, split.unseen))
    world = generate_world(wcfg)
    out = Path(args.out or cfg["paths"]["data_dir"])
    written = write_world(world, out)
    print(f"world: {len(world.det_train)} detection, {len(world.cls_train)} image-label, "
          f"{len(world.test)} test images; {len(world.unseen_classes)} unseen classes -> {out} "
          f"({len(written)} files)")
    return EXIT_OK


def cmd_split(args) -> int:
    registry = load_registry(args.registry) if args.registry else coco_registry()
    split = make_rare_split(registry, args.fraction)
    write_json(args.out, split.to_json())
    print(f"split: {len(split.seen)} seen / {len(split.unseen)} unseen -> {args.out}")
    return EXIT_OK


def _fresh_state(model: ToyModel, tau: TemperatureParam) -> OptimizerState:
    params = dict(model.params)
    params[TEMPERATURE_KEY] = tau.log_scale
    return OptimizerState.zeros_like(params)


def cmd_train(args) -> int:
    cfg = _config(args)
    chash = config_hash(cfg)
    mode = args.mode
    world = read_world(cfg["paths"]["data_dir"])
    run_dir = Path(cfg["paths"]["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = run_dir / CHECKPOINT_NAME
    log_path = run_dir / METRICS_NAME
    train_cfg = train_section(cfg, mode)
    weak_cfg = weak_section(cfg)

    if args.resume:
        prev = load_checkpoint(args.resume)
        if prev.config_hash != chash:
            raise ConfigError(f"config hash mismatch: checkpoint {prev.config_hash}, config {chash}")
        model, tau = prev.model, prev.tau
        phases = list(prev.phases)
        if prev.mode == mode:
            state, start_epoch = prev.state, prev.epoch
        else:
            state, start_epoch = _fresh_state(model, tau), 0
            phases.append(mode)
    else:
        m = cfg["model"]
        sample = (world.det_train or world.test)[0].features
        model = ToyModel.init(sample.shape[-1], m["hidden"], world.config.embed_dim, cfg["seeds"]["model"],
                              m["activation"])
        tau = TemperatureParam(m["init_log_scale"], m["max_effective_scale"])
        state, start_epoch = _fresh_state(model, tau), 0
        phases = [mode]
        log_path.write_text("", encoding="utf-8")

    vectors = _class_vectors(cfg, world)
    C_D = build_classifier(world.det_classes, vectors)
    C_C = build_classifier(world.seen_classes, vectors)
    if C_D.dim != model.embed_dim:
        raise DataError(f"classifier dimension {C_D.dim} does not match the embedding head ({model.embed_dim})")
    evaluator = make_evaluator(world, vectors, inference_section(cfg)) if world.test else None

    def snapshot(record, res):
        save_checkpoint(ckpt_path, Checkpoint(res.model, res.tau, res.state, mode, res.epoch, chash, phases))
        append_jsonl(log_path, [record])

    res = train(world, model, (C_D, C_C), tau, train_cfg, weak_cfg, mode, evaluator, state, start_epoch,
                on_epoch=snapshot, max_epochs=args.stop_after)
    save_checkpoint(ckpt_path, Checkpoint(res.model, res.tau, res.state, mode, res.epoch, chash, phases))
    stream = epoch_stream(world, mode, 0, train_cfg.seed, weak_cfg.oversample_ratio)
    total = horizon(train_cfg, steps_per_epoch(len(stream), train_cfg))
    print(f"train[{mode}]: epoch {res.epoch}, step {res.state.step}/{total}, "
          f"temperature {res.tau.scale:.4f} -> {ckpt_path}")
    return EXIT_OK


def _load_for_eval(args):
    cfg = _config(args)
    world = read_world(cfg["paths"]["data_dir"])
    ckpt = load_checkpoint(args.checkpoint or Path(cfg["paths"]["run_dir"]) / CHECKPOINT_NAME)
    if ckpt.config_hash != config_hash(cfg):
        log.warning("checkpoint config hash %s differs from the current config", ckpt.config_hash)
    in_dim = (world.test or world.det_train)[0].features.shape[-1] if (world.test or world.det_train) else None
    if in_dim is not None and in_dim != ckpt.model.in_dim:
        raise DataError(f"checkpoint expects {ckpt.model.in_dim} feature channels, dataset has {in_dim}")
    subset = args.subset or cfg["evaluation"]["subset"]
    mode = args.mode or cfg["evaluation"]["mode"]
    wanted = subset_classes(world, subset)
    if not wanted:
        raise DataError(f"subset {subset!r} has no classes")
    vectors = _class_vectors(cfg, world)
    clf_names = wanted if mode == ZSD else world.names
    clf = build_classifier(clf_names, vectors)
    if clf.dim != ckpt.model.embed_dim:
        raise DataError(f"classifier dimension {clf.dim} does not match the embedding head ({ckpt.model.embed_dim})")
    return cfg, world, ckpt, subset, mode, wanted, clf


def cmd_evaluate(args) -> int:
    cfg, world, ckpt, subset, mode, wanted, clf = _load_for_eval(args)
    infer_cfg = inference_section(cfg)
    col = {world.names.index(n): j for j, n in enumerate(clf.names)}
    dets = [predict(ckpt.model, s.features, clf, ckpt.tau, infer_cfg) for s in world.test]
    gts = [[(box, col[k]) for box, k in s.ground_truth if world.names[k] in wanted] for s in world.test]
    if not any(gts):
        raise DataError(f"no {subset} ground truth in the evaluation set")
    subset_cols = [clf.names.index(n) for n in wanted]
    ev = cfg["evaluation"]
    report = evaluate(dets, gts, list(clf.names), subset_cols, subset, ev["iou_threshold"], ev["max_detections"])
    report.classifier = list(clf.names)
    out = Path(args.out or cfg["paths"]["run_dir"])
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{subset}_{mode}"
    doc = report.to_json()
    doc["mode"] = mode
    write_json(out / f"{stem}.json", doc)
    rows = pr_rows(match_detections(dets, gts, ev["iou_threshold"]), list(clf.names), subset_cols)
    write_pr_csv(out / f"pr_{subset}_{mode}.csv", rows)
    if not args.no_plot:
        plot_pr_curves(out / f"pr_{subset}_{mode}.png", rows, f"{subset} ({mode}), mAP@0.5 = {report.map:.3f}")
    print(f"evaluate[{subset}/{mode}]: mAP@0.5 {report.map:.4f}, AR@{ev['max_detections']} "
          f"{report.ar_at_100:.4f} -> {out / (stem + '.json')}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg, world, ckpt, subset, mode, wanted, clf = _load_for_eval(args)
    infer_cfg = inference_section(cfg)
    out = Path(args.out or Path(cfg["paths"]["run_dir"]) / f"detections_{subset}_{mode}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(out, "w", encoding="utf-8") as fh:
        for i, s in enumerate(world.test):
            for d in predict(ckpt.model, s.features, clf, ckpt.tau, infer_cfg):
                fh.write(json.dumps({"image_id": i, "box": list(d.box), "class": clf.names[d.class_index],
                                     "confidence": d.confidence}, sort_keys=True) + "\n")
                n += 1
    print(f"infer[{subset}/{mode}]: {n} detections on {len(world.test)} images -> {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def _add_config(p):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="zsd-align", description="Zero-shot detection by embedding alignment, at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-classifier", help="fixed classifier matrix from text embeddings")
    p.add_argument("--embeddings", required=True, help="embedding file keyed by class name or prompt")
    p.add_argument("--registry", required=True, help='class registry JSON ({"classes": [...]})')
    p.add_argument("--templates", nargs="?", const="shipped", default=None,
                   help="embeddings are keyed by filled prompts; average over the shipped (or given) templates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_classifier)

    p = sub.add_parser("gen-world", help="generate a synthetic dataset directory")
    _add_config(p)
    p.add_argument("--out", help="output directory (default: paths.data_dir)")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("split", help="rare-class seen/unseen split")
    p.add_argument("--registry", help="registry JSON with superclasses and frequencies (default: shipped COCO)")
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train or continue training")
    _add_config(p)
    p.add_argument("--mode", choices=(DETECTION_ONLY, JOINT), default=DETECTION_ONLY)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, default=None, metavar="N", help="stop after N epochs of this call")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "mAP@0.5 / AR@100 report with PR points"),
                                 ("infer", cmd_infer, "write detections as JSON lines")):
        p = sub.add_parser(name, help=helptext)
        _add_config(p)
        p.add_argument("--checkpoint", help="default: <run_dir>/checkpoint.json")
        p.add_argument("--subset", choices=("seen", "unseen", "all"))
        p.add_argument("--mode", choices=(ZSD, GZSD))
        p.add_argument("--out")
        if name == "evaluate":
            p.add_argument("--no-plot", action="store_true", help="skip the PNG, write CSV only")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"zsd-align: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"zsd-align: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"zsd-align: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"zsd-align: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

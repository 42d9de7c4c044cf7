"""``edgeseg`` command line: edges, stats, augment, eval, gradcheck, train-demo.

JSON payloads go to stdout, diagnostics to stderr. Exit codes: 0 success,
1 runtime error, 2 usage error. ``EDGESEG_LOG`` overrides ``--log-level``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import plotting
from .augment import AugmentConfig, augment_sample, build_donor_pool, class_histogram, derived_seed
from .core import (NUM_CLASSES, EdgeSegError, load_label_map, load_rgb_image, save_edge_map,
                   save_label_map, save_rgb_image)
from .edge_head import gradcheck_suite
from .edges import edge_target
from .metrics import CategoryMap, ConfusionMatrix, accumulate, report
from .toytrain import PALETTE, TrainConfig, ablation

log = logging.getLogger("edgeseg")

GRADCHECK_TOLERANCE = 1e-3


def _emit(payload) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _png_files(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def _map_jobs(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_edges(args) -> int:
    label = load_label_map(args.label)
    target = edge_target(label)
    save_edge_map(target, args.output)
    _emit({
        "input": str(args.label),
        "output": str(args.output),
        "edge_pixels": int(target.edges.sum()),
        "invalid_pixels": int((target.valid == 0).sum()),
        "pixels": int(target.edges.size),
    })
    return 0


def cmd_stats(args) -> int:
    files = _png_files(args.labels_dir)
    if not files:
        raise EdgeSegError(f"no label PNGs in {args.labels_dir}")
    labels = _map_jobs(load_label_map, files, args.jobs)
    hist = class_histogram(labels)
    freq = hist.frequencies()
    _emit({
        "images": len(files),
        "counts": hist.counts.tolist(),
        "ignore_count": hist.ignore_count,
        "frequencies": freq.tolist(),
        "rare_threshold": args.rare_threshold,
        "rare_classes": [c for c in range(NUM_CLASSES) if freq[c] < args.rare_threshold],
    })
    return 0


def _load_pairs(images_dir, labels_dir, jobs):
    label_files = _png_files(labels_dir)
    if not label_files:
        raise EdgeSegError(f"no label PNGs in {labels_dir}")
    images_dir = Path(images_dir)

    def load(path):
        image = load_rgb_image(images_dir / path.name)
        label = load_label_map(path)
        if image.shape != label.shape:
            raise EdgeSegError(f"{path.name}: image {image.shape} and label {label.shape} differ")
        return image, label

    return [p.name for p in label_files], _map_jobs(load, label_files, jobs)


def cmd_augment(args) -> int:
    doc = {}
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
    if args.seed is not None:
        doc["seed"] = args.seed
    config = AugmentConfig.from_dict(doc)
    names, pairs = _load_pairs(args.images, args.labels, args.jobs)
    pool = build_donor_pool(pairs, config)
    log.info("%d images, %d donor instances", len(pairs), len(pool))

    def work(index):
        image, label = pairs[index]
        return augment_sample(image, label, pool, config, derived_seed(config.seed, index))

    results = _map_jobs(work, list(range(len(pairs))), args.jobs)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    applied = skipped = 0
    for name, (image, label, aug_log) in zip(names, results):
        save_rgb_image(image, out / "images" / name)
        save_label_map(label, out / "labels" / name)
        for record in aug_log.records:
            lines.append(json.dumps({"image": name, **json.loads(record.to_json())}, sort_keys=True))
            skipped += record.skipped
            applied += not record.skipped
    (out / "augment_log.jsonl").write_text("".join(line + "\n" for line in lines))
    before = class_histogram([lab for _, lab in pairs]).rare_count(config.rare_classes)
    after = class_histogram([r[1] for r in results]).rare_count(config.rare_classes)
    _emit({
        "config": config.to_dict(),
        "images": len(pairs),
        "donors": len(pool),
        "pastes_applied": applied,
        "pastes_skipped": skipped,
        "rare_pixels_before": before,
        "rare_pixels_after": after,
        "output": str(out),
    })
    return 0


def cmd_eval(args) -> int:
    truth_files = _png_files(args.truth)
    if not truth_files:
        raise EdgeSegError(f"no label PNGs in {args.truth}")
    pred_dir = Path(args.pred)
    cat_map = CategoryMap.from_json(args.cat_map) if args.cat_map else CategoryMap()

    def one(path):
        cm = ConfusionMatrix(NUM_CLASSES)
        accumulate(cm, load_label_map(pred_dir / path.name), load_label_map(path))
        return cm

    total = ConfusionMatrix(NUM_CLASSES)
    for cm in _map_jobs(one, truth_files, args.jobs):
        total = total + cm
    result = report(total, cat_map)
    result["images"] = len(truth_files)
    if args.figures:
        fig_dir = Path(args.figures)
        fig_dir.mkdir(parents=True, exist_ok=True)
        result["figures"] = [
            str(plotting.iou_bars(result, fig_dir / "iou_per_class.png")),
            str(plotting.confusion_heatmap(total.counts, fig_dir / "confusion.png")),
        ]
    _emit(result)
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck_suite(seed=args.seed or 0, epsilon=args.epsilon, instances=args.instances)
    result["tolerance"] = GRADCHECK_TOLERANCE
    result["passed"] = result["max_rel_error"] < GRADCHECK_TOLERANCE
    _emit(result)
    return 0 if result["passed"] else 1


def cmd_train_demo(args) -> int:
    doc = {}
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
    if args.seed is not None:
        doc["seed"] = args.seed
    config = TrainConfig.from_dict(doc)
    out = Path(args.out)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    result = ablation(config)
    arms = result["arms"]
    (out / "train_log.jsonl").write_text(arms["with_edge"]["log"].to_jsonl())
    (out / "train_log_lambda0.jsonl").write_text(arms["without_edge"]["log"].to_jsonl())
    with open(out / "ablation.json", "w") as f:
        json.dump(result["report"], f, indent=2, sort_keys=True)
    with open(out / "network.json", "w") as f:
        json.dump({"net": arms["with_edge"]["net"].to_dict(), "edge_head": arms["with_edge"]["head"].to_dict()}, f)
    for i, pred in enumerate(arms["with_edge"]["predictions"]):
        save_label_map(pred, out / "predictions" / f"heldout_{i:03d}.png")
    plotting.training_curves({name: arm["log"] for name, arm in arms.items()}, out / "figures" / "training_curves.png")
    plotting.ablation_bars(result["report"], out / "figures" / "ablation.png")
    image, truth = result["heldout"][0]
    plotting.prediction_panel(image, truth, {name: arm["predictions"][0] for name, arm in arms.items()},
                              PALETTE, out / "figures" / "heldout_000.png")
    _emit(result["report"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0, or the config's seed)")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel per-image workers")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="edgeseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("edges", parents=[common], help="edge target PNG (0 non-edge, 255 edge, 128 invalid)")
    p.add_argument("label")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("stats", parents=[common], help="class histogram of a label directory")
    p.add_argument("labels_dir")
    p.add_argument("--rare-threshold", type=float, default=0.01)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("augment", parents=[common], help="rare-class copy-paste augmentation")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with AugmentConfig fields")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", parents=[common], help="IoU report for prediction vs truth directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--cat-map", help="JSON category mapping override")
    p.add_argument("--figures", help="directory for IoU and confusion figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of the edge head")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--instances", type=int, default=6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-demo", parents=[common], help="toy training with and without the edge loss")
    p.add_argument("--config", help="JSON with TrainConfig fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    level = os.environ.get("EDGESEG_LOG", args.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error: file not found: {err.filename or err}", file=sys.stderr)
    except (EdgeSegError, ValueError, OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())

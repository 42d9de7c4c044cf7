"""Exit criteria for the package, one test per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the PASS/FAIL lines as they
happen; they are repeated in the terminal summary either way.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import record_acceptance
from edgeseg.augment import AugmentConfig, augment_sample, build_donor_pool, class_histogram, derived_seed
from edgeseg.cli import main
from edgeseg.core import BinaryEdgeMap, LabelMap, save_label_map, save_rgb_image
from edgeseg.edge_head import (ConvParams, edge_loss, edge_loss_wrt_input, edge_loss_wrt_params, grad_check,
                               random_instance, sgd_step, softmax_xent2d)
from edgeseg.edges import edge_target, sobel_magnitude
from edgeseg.metrics import (CITYSCAPES_CATEGORIES, CategoryMap, ConfusionMatrix, category_metrics, iou_per_class,
                             mean_iou)
from edgeseg.toytrain import TrainConfig, ablation, synth_dataset
from oracles import collapse_oracle, edge_target_oracle, iou_oracle, miou_oracle, sobel_oracle

pytestmark = pytest.mark.acceptance


def test_criterion_1_sobel_oracle_equivalence():
    rng = np.random.default_rng(101)
    maps = []
    for _ in range(1000):
        h, w = (int(v) for v in rng.integers(1, 33, 2))
        data = rng.integers(0, 19, (h, w)).astype(np.uint8)
        data[rng.random((h, w)) < 0.05] = 255
        maps.append(data)
    start = time.perf_counter()
    ours = [(sobel_magnitude(LabelMap(d)).magnitude, edge_target(LabelMap(d))) for d in maps]
    elapsed = time.perf_counter() - start
    mismatches = 0
    for data, (mag, target) in zip(maps, ours):
        edges, valid = edge_target_oracle(data.tolist())
        if (mag.tolist() != sobel_oracle(data.tolist()) or target.edges.tolist() != edges
                or target.valid.tolist() != valid):
            mismatches += 1
    passed = mismatches == 0 and elapsed < 10.0
    record_acceptance(1, "Sobel/edge_target exact oracle equivalence on 1000 maps", passed,
                      f"mismatches={mismatches}, runtime={elapsed:.2f}s < 10s")
    assert passed


def test_criterion_2_gradient_correctness():
    rng = np.random.default_rng(202)
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        channels = (1, 3, 19)[i % 3]
        h, w = (int(v) for v in rng.integers(3, 9, 2))
        seg, label, params = random_instance(rng, channels, h, w)
        worst = max(worst,
                    grad_check(edge_loss_wrt_params(seg, label, params), params.flat(), 1e-3),
                    grad_check(edge_loss_wrt_input(label, params), seg, 1e-3))
    elapsed = time.perf_counter() - start
    passed = worst < 1e-3 and elapsed < 30.0
    record_acceptance(2, "edge_loss gradients vs central differences, 20 instances", passed,
                      f"max_rel_error={worst:.2e} < 1e-3, runtime={elapsed:.2f}s < 30s")
    assert passed


def test_criterion_3_analytic_loss_anchors():
    rng = np.random.default_rng(303)
    label = LabelMap(rng.integers(0, 19, (8, 8)))
    uniform = edge_loss(rng.normal(size=(19, 8, 8)), label, ConvParams.zeros(19)).loss
    target = edge_target(label)
    logits = np.where(target.edges[None] == np.array([0, 1])[:, None, None], 30.0, -30.0)
    saturated, _ = softmax_xent2d(logits, target)
    flat_uniform, _ = softmax_xent2d(np.zeros((2, 8, 8)), BinaryEdgeMap(target.edges, target.valid))
    passed = abs(uniform - math.log(2)) < 1e-6 and abs(flat_uniform - math.log(2)) < 1e-6 and saturated < 1e-6
    record_acceptance(3, "uniform logits give ln 2, saturated-correct logits give ~0", passed,
                      f"|uniform-ln2|={abs(uniform - math.log(2)):.1e}, saturated={saturated:.1e}")
    assert passed


def test_criterion_4_edge_head_trainability():
    seg, label, params = random_instance(np.random.default_rng(404), 19, 8, 8)
    start = time.perf_counter()
    initial = edge_loss(seg, label, params).loss
    params.zero_grad()
    for _ in range(200):
        edge_loss(seg, label, params)
        sgd_step(params, 0.01)
    final = edge_loss(seg, label, params).loss
    elapsed = time.perf_counter() - start
    passed = final < 0.5 * initial and elapsed < 5.0
    record_acceptance(4, "200 SGD steps at lr 0.01 halve the edge loss", passed,
                      f"initial={initial:.4f}, final={final:.4f}, runtime={elapsed:.2f}s < 5s")
    assert passed


def _augment_cli(images, labels, out, jobs):
    code = main(["augment", "--images", str(images), "--labels", str(labels), "--out", str(out),
                 "--seed", "42", "--jobs", str(jobs)])
    return code, {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_criterion_5_augmentation_monotone_and_deterministic(tmp_path, capsys):
    start = time.perf_counter()
    corpus = synth_dataset(50, 64, 19, seed=5)
    config = AugmentConfig(seed=42, min_instance_pixels=32)
    pool = build_donor_pool(corpus, config)
    decreases = strays = 0
    for i, (image, label) in enumerate(corpus):
        out_image, out_label, log = augment_sample(image, label, pool, config, derived_seed(42, i))
        again = augment_sample(image, label, pool, config, derived_seed(42, i))
        assert again[0] == out_image and again[1] == out_label
        if class_histogram([out_label]).rare_count(config.rare_classes) < \
                class_histogram([label]).rare_count(config.rare_classes):
            decreases += 1
        changed = (out_label.data != label.data) | np.any(out_image.data != image.data, axis=2)
        strays += int((changed & ~log.footprint(label.shape)).sum())

    images, labels = tmp_path / "images", tmp_path / "labels"
    images.mkdir()
    labels.mkdir()
    for i, (image, label) in enumerate(corpus):
        save_rgb_image(image, images / f"{i:03d}.png")
        save_label_map(label, labels / f"{i:03d}.png")
    code1, tree1 = _augment_cli(images, labels, tmp_path / "run1", 1)
    code2, tree2 = _augment_cli(images, labels, tmp_path / "run2", 4)
    capsys.readouterr()
    elapsed = time.perf_counter() - start
    identical = code1 == code2 == 0 and tree1 == tree2 and len(tree1) == 101
    passed = len(pool) > 0 and decreases == 0 and strays == 0 and identical and elapsed < 20.0
    record_acceptance(5, "copy-paste never lowers rare pixels, no stray writes, byte-identical across --jobs",
                      passed, f"donors={len(pool)}, decreases={decreases}, stray_pixels={strays}, "
                              f"identical={identical}, runtime={elapsed:.2f}s < 20s")
    assert passed


def test_criterion_6_metrics_oracle_equivalence():
    rng = np.random.default_rng(606)
    start = time.perf_counter()
    worst = 0.0
    undefined_mismatch = 0
    for _ in range(500):
        counts = rng.integers(0, 100, (19, 19))
        counts[rng.random((19, 19)) < rng.uniform(0.3, 0.95)] = 0
        cm = ConfusionMatrix(counts=counts)
        as_list = counts.tolist()
        pairs = list(zip(iou_per_class(cm), iou_oracle(as_list)))
        collapsed = collapse_oracle(as_list, CITYSCAPES_CATEGORIES, 7)
        per_cat, mean_cat = category_metrics(cm, CategoryMap())
        pairs += list(zip(per_cat, iou_oracle(collapsed)))
        for a, b in pairs:
            if (a is None) != (b is None):
                undefined_mismatch += 1
            elif a is not None:
                worst = max(worst, abs(a - b))
        if any(v is not None for v in iou_oracle(as_list)):
            worst = max(worst, abs(mean_iou(cm) - miou_oracle(as_list)))
            worst = max(worst, abs(mean_cat - miou_oracle(collapsed)))

    preds = [LabelMap(rng.integers(0, 19, (8, 8))) for _ in range(12)]
    truths = [LabelMap(np.where(rng.random((8, 8)) < 0.1, 255, rng.integers(0, 19, (8, 8)))) for _ in range(12)]
    reference = ConfusionMatrix()
    for p, t in zip(preds, truths):
        reference.accumulate(p, t)
    invariant = True
    for _ in range(10):
        shuffled = ConfusionMatrix()
        for i in rng.permutation(12):
            shuffled.accumulate(preds[i], truths[i])
        invariant &= shuffled == reference
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-9 and undefined_mismatch == 0 and invariant and elapsed < 5.0
    record_acceptance(6, "IoU/mIoU/category IoU match brute force on 500 matrices; accumulate order-free",
                      passed, f"max_abs_diff={worst:.1e} <= 1e-9, permutation_invariant={invariant}, "
                              f"runtime={elapsed:.2f}s < 5s")
    assert passed


def test_criterion_7_ablation_analogue():
    config = TrainConfig()
    assert (config.n_train, config.image_size, config.num_classes, config.seed, config.epochs) == (50, 64, 4, 7, 100)
    start = time.perf_counter()
    report = ablation(config)["report"]
    elapsed = time.perf_counter() - start
    with_edge, without = report["arms"]["with_edge"], report["arms"]["without_edge"]
    converged = all(arm["final_combined_loss"] < 0.5 * arm["initial_combined_loss"] for arm in (with_edge, without))
    passed = with_edge["boundary_f1"] >= without["boundary_f1"] and converged and elapsed < 120.0
    record_acceptance(7, "boundary-F1 with edge loss >= without; both arms halve combined loss", passed,
                      f"bF1 {with_edge['boundary_f1']:.4f} vs {without['boundary_f1']:.4f}, "
                      f"mIoU {with_edge['mIoU']:.4f} vs {without['mIoU']:.4f}, runtime={elapsed:.1f}s < 120s")
    assert passed


def test_criterion_8_train_demo_determinism(tmp_path, capsys):
    config = tmp_path / "train.json"
    config.write_text(json.dumps({"epochs": 8, "n_train": 12, "n_heldout": 4, "image_size": 32, "crop": 32,
                                  "seed": 3}))
    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train-demo", "--config", str(config), "--out", str(out)]) == 0
        logs.append(((out / "train_log.jsonl").read_bytes(), (out / "train_log_lambda0.jsonl").read_bytes(),
                     (out / "ablation.json").read_bytes()))
    capsys.readouterr()
    passed = logs[0] == logs[1] and logs[0][0].count(b"\n") == 9
    record_acceptance(8, "train-demo TrainLog identical across two runs", passed,
                      f"log_bytes={len(logs[0][0])}")
    assert passed

"""Desk-scale training demo for the edge-preserving loss.

A two-layer convolutional network is trained on synthetic shape scenes with
``L = L_seg + lambda_edge * L_edge``. The edge term runs the segmentation
logits through the two-channel edge head and compares them with the Sobel
edge target of the ground truth.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .core import NUM_CLASSES, DimensionMismatch, LabelMap, RgbImage
from .edge_head import ConvParams, conv3x3_backward, conv3x3_forward, edge_loss, softmax, softmax_xent
from .edges import boundary_pixels, edge_target
from .metrics import ConfusionMatrix, mean_iou

log = logging.getLogger(__name__)

# Cityscapes trainId colours
PALETTE = np.array([
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
], dtype=np.int64)

HIDDEN_CHANNELS = 8
MAX_PARAMETERS = 2000
HELDOUT_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class TrainConfig:
    num_classes: int = 4
    lambda_edge: float = 1.0
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 3
    crop: int = 64
    seed: int = 7
    n_train: int = 50
    n_heldout: int = 10
    image_size: int = 64
    noise_std: float = 30.0
    boundary_tolerance: int = 2
    edge_input: str = "logits"

    def __post_init__(self):
        if not 2 <= self.num_classes <= NUM_CLASSES:
            raise ValueError(f"num_classes must be in 2..{NUM_CLASSES}")
        if self.lambda_edge < 0:
            raise ValueError("lambda_edge must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.crop < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size and crop must be positive, epochs >= 0")
        if self.n_train < 1 or self.n_heldout < 1 or self.image_size < 1:
            raise ValueError("dataset sizes must be positive")
        if self.boundary_tolerance < 0:
            raise ValueError("boundary_tolerance must be >= 0")
        if self.edge_input not in ("logits", "probabilities"):
            raise ValueError("edge_input must be 'logits' or 'probabilities'")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    seg_loss: float
    edge_loss: float
    combined_loss: float
    boundary_f1: float


@dataclass
class TrainLog:
    lambda_edge: float
    initial: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"epoch": -1, "lambda_edge": self.lambda_edge, **self.initial}, sort_keys=True)]
        lines += [json.dumps({"lambda_edge": self.lambda_edge, **asdict(r)}, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @property
    def final_combined(self) -> float:
        return self.records[-1].combined_loss if self.records else self.initial["combined_loss"]


class TinySegNet:
    """conv3x3(3 -> 8) -> ReLU -> conv3x3(8 -> num_classes), zero padding 1."""

    def __init__(self, num_classes: int, rng=None):
        rng = np.random.default_rng(rng)
        self.num_classes = num_classes
        self.conv1 = ConvParams.random(3, HIDDEN_CHANNELS, rng)
        self.conv2 = ConvParams.random(HIDDEN_CHANNELS, num_classes, rng)
        if self.parameter_count >= MAX_PARAMETERS:
            raise ValueError(f"network has {self.parameter_count} parameters, limit is {MAX_PARAMETERS}")

    @property
    def layers(self) -> tuple:
        return self.conv1, self.conv2

    @property
    def parameter_count(self) -> int:
        return sum(layer.size for layer in self.layers)

    def forward(self, x: np.ndarray):
        pre = conv3x3_forward(x, self.conv1)
        hidden = np.maximum(pre, 0.0)
        logits = conv3x3_forward(hidden, self.conv2)
        return logits, (x, pre, hidden)

    def backward(self, cache, grad_logits: np.ndarray) -> None:
        x, pre, hidden = cache
        gw2, gb2, g_hidden = conv3x3_backward(hidden, self.conv2, grad_logits)
        g_pre = g_hidden * (pre > 0)
        gw1, gb1, _ = conv3x3_backward(x, self.conv1, g_pre)
        self.conv2.grad_weights += gw2
        self.conv2.grad_bias += gb2
        self.conv1.grad_weights += gw1
        self.conv1.grad_bias += gb1

    def predict(self, image: RgbImage) -> LabelMap:
        logits, _ = self.forward(image_tensor(image))
        return LabelMap(logits.argmax(axis=0).astype(np.uint8))

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes,
                "conv1": self.conv1.to_dict(), "conv2": self.conv2.to_dict()}


def image_tensor(image: RgbImage) -> np.ndarray:
    """``(3, H, W)`` float64 tensor scaled to [-1, 1]."""
    return image.data.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def synth_dataset(n: int, size: int, num_classes: int, seed: int, noise_std: float = 30.0) -> list:
    """Scenes of rectangles and discs over a class-0 background.

    Each class has a fixed base colour with additive Gaussian noise. Every
    label map contains at least two classes.
    """
    if not 2 <= num_classes <= NUM_CLASSES:
        raise ValueError(f"num_classes must be in 2..{NUM_CLASSES}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for _ in range(n):
        label = np.zeros((size, size), dtype=np.uint8)
        shapes = int(rng.integers(2, 5))
        drawn = 0
        while drawn < shapes or len(np.unique(label)) < 2:
            cls = int(rng.integers(1, num_classes))
            if rng.random() < 0.5:
                w, h = (int(v) for v in rng.integers(max(2, size // 8), max(3, size // 2) + 1, size=2))
                x0, y0 = (int(v) for v in rng.integers(0, size - min(w, size) + 1, size=2))
                region = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
            else:
                r = float(rng.uniform(max(1.5, size / 10), max(2.0, size / 4)))
                cx, cy = rng.uniform(0, size, size=2)
                region = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            label[region] = cls
            drawn += 1
        noise = rng.normal(0.0, noise_std, size=(size, size, 3))
        pixels = np.clip(np.rint(PALETTE[label] + noise), 0, 255).astype(np.uint8)
        out.append((RgbImage(pixels), LabelMap(label)))
    return out


def pixel_xent_seg(logits, label: LabelMap):
    """Mean per-pixel softmax cross-entropy, ignoring label 255."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3 or z.shape[1:] != label.shape:
        raise DimensionMismatch(f"logits {z.shape} vs label {label.shape}")
    data = label.data
    valid = data != 255
    if np.any(data[valid] >= z.shape[0]):
        raise DimensionMismatch(f"label has class ids >= {z.shape[0]} logit channels")
    return softmax_xent(z, data, valid)


def combined_loss(net: TinySegNet, head: ConvParams, x: np.ndarray, label: LabelMap, lambda_edge: float,
                  target=None, edge_input: str = "logits", scale: float = 1.0):
    """Loss ``L_seg + lambda_edge * L_edge`` for one image.

    Gradients of ``scale * L`` are added to the slots of ``net`` and
    ``head``. Returns ``(combined, seg_loss, edge_loss)``.
    """
    logits, cache = net.forward(x)
    seg, grad_logits = pixel_xent_seg(logits, label)
    grad_logits *= scale
    if edge_input == "probabilities":
        probs = softmax(logits)
        edge_in = probs
    else:
        edge_in = logits
    head_grad_w, head_grad_b = head.grad_weights.copy(), head.grad_bias.copy()
    res = edge_loss(edge_in, label, head, target=target)
    weight = scale * lambda_edge
    # edge_loss adds unscaled head gradients; rescale just this contribution
    head.grad_weights[...] = head_grad_w + weight * (head.grad_weights - head_grad_w)
    head.grad_bias[...] = head_grad_b + weight * (head.grad_bias - head_grad_b)
    g_edge = weight * res.grad_input
    if edge_input == "probabilities":
        g_edge = probs * (g_edge - (probs * g_edge).sum(axis=0, keepdims=True))
    net.backward(cache, grad_logits + g_edge)
    return seg + lambda_edge * res.loss, seg, res.loss


def boundary_f1(pred: LabelMap, truth: LabelMap, tolerance: int = 2) -> float:
    """F1 of boundary pixels matched within Chebyshev distance ``tolerance``."""
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    valid = edge_target(truth).valid.astype(bool)
    pb = boundary_pixels(pred) & valid
    tb = boundary_pixels(truth)
    n_pred, n_truth = int(pb.sum()), int(tb.sum())
    if n_pred == 0 and n_truth == 0:
        return 1.0
    if n_pred == 0 or n_truth == 0:
        return 0.0
    square = np.ones((2 * tolerance + 1, 2 * tolerance + 1), dtype=bool)
    precision = (pb & ndimage.binary_dilation(tb, square)).sum() / n_pred
    recall = (tb & ndimage.binary_dilation(pb, square)).sum() / n_truth
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def _random_crop(image: RgbImage, label: LabelMap, crop: int, rng):
    h, w = label.shape
    if h <= crop and w <= crop:
        return image, label
    ch, cw = min(crop, h), min(crop, w)
    y = int(rng.integers(h - ch + 1))
    x = int(rng.integers(w - cw + 1))
    return RgbImage(image.data[y:y + ch, x:x + cw]), LabelMap(label.data[y:y + ch, x:x + cw])


def evaluate(net: TinySegNet, dataset, tolerance: int = 2) -> dict:
    """Mean boundary-F1 and mIoU of ``net`` over ``dataset``."""
    cm = ConfusionMatrix(net.num_classes)
    scores = []
    predictions = []
    for image, label in dataset:
        pred = net.predict(image)
        predictions.append(pred)
        cm.accumulate(pred, label)
        scores.append(boundary_f1(pred, label, tolerance))
    return {"boundary_f1": float(np.mean(scores)), "mIoU": mean_iou(cm), "predictions": predictions}


def _dataset_losses(net, head, samples, config) -> dict:
    seg_total = edge_total = 0.0
    for x, label, target in samples:
        _, seg, edge = combined_loss(net, head, x, label, config.lambda_edge, target, config.edge_input, scale=0.0)
        seg_total += seg
        edge_total += edge
    net.conv1.zero_grad(), net.conv2.zero_grad(), head.zero_grad()
    n = len(samples)
    return {"seg_loss": seg_total / n, "edge_loss": edge_total / n,
            "combined_loss": (seg_total + config.lambda_edge * edge_total) / n}


def train(config: TrainConfig, dataset, heldout=None):
    """Mini-batch SGD on the combined loss; returns ``(net, head, TrainLog)``.

    ``heldout`` (defaults to ``dataset``) is used for the per-epoch
    boundary-F1.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    net = TinySegNet(config.num_classes, rng)
    head = ConvParams.random(config.num_classes, 2, rng)
    heldout = dataset if heldout is None else heldout
    train_log = TrainLog(config.lambda_edge)
    cached = [(image_tensor(img), lab, edge_target(lab)) for img, lab in dataset]
    train_log.initial = _dataset_losses(net, head, cached, config)
    needs_crop = any(lab.height > config.crop or lab.width > config.crop for _, lab in dataset)
    params = (*net.layers, head)
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        seg_sum = edge_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for i in batch:
                if needs_crop:
                    img, lab = _random_crop(*dataset[i], config.crop, rng)
                    x, target = image_tensor(img), edge_target(lab)
                else:
                    x, lab, target = cached[i]
                _, seg, edge = combined_loss(net, head, x, lab, config.lambda_edge, target,
                                             config.edge_input, scale=1.0 / len(batch))
                seg_sum += seg
                edge_sum += edge
            for p in params:
                p.weights -= config.learning_rate * p.grad_weights
                p.bias -= config.learning_rate * p.grad_bias
                p.zero_grad()
        n = len(order)
        bf1 = evaluate(net, heldout, config.boundary_tolerance)["boundary_f1"]
        record = EpochRecord(epoch, seg_sum / n, edge_sum / n,
                             (seg_sum + config.lambda_edge * edge_sum) / n, bf1)
        if not all(np.isfinite([record.seg_loss, record.edge_loss, record.combined_loss])):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        train_log.records.append(record)
        log.debug("lambda=%g epoch %d combined %.4f bF1 %.4f", config.lambda_edge, epoch,
                  record.combined_loss, bf1)
    return net, head, train_log


def make_datasets(config: TrainConfig):
    train_set = synth_dataset(config.n_train, config.image_size, config.num_classes, config.seed,
                              config.noise_std)
    heldout = synth_dataset(config.n_heldout, config.image_size, config.num_classes,
                            config.seed + HELDOUT_SEED_OFFSET, config.noise_std)
    return train_set, heldout


def ablation(config: TrainConfig, datasets=None) -> dict:
    """Train with and without the edge term on identical data and seeds.

    Returns a dict with a JSON-ready ``report`` plus the trained networks,
    logs and held-out predictions of both arms.
    """
    train_set, heldout = datasets if datasets is not None else make_datasets(config)
    arms = {}
    report = {"config": config.to_dict(), "arms": {}}
    for name, lam in (("without_edge", 0.0), ("with_edge", config.lambda_edge)):
        arm_config = TrainConfig(**{**config.to_dict(), "lambda_edge": lam})
        net, head, train_log = train(arm_config, train_set, heldout)
        scores = evaluate(net, heldout, config.boundary_tolerance)
        arms[name] = {"net": net, "head": head, "log": train_log, "predictions": scores["predictions"]}
        report["arms"][name] = {
            "lambda_edge": lam,
            "mIoU": scores["mIoU"],
            "boundary_f1": scores["boundary_f1"],
            "initial_combined_loss": train_log.initial["combined_loss"],
            "final_combined_loss": train_log.final_combined,
        }
    with_edge, without = report["arms"]["with_edge"], report["arms"]["without_edge"]
    report["boundary_f1_gain"] = with_edge["boundary_f1"] - without["boundary_f1"]
    report["mIoU_gain"] = with_edge["mIoU"] - without["mIoU"]
    return {"report": report, "arms": arms, "heldout": heldout}

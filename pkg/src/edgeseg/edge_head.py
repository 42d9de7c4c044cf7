"""Two-channel 3x3 edge head with hand-written forward and backward passes.

The head maps a segmentation output ``(C, H, W)`` to edge/non-edge logits
``(2, H, W)`` with a stride-1, zero-padded convolution, then scores them
against :func:`edgeseg.edges.edge_target` with a per-pixel softmax
cross-entropy averaged over valid pixels.

All arithmetic runs in float64. Inputs may be float32.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import BinaryEdgeMap, DimensionMismatch, EdgeSegError, LabelMap, as_tensor3
from .edges import edge_target


class ChannelMismatch(EdgeSegError):
    pass


class ShapeMismatch(EdgeSegError):
    pass


class NoValidPixels(EdgeSegError):
    pass


@dataclass(eq=False)
class ConvParams:
    """Weights ``(out, in, 3, 3)`` and bias ``(out,)`` with gradient slots.

    Gradient slots accumulate across backward calls until :func:`sgd_step`
    or :meth:`zero_grad` clears them. The edge head uses ``out == 2``; the
    toy segmentation network reuses the class for its own layers.
    """

    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ShapeMismatch(f"weights must be (out, in, 3, 3), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("parameters must be finite")
        if self.grad_weights is None:
            self.grad_weights = np.zeros_like(self.weights)
        if self.grad_bias is None:
            self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int = 2) -> "ConvParams":
        return cls(np.zeros((out_channels, in_channels, 3, 3)), np.zeros(out_channels))

    @classmethod
    def random(cls, in_channels: int, out_channels: int = 2, rng=None, scale=None) -> "ConvParams":
        """He-normal weights, zero bias."""
        rng = np.random.default_rng(rng)
        if scale is None:
            scale = np.sqrt(2.0 / (9 * in_channels))
        weights = rng.standard_normal((out_channels, in_channels, 3, 3)) * scale
        return cls(weights, np.zeros(out_channels))

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def zero_grad(self) -> None:
        self.grad_weights[...] = 0.0
        self.grad_bias[...] = 0.0

    def copy(self) -> "ConvParams":
        return ConvParams(self.weights.copy(), self.bias.copy(), self.grad_weights.copy(), self.grad_bias.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grad_weights.ravel(), self.grad_bias])

    def set_flat(self, vector: np.ndarray) -> None:
        n = self.weights.size
        self.weights[...] = vector[:n].reshape(self.weights.shape)
        self.bias[...] = vector[n:]

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConvParams":
        params = cls(doc["weights"], doc["bias"])
        if params.in_channels != doc["in_channels"]:
            raise ChannelMismatch(f"in_channels {doc['in_channels']} disagrees with weights {params.weights.shape}")
        return params

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "ConvParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class EdgeLossResult:
    loss: float
    grad_input: np.ndarray
    valid_pixel_count: int


def _im2col(x: np.ndarray) -> np.ndarray:
    """Zero-padded 3x3 patches of ``(C, H, W)`` as a ``(C*9, H*W)`` matrix."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    return win.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    cols = cols.reshape(c, 3, 3, h, w)
    padded = np.zeros((c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            padded[:, dy:dy + h, dx:dx + w] += cols[:, dy, dx]
    return padded[:, 1:-1, 1:-1]


def conv3x3_forward(input, params: ConvParams) -> np.ndarray:
    x = as_tensor3(input).astype(np.float64)
    c, h, w = x.shape
    if c != params.in_channels:
        raise ChannelMismatch(f"input has {c} channels, params expect {params.in_channels}")
    out = params.weights.reshape(params.out_channels, -1) @ _im2col(x)
    out += params.bias[:, None]
    return out.reshape(params.out_channels, h, w)


def conv3x3_backward(input, params: ConvParams, grad_output):
    """Return ``(grad_weights, grad_bias, grad_input)`` for one forward call.

    Does not touch the gradient slots of ``params``.
    """
    x = as_tensor3(input).astype(np.float64)
    g = np.asarray(grad_output, dtype=np.float64)
    c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeMismatch(f"input has {c} channels, params expect {params.in_channels}")
    if g.shape != (params.out_channels, h, w):
        raise ShapeMismatch(f"grad_output shape {g.shape} != {(params.out_channels, h, w)}")
    g2 = g.reshape(params.out_channels, h * w)
    grad_bias = g2.sum(axis=1)
    grad_weights = (g2 @ _im2col(x).T).reshape(params.weights.shape)
    grad_cols = params.weights.reshape(params.out_channels, -1).T @ g2
    grad_input = _col2im(grad_cols, x.shape)
    return grad_weights, grad_bias, grad_input


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits, target: np.ndarray, valid: np.ndarray, class_weights=None):
    """Mean softmax cross-entropy over valid pixels for ``(K, H, W)`` logits.

    ``target`` holds class indices; entries where ``valid`` is false are
    ignored and receive zero gradient. With ``class_weights`` the mean is
    weighted by the target class of each pixel.
    """
    z = np.asarray(logits, dtype=np.float64)
    k = z.shape[0]
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise NoValidPixels("no valid target pixels; loss is undefined")
    t = np.where(valid, target, 0).astype(np.intp)
    shifted = z - z.max(axis=0, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=0))
    log_prob = shifted - log_norm
    picked = np.take_along_axis(log_prob, t[None], axis=0)[0]
    if class_weights is None:
        weight = valid.astype(np.float64)
    else:
        weight = np.asarray(class_weights, dtype=np.float64)[t] * valid
    total = weight.sum()
    loss = float((-picked * weight).sum() / total)
    grad = np.exp(log_prob)
    grad -= np.arange(k)[:, None, None] == t[None]
    grad *= weight / total
    return loss, grad


def softmax_xent2d(logits, target: BinaryEdgeMap, class_weights=None):
    """Edge/non-edge cross-entropy; returns ``(loss, grad_logits)``."""
    z = as_tensor3(logits)
    if z.shape[0] != 2:
        raise ChannelMismatch(f"edge logits need 2 channels, got {z.shape[0]}")
    if z.shape[1:] != target.shape:
        raise DimensionMismatch(f"logits {z.shape[1:]} vs target {target.shape}")
    return softmax_xent(z, target.edges, target.valid, class_weights)


def edge_loss(seg_output, label: LabelMap, params: ConvParams, class_weights=None,
              target: BinaryEdgeMap | None = None) -> EdgeLossResult:
    """Forward and backward through the edge head.

    Adds the parameter gradients to the slots of ``params`` and returns the
    gradient with respect to ``seg_output``. ``target`` may be passed to
    reuse a precomputed :func:`edge_target`.
    """
    x = as_tensor3(seg_output)
    if x.shape[1:] != label.shape:
        raise DimensionMismatch(f"seg_output {x.shape[1:]} vs label {label.shape}")
    if params.out_channels != 2:
        raise ChannelMismatch("the edge head must have exactly 2 output channels")
    if target is None:
        target = edge_target(label)
    logits = conv3x3_forward(x, params)
    loss, grad_logits = softmax_xent2d(logits, target, class_weights)
    gw, gb, gx = conv3x3_backward(x, params, grad_logits)
    params.grad_weights += gw
    params.grad_bias += gb
    return EdgeLossResult(loss, gx, int(target.valid.sum()))


def grad_check(fn, point, epsilon: float = 1e-3) -> float:
    """Compare an analytic gradient with central differences.

    ``fn(x)`` must return ``(value, gradient)``. The result is the largest
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`` over all
    coordinates of ``point``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(point, dtype=np.float64)
    _, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    numeric = np.empty_like(x)
    flat, num_flat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        f_plus = fn(x.copy())[0]
        flat[i] = orig - epsilon
        f_minus = fn(x.copy())[0]
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * epsilon)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def sgd_step(params: ConvParams, learning_rate: float) -> None:
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    params.weights -= learning_rate * params.grad_weights
    params.bias -= learning_rate * params.grad_bias
    params.zero_grad()


def edge_loss_wrt_params(seg_output, label: LabelMap, params: ConvParams, **kwargs):
    """Scalar map over the flattened parameters, for :func:`grad_check`."""
    target = edge_target(label)

    def fn(vector):
        trial = params.copy()
        trial.set_flat(vector)
        trial.zero_grad()
        result = edge_loss(seg_output, label, trial, target=target, **kwargs)
        return result.loss, trial.flat_grad()

    return fn


def edge_loss_wrt_input(label: LabelMap, params: ConvParams, **kwargs):
    """Scalar map over ``seg_output``, for :func:`grad_check`."""
    target = edge_target(label)

    def fn(x):
        result = edge_loss(x, label, params.copy(), target=target, **kwargs)
        return result.loss, result.grad_input

    return fn


def random_instance(rng, channels: int, height: int, width: int, num_classes: int = 19, ignore_fraction: float = 0.1):
    """Random (seg_output, label, params) triple with at least one valid pixel."""
    rng = np.random.default_rng(rng)
    while True:
        classes = rng.integers(0, min(num_classes, 19), size=(height, width))
        # blocky labels so edges are neither everywhere nor absent
        classes = np.repeat(np.repeat(classes[::2, ::2], 2, 0), 2, 1)[:height, :width]
        ignore = rng.random((height, width)) < ignore_fraction
        label = LabelMap(np.where(ignore, 255, classes))
        if edge_target(label).valid.any():
            break
    seg = rng.standard_normal((channels, height, width))
    params = ConvParams.random(channels, 2, rng, scale=0.5)
    params.bias[...] = rng.standard_normal(2) * 0.1
    return seg, label, params


def gradcheck_suite(seed: int = 0, epsilon: float = 1e-3, instances: int = 6) -> dict:
    """Run edge-head gradient checks on random instances; report max errors."""
    rng = np.random.default_rng(seed)
    channel_choices = (1, 3, 19)
    param_err = input_err = 0.0
    cases = []
    for i in range(instances):
        channels = channel_choices[i % len(channel_choices)]
        h, w = (int(v) for v in rng.integers(3, 9, size=2))
        seg, label, params = random_instance(rng, channels, h, w)
        pe = grad_check(edge_loss_wrt_params(seg, label, params), params.flat(), epsilon)
        ie = grad_check(edge_loss_wrt_input(label, params), seg, epsilon)
        param_err, input_err = max(param_err, pe), max(input_err, ie)
        cases.append({"channels": channels, "height": h, "width": w,
                      "params_rel_error": pe, "input_rel_error": ie})
    return {
        "seed": seed,
        "epsilon": epsilon,
        "max_rel_error": max(param_err, input_err),
        "max_rel_error_params": param_err,
        "max_rel_error_input": input_err,
        "cases": cases,
    }

"""Tiny deterministic NHWC network core: layers, forward/backward, SGD training.

Tensors are plain float64 numpy arrays. A single sample is ``(H, W, C)``;
batched calls take ``(N, H, W, C)``. Dense weights are stored ``(in, out)``
so a dense layer computes ``x @ W + b``; conv kernels are ``(kh, kw, cin, cout)``.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import XorShift64Star, epoch_seed


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str = "loss diverged"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class Conv2D:
    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 1
    kind = "conv"

    def output_shape(self, shape):
        h, w, c = shape
        kh, kw, cin, cout = self.kernel.shape
        if c != cin:
            raise ShapeError(f"conv expects {cin} channels, got {c}")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return (ho, wo, cout)

    def params(self):
        return [self.kernel, self.bias]


@dataclass
class ReLU:
    kind = "relu"

    def output_shape(self, shape):
        return tuple(shape)

    def params(self):
        return []


@dataclass
class MaxPool2D:
    window: int = 2
    kind = "maxpool"

    def output_shape(self, shape):
        h, w, c = shape
        if h % self.window or w % self.window:
            raise ShapeError(f"maxpool window {self.window} does not tile {h}x{w}")
        return (h // self.window, w // self.window, c)

    def params(self):
        return []


@dataclass
class Flatten:
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def params(self):
        return []


@dataclass
class Dense:
    weights: np.ndarray
    bias: np.ndarray
    kind = "dense"

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weights.shape[0]:
            raise ShapeError(f"dense expects ({self.weights.shape[0]},), got {tuple(shape)}")
        return (self.weights.shape[1],)

    def params(self):
        return [self.weights, self.bias]


Layer = Union[Conv2D, ReLU, MaxPool2D, Flatten, Dense]


@dataclass
class Model:
    layers: list
    input_shape: tuple
    class_count: int
    penultimate_index: Optional[int]

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    def validate(self):
        shapes = self.layer_shapes()
        if shapes[-1] != (self.class_count,):
            raise ShapeError(f"model emits {shapes[-1]}, expected ({self.class_count},)")
        if self.penultimate_index is None:
            return
        target = self.layers[self.penultimate_index]
        if not isinstance(target, Dense):
            raise ShapeError("target layer must be Dense")
        following = [l for l in self.layers[self.penultimate_index + 1:] if isinstance(l, Dense)]
        if len(following) != 1 or not isinstance(self.layers[-1], Dense):
            raise ShapeError("exactly one Dense layer must follow the target layer")

    def layer_shapes(self) -> list[tuple]:
        """Input shape followed by the output shape of every layer."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    @property
    def final_layer(self) -> Dense:
        return self.layers[-1]

    @property
    def final_index(self) -> int:
        return len(self.layers) - 1

    @property
    def target_layer(self) -> Dense:
        return self.layers[self.penultimate_index]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def copy(self) -> "Model":
        return copy.deepcopy(self)


# -- construction -----------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def tiny_vgg(seed: int = 0, input_shape=(32, 32, 3), classes: int = 8) -> Model:
    """Conv(3->8) ReLU Pool Conv(8->16) ReLU Pool Flatten Dense(->64) ReLU Dense(->classes)."""
    rng = np.random.default_rng(seed)
    h, w, c = input_shape
    flat = (h // 4) * (w // 4) * 16
    layers = [
        Conv2D(_he(rng, (3, 3, c, 8), 9 * c), np.zeros(8)),
        ReLU(),
        MaxPool2D(2),
        Conv2D(_he(rng, (3, 3, 8, 16), 72), np.zeros(16)),
        ReLU(),
        MaxPool2D(2),
        Flatten(),
        Dense(_he(rng, (flat, 64), flat), np.zeros(64)),
        ReLU(),
        Dense(_he(rng, (64, classes), 64) * 0.5, np.zeros(classes)),
    ]
    return Model(layers, input_shape, classes, penultimate_index=7)


def dense_model(weights, bias) -> Model:
    """Single Dense layer on a flat input; has no target layer."""
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    return Model([Dense(weights, bias)], (weights.shape[0],), weights.shape[1], penultimate_index=None)


# -- kernels ----------------------------------------------------------------

def im2col(x, kh, kw, stride, pad, pad_value=0):
    n, h, w, c = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    return cols, ho, wo


def _conv_forward(layer: Conv2D, x):
    kh, kw, cin, cout = layer.kernel.shape
    cols, ho, wo = im2col(x, kh, kw, layer.stride, layer.padding)
    out = cols @ layer.kernel.reshape(-1, cout) + layer.bias
    return out.reshape(x.shape[0], ho, wo, cout)


def _conv_backward(layer: Conv2D, x, grad):
    kh, kw, cin, cout = layer.kernel.shape
    n, h, w, _ = x.shape
    s, p = layer.stride, layer.padding
    cols, ho, wo = im2col(x, kh, kw, s, p)
    g = grad.reshape(-1, cout)
    dk = (cols.T @ g).reshape(layer.kernel.shape)
    db = g.sum(axis=0)
    dcols = (g @ layer.kernel.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
    return (dk, db), dx


def _pool_windows(x, k):
    n, h, w, c = x.shape
    win = x.reshape(n, h // k, k, w // k, k, c).transpose(0, 1, 3, 5, 2, 4)
    return win.reshape(n, h // k, w // k, c, k * k)


def _pool_backward(layer: MaxPool2D, x, grad):
    k = layer.window
    n, h, w, c = x.shape
    win = _pool_windows(x, k)
    # gradient routed to the first maximal element of each window
    arg = win.argmax(axis=-1)
    mask = np.zeros_like(win)
    np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
    dwin = mask * grad[..., None]
    dx = dwin.reshape(n, h // k, w // k, c, k, k).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(n, h, w, c)


def layer_forward(layer, x):
    if layer.kind == "conv":
        return _conv_forward(layer, x)
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "maxpool":
        return _pool_windows(x, layer.window).max(axis=-1)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if layer.kind == "dense":
        return x @ layer.weights + layer.bias
    raise UsageError(f"unknown layer kind {layer.kind!r}")


def layer_backward(layer, x, grad):
    """Return (param_grads or None, input_grad) for one layer."""
    if layer.kind == "conv":
        return _conv_backward(layer, x, grad)
    if layer.kind == "relu":
        # derivative at exactly 0 is 0
        return None, grad * (x > 0.0)
    if layer.kind == "maxpool":
        return None, _pool_backward(layer, x, grad)
    if layer.kind == "flatten":
        return None, grad.reshape(x.shape)
    if layer.kind == "dense":
        return (x.T @ grad, grad.sum(axis=0)), grad @ layer.weights.T
    raise UsageError(f"unknown layer kind {layer.kind!r}")


# -- forward / backward -----------------------------------------------------

def _as_batch(model: Model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    if x.ndim == len(model.input_shape) + 1 and x.shape[1:] == model.input_shape:
        return x, False
    raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")


def forward(model: Model, x, stop: Optional[int] = None):
    """Run the model; returns ``(output, activations)``.

    ``activations[0]`` is the (batched) input and ``activations[i + 1]`` the
    output of layer ``i``. With ``stop`` the pass ends after that layer and
    ``output`` is its activation instead of the logits.
    """
    batch, single = _as_batch(model, x)
    last = model.final_index if stop is None else stop
    acts = [batch]
    for layer in model.layers[:last + 1]:
        acts.append(layer_forward(layer, acts[-1]))
    out = acts[-1]
    return (out[0] if single else out), acts


def backward(model: Model, activations, grad_out, stop: Optional[int] = None):
    """Backpropagate ``grad_out`` (gradient at the output of layer ``stop``).

    Returns ``(param_grads, input_grad)`` where ``param_grads[i]`` is
    ``(d_weights, d_bias)`` for parameterised layers and ``None`` otherwise.
    """
    last = model.final_index if stop is None else stop
    if activations is None or len(activations) != last + 2:
        raise UsageError("backward needs the activation cache from a matching forward call")
    grad = np.asarray(grad_out, dtype=np.float64)
    single = grad.ndim == activations[-1].ndim - 1
    if single:
        grad = grad[None]
    if grad.shape != activations[-1].shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match output {activations[-1].shape}")
    param_grads = [None] * len(model.layers)
    for i in range(last, -1, -1):
        param_grads[i], grad = layer_backward(model.layers[i], activations[i], grad)
    return param_grads, (grad[0] if single else grad)


def predict(model: Model, inputs, chunk: int = 256) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    out = [forward(model, inputs[i:i + chunk])[0].argmax(axis=1) for i in range(0, len(inputs), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def features(model: Model, inputs, layer_index: int, chunk: int = 256) -> np.ndarray:
    """Activations at the output of ``layer_index`` for a batch of inputs."""
    inputs = np.asarray(inputs, dtype=np.float64)
    return np.concatenate([forward(model, inputs[i:i + chunk], stop=layer_index)[0]
                           for i in range(0, len(inputs), chunk)])


# -- loss / training --------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Per-sample losses and the gradient at the logits (softmax - one_hot)."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(len(labels))
    losses = logsum - z[idx, labels]
    grad = softmax(logits)
    grad[idx, labels] -= 1.0
    return losses, grad


@dataclass
class TrainingConfig:
    learning_rate: float = 0.002
    batch_size: int = 32
    epochs: int = 15
    seed: int = 0
    optimizer: str = "sgd"

    def validate(self, n: int):
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ValueError("learning rate must lie in [0, 1]")
        if self.batch_size < 1 or self.batch_size > n:
            raise ValueError("batch size must be in [1, dataset size]")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.optimizer != "sgd":
            raise ValueError("only plain SGD is supported")


def train(model: Model, data, cfg: TrainingConfig, history: Optional[list] = None) -> Model:
    """Plain SGD on summed softmax cross-entropy; returns a trained copy.

    Each epoch draws a fresh permutation from the xorshift stream seeded by
    ``epoch_seed(cfg.seed, epoch)``. A learning rate of exactly 0 is accepted
    and leaves the parameters untouched.
    """
    n = len(data.labels)
    cfg.validate(n)
    model = model.copy()
    inputs, labels = data.inputs, np.asarray(data.labels)
    for epoch in range(cfg.epochs):
        order = np.asarray(XorShift64Star(epoch_seed(cfg.seed, epoch)).permutation(n))
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, acts = forward(model, inputs[idx])
            losses, grad = softmax_cross_entropy(logits, labels[idx])
            total += float(losses.sum())
            if not np.isfinite(total):
                raise TrainingError(epoch)
            if cfg.learning_rate == 0.0:
                continue
            grads, _ = backward(model, acts, grad)
            for layer, g in zip(model.layers, grads):
                if g is None:
                    continue
                for param, gp in zip(layer.params(), g):
                    param -= cfg.learning_rate * gp
        if history is not None:
            history.append(total / n)
    for p in model.parameters():
        if not np.all(np.isfinite(p)):
            raise TrainingError(cfg.epochs - 1, "non-finite parameters")
    return model


def evaluate_accuracy(model: Model, data) -> float:
    if len(data.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, data.inputs) == np.asarray(data.labels)))


# -- MDL1 serialisation -----------------------------------------------------

MODEL_MAGIC = b"MDL1"


def _layer_header(layer):
    h = {"kind": layer.kind}
    if layer.kind == "conv":
        h.update(shape=list(layer.kernel.shape), stride=layer.stride, padding=layer.padding)
    elif layer.kind == "dense":
        h.update(shape=list(layer.weights.shape))
    elif layer.kind == "maxpool":
        h.update(window=layer.window)
    return h


def model_to_bytes(model: Model) -> bytes:
    header = json.dumps({
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "penultimate_index": model.penultimate_index,
        "layers": [_layer_header(l) for l in model.layers],
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for p in model.parameters():
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(blob: bytes) -> Model:
    if blob[:4] != MODEL_MAGIC:
        raise ValueError("not an MDL1 model file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen])
    offset = 8 + hlen

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        return arr.reshape(shape)

    layers = []
    for h in header["layers"]:
        kind = h["kind"]
        if kind == "conv":
            k = take(h["shape"])
            layers.append(Conv2D(k, take((h["shape"][3],)), h["stride"], h["padding"]))
        elif kind == "dense":
            w = take(h["shape"])
            layers.append(Dense(w, take((h["shape"][1],))))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool":
            layers.append(MaxPool2D(h["window"]))
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Model(layers, tuple(header["input_shape"]), header["class_count"], header["penultimate_index"])


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())

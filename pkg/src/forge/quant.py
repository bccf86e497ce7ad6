"""Affine post-training quantization, integer reference inference and the QMF1 container.

Codes are ``clamp(floor(a / s + p0), -2**(b-1), 2**(b-1) - 1)`` and values are
reconstructed as ``(q - p0) * s``. Two zero-point rules are offered:

* ``"product"``: ``p0 = -floor(alpha * s) - 2**(b-1)``
* ``"conventional"``: ``p0 = -floor(alpha / s) - 2**(b-1)``

Biases use a third mode, ``"bias"``: 32-bit, zero point 0 and an explicit
scale ``s_w * s_x``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import Model, forward

MODES = ("product", "conventional", "bias")
_MODE_CODE = {m: i for i, m in enumerate(MODES)}
DEGENERATE_EPS = 1e-6
WEIGHT_BITS = (4, 8)
ACT_BITS = 8
BIAS_BITS = 32
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


class QuantError(RuntimeError):
    pass


class AccumulatorOverflow(QuantError):
    pass


@dataclass(frozen=True)
class QuantParams:
    bits: int
    low: float
    high: float
    mode: str = "product"
    explicit_scale: Optional[float] = None  # only for mode "bias"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown quantization mode {self.mode!r}")
        if self.mode == "bias":
            if not self.explicit_scale or self.explicit_scale <= 0:
                raise ValueError("bias parameters need a positive explicit scale")
            if not 2 <= self.bits <= 32:
                raise ValueError("bit width out of range")
            return
        if not 2 <= self.bits <= 16:
            raise ValueError("bit width must lie in 2..16")
        if not self.low < self.high:
            raise ValueError("range needs low < high")

    @property
    def scale(self) -> float:
        if self.mode == "bias":
            return float(self.explicit_scale)
        return (self.high - self.low) / (2 ** self.bits - 1)

    @property
    def zero_point(self) -> int:
        if self.mode == "bias":
            return 0
        half = 2 ** (self.bits - 1)
        if self.mode == "product":
            return -math.floor(self.low * self.scale) - half
        return -math.floor(self.low / self.scale) - half

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1


def params_for_range(low: float, high: float, bits: int, mode: str, name: str = "tensor") -> QuantParams:
    """QuantParams for an observed range; a degenerate range is widened with a warning."""
    low, high = float(low), float(high)
    if not low < high:
        warnings.warn(f"{name}: degenerate range [{low}, {high}] widened by {DEGENERATE_EPS}")
        low, high = low - DEGENERATE_EPS, high + DEGENERATE_EPS
    return QuantParams(bits, low, high, mode)


def bias_params(scale: float) -> QuantParams:
    return QuantParams(BIAS_BITS, 0.0, 0.0, "bias", float(scale))


def quantize(a, qp: QuantParams) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    q = np.floor(a / qp.scale + qp.zero_point)
    return np.clip(q, qp.qmin, qp.qmax).astype(np.int64)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    if q.size and (q.min() < qp.qmin or q.max() > qp.qmax):
        raise ValueError(f"code outside [{qp.qmin}, {qp.qmax}]")
    return (q - qp.zero_point) * qp.scale


def quantize_value(a: float, qp: QuantParams) -> int:
    return int(quantize(a, qp))


def dequantize_value(code: int, qp: QuantParams) -> float:
    return float(dequantize(code, qp))


# -- quantized model --------------------------------------------------------

@dataclass
class QuantLayer:
    kind: str
    out_qp: QuantParams
    geometry: dict = field(default_factory=dict)  # stride/padding/window/shape
    weight: Optional[np.ndarray] = None  # int64 codes, same shape as the float tensor
    weight_qp: Optional[QuantParams] = None
    bias: Optional[np.ndarray] = None
    bias_qp: Optional[QuantParams] = None

    @property
    def multiplier(self) -> float:
        """Requantization multiplier M = s_w * s_x / s_out (bias scale is s_w * s_x)."""
        return self.bias_qp.scale / self.out_qp.scale


@dataclass
class QuantizedModel:
    layers: list
    input_shape: tuple
    class_count: int
    input_qp: QuantParams
    penultimate_index: Optional[int] = None

    def in_qp(self, i: int) -> QuantParams:
        return self.input_qp if i == 0 else self.layers[i - 1].out_qp

    @property
    def weight_bits(self) -> int:
        return next(l.weight_qp.bits for l in self.layers if l.weight is not None)

    def layer_shapes(self) -> list:
        shapes = [tuple(self.input_shape)]
        for l in self.layers:
            h = shapes[-1]
            if l.kind == "conv":
                kh, kw, _, cout = l.weight.shape
                s, p = l.geometry["stride"], l.geometry["padding"]
                shapes.append(((h[0] + 2 * p - kh) // s + 1, (h[1] + 2 * p - kw) // s + 1, cout))
            elif l.kind == "dense":
                shapes.append((l.weight.shape[1],))
            elif l.kind == "maxpool":
                k = l.geometry["window"]
                shapes.append((h[0] // k, h[1] // k, h[2]))
            elif l.kind == "flatten":
                shapes.append((int(np.prod(h)),))
            else:
                shapes.append(h)
        return shapes


def _calibrate(model: Model, inputs, chunk=128):
    """Per-layer (min, max) of every layer output over the calibration inputs."""
    lows = [np.inf] * len(model.layers)
    highs = [-np.inf] * len(model.layers)
    for start in range(0, len(inputs), chunk):
        _, acts = forward(model, inputs[start:start + chunk])
        for i, a in enumerate(acts[1:]):
            lows[i] = min(lows[i], float(a.min()))
            highs[i] = max(highs[i], float(a.max()))
    return lows, highs


def quantize_model(model: Model, calibration, bits: int = 8, mode: str = "product",
                   activations: Optional[QuantizedModel] = None) -> QuantizedModel:
    """Quantize weights per tensor (min/max) and activations from calibration min/max.

    Conv and dense outputs are calibrated before the activation function; ReLU,
    max-pool and flatten reuse their input's parameters. Passing ``activations``
    reuses that model's input and activation parameters instead of calibrating,
    which is how a modified copy is compiled against an existing deployment.
    """
    if mode not in ("product", "conventional"):
        raise ValueError("mode must be 'product' or 'conventional'")
    if bits not in WEIGHT_BITS:
        raise ValueError(f"weight bit width must be one of {WEIGHT_BITS}")
    inputs = getattr(calibration, "inputs", calibration)
    if activations is None:
        if len(inputs) == 0:
            raise ValueError("calibration set is empty")
        inputs = np.asarray(inputs, dtype=np.float64)
        input_qp = params_for_range(inputs.min(), inputs.max(), ACT_BITS, mode, "input")
        lows, highs = _calibrate(model, inputs)
    else:
        if len(activations.layers) != len(model.layers):
            raise ValueError("activation source has a different architecture")
        input_qp = activations.input_qp
    layers = []
    prev = input_qp
    for i, layer in enumerate(model.layers):
        if activations is not None:
            out_qp = activations.layers[i].out_qp
        elif layer.kind in ("conv", "dense"):
            out_qp = params_for_range(lows[i], highs[i], ACT_BITS, mode, f"layer{i}.out")
        else:
            out_qp = prev
        ql = QuantLayer(layer.kind, out_qp)
        if layer.kind in ("conv", "dense"):
            w = layer.kernel if layer.kind == "conv" else layer.weights
            ql.weight_qp = params_for_range(w.min(), w.max(), bits, mode, f"layer{i}.weight")
            ql.weight = quantize(w, ql.weight_qp)
            ql.bias_qp = bias_params(ql.weight_qp.scale * prev.scale)
            ql.bias = quantize(layer.bias, ql.bias_qp)
            if layer.kind == "conv":
                ql.geometry = {"stride": layer.stride, "padding": layer.padding}
        elif layer.kind == "maxpool":
            ql.geometry = {"window": layer.window}
        layers.append(ql)
        prev = out_qp
    return QuantizedModel(layers, tuple(model.input_shape), model.class_count, input_qp,
                          model.penultimate_index)


def quantize_input(qm: QuantizedModel, x) -> np.ndarray:
    return quantize(x, qm.input_qp)


# -- integer reference path -------------------------------------------------

def _check_acc(acc, where):
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise AccumulatorOverflow(f"{where}: accumulator exceeds 32-bit signed range")


def requantize(acc, multiplier: float, qp: QuantParams) -> np.ndarray:
    q = np.floor(acc.astype(np.float64) * multiplier + qp.zero_point)
    return np.clip(q, qp.qmin, qp.qmax).astype(np.int64)


def _int_conv(ql: QuantLayer, x, p0x):
    # x: (N, H, W, C) codes
    kh, kw, cin, cout = ql.weight.shape
    s, p = ql.geometry["stride"], ql.geometry["padding"]
    xs = x - p0x
    if p:
        # padding carries the zero point, i.e. zero after the offset
        xs = np.pad(xs, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xs, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    w = (ql.weight - ql.weight_qp.zero_point).reshape(-1, cout)
    acc = cols @ w + ql.bias
    return acc.reshape(n, ho, wo, cout)


def layer_int_forward(qm: QuantizedModel, i: int, x) -> np.ndarray:
    """One layer of integer inference on a batch of codes."""
    ql = qm.layers[i]
    p0x = qm.in_qp(i).zero_point
    if ql.kind == "conv":
        acc = _int_conv(ql, x, p0x)
    elif ql.kind == "dense":
        acc = (x - p0x) @ (ql.weight - ql.weight_qp.zero_point) + ql.bias
    elif ql.kind == "relu":
        return np.maximum(x, ql.out_qp.zero_point)
    elif ql.kind == "maxpool":
        k = ql.geometry["window"]
        n, h, w, c = x.shape
        return x.reshape(n, h // k, k, w // k, k, c).max(axis=(2, 4))
    elif ql.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    else:
        raise QuantError(f"unknown layer kind {ql.kind!r}")
    _check_acc(acc, f"layer{i}")
    return requantize(acc, ql.multiplier, ql.out_qp)


def reference_int_inference(qm: QuantizedModel, x_codes, start: int = 0):
    """Integer inference from input codes. Returns ``(predicted, per_layer_outputs)``.

    Accepts a single sample or a batch; outputs are batched when the input is.
    ``start`` lets a caller resume from cached codes at the input of layer ``start``.
    """
    x = np.asarray(x_codes, dtype=np.int64)
    expected = qm.layer_shapes()[start]
    single = x.shape == tuple(expected)
    if single:
        x = x[None]
    elif x.shape[1:] != tuple(expected):
        raise ValueError(f"input codes {x.shape} do not match {expected}")
    outs = []
    for i in range(start, len(qm.layers)):
        x = layer_int_forward(qm, i, x)
        outs.append(x)
    pred = outs[-1].argmax(axis=1)
    if single:
        return int(pred[0]), [o[0] for o in outs]
    return pred, outs


def int_predict(qm: QuantizedModel, inputs, chunk: int = 256) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    preds = [reference_int_inference(qm, quantize_input(qm, inputs[i:i + chunk]))[0]
             for i in range(0, len(inputs), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def int_accuracy(qm: QuantizedModel, data) -> float:
    if len(data.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(int_predict(qm, data.inputs) == np.asarray(data.labels)))


# -- serialized parameter bytes ---------------------------------------------

def weight_bytes(codes: np.ndarray) -> bytes:
    # 4- and 8-bit codes both occupy one signed byte each
    return np.ascontiguousarray(codes, dtype=np.int8).tobytes()


def bias_bytes(codes: np.ndarray) -> bytes:
    return np.ascontiguousarray(codes, dtype="<i4").tobytes()


def parameter_blobs(qm: QuantizedModel) -> list:
    """``[(tensor_id, bytes)]`` in layer order: weights then bias of each layer."""
    out = []
    for i, l in enumerate(qm.layers):
        if l.weight is not None:
            out.append((f"layer{i}.weight", weight_bytes(l.weight)))
            out.append((f"layer{i}.bias", bias_bytes(l.bias)))
    return out


def architecture(qm: QuantizedModel) -> list:
    arch = []
    for l in qm.layers:
        entry = {"kind": l.kind, **l.geometry}
        if l.weight is not None:
            entry["shape"] = list(l.weight.shape)
            entry["bits"] = l.weight_qp.bits
        arch.append(entry)
    return arch


def diff_quantized_bytes(a: QuantizedModel, b: QuantizedModel) -> int:
    """Number of differing bytes over all serialized parameter codes."""
    if architecture(a) != architecture(b) or tuple(a.input_shape) != tuple(b.input_shape):
        raise ValueError("quantized models differ in architecture or bit width")
    total = 0
    for (_, x), (_, y) in zip(parameter_blobs(a), parameter_blobs(b)):
        total += int(np.count_nonzero(np.frombuffer(x, np.uint8) != np.frombuffer(y, np.uint8)))
    return total


# -- QMF1 -------------------------------------------------------------------

QMF_MAGIC = b"QMF1"
_QP = struct.Struct("<ddBiBd")


def _pack_qp(qp: QuantParams) -> bytes:
    return _QP.pack(qp.low, qp.high, qp.bits, qp.zero_point, _MODE_CODE[qp.mode], qp.scale)


def _unpack_qp(blob, offset) -> QuantParams:
    low, high, bits, _, mode, scale = _QP.unpack_from(blob, offset)
    mode = MODES[mode]
    return QuantParams(bits, low, high, mode, scale if mode == "bias" else None)


def qmf_to_bytes(qm: QuantizedModel) -> bytes:
    header = json.dumps({
        "input_shape": list(qm.input_shape),
        "class_count": qm.class_count,
        "penultimate_index": qm.penultimate_index,
        "layers": architecture(qm),
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(QMF_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(_pack_qp(qm.input_qp))
    for l in qm.layers:
        buf.write(_pack_qp(l.out_qp))
        if l.weight is not None:
            buf.write(_pack_qp(l.weight_qp))
            buf.write(_pack_qp(l.bias_qp))
    for _, blob in parameter_blobs(qm):
        buf.write(blob)
    return buf.getvalue()


def qmf_from_bytes(blob: bytes) -> QuantizedModel:
    if blob[:4] != QMF_MAGIC:
        raise ValueError("not a QMF1 file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen])
    off = 8 + hlen

    def qp():
        nonlocal off
        out = _unpack_qp(blob, off)
        off += _QP.size
        return out

    input_qp = qp()
    layers = []
    for entry in header["layers"]:
        geometry = {k: entry[k] for k in ("stride", "padding", "window") if k in entry}
        ql = QuantLayer(entry["kind"], qp(), geometry)
        if "shape" in entry:
            ql.weight_qp, ql.bias_qp = qp(), qp()
        layers.append(ql)
    for ql, entry in zip(layers, header["layers"]):
        if "shape" not in entry:
            continue
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        ql.weight = np.frombuffer(blob, np.int8, n, off).astype(np.int64).reshape(shape)
        off += n
        nb = shape[-1]
        ql.bias = np.frombuffer(blob, "<i4", nb, off).astype(np.int64)
        off += 4 * nb
    return QuantizedModel(layers, tuple(header["input_shape"]), header["class_count"], input_qp,
                          header["penultimate_index"])


def qmf_hash(qm: QuantizedModel) -> str:
    return hashlib.sha256(qmf_to_bytes(qm)).hexdigest()


def save_qmf(qm: QuantizedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(qmf_to_bytes(qm))


def load_qmf(path) -> QuantizedModel:
    with open(path, "rb") as fh:
        return qmf_from_bytes(fh.read())

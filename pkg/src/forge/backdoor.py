"""Minimal-backdoor lab: triggers, neuron selection, regularized fine-tuning,
pruning by change magnitude, and the accuracy/sparsity/quantization metrics.

Only the final Dense layer is trainable while implanting. Parameter changes
are indexed as flat offsets into ``concat(W.ravel(), b)`` of that layer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .nn import Model, backward, features, forward, softmax_cross_entropy


class TriggerError(RuntimeError):
    pass


class BackdoorError(RuntimeError):
    pass


REGULARIZERS = (None, 0, 1, 2)

# hard-concrete defaults (Louizos et al.)
GATE_BETA = 2.0 / 3.0
GATE_GAMMA = -0.1
GATE_ZETA = 1.1


# -- triggers ---------------------------------------------------------------

@dataclass
class Trigger:
    patch: np.ndarray  # (h, w, C) in [0, 1]
    position: tuple  # (row, col) of the top-left corner

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float64)
        self.position = tuple(int(v) for v in self.position)

    def check(self, input_shape):
        h, w, c = self.patch.shape
        r, col = self.position
        if r < 0 or col < 0 or r + h > input_shape[0] or col + w > input_shape[1] or c != input_shape[2]:
            raise ValueError(f"trigger {self.patch.shape} at {self.position} does not fit {input_shape}")

    @property
    def region(self):
        h, w, _ = self.patch.shape
        r, c = self.position
        return slice(r, r + h), slice(c, c + w)


def apply_trigger(inputs, trigger: Trigger) -> np.ndarray:
    """Overwrite the trigger region (stickers replace pixels, they do not add)."""
    out = np.array(inputs, dtype=np.float64, copy=True)
    rows, cols = trigger.region
    out[..., rows, cols, :] = np.clip(trigger.patch, 0.0, 1.0)
    return out


def triggered_set(data: Dataset, trigger: Trigger, target: int, split="triggered") -> Dataset:
    """Triggered copies of ``data`` relabelled to ``target``; accuracy on it is the success rate."""
    return Dataset(apply_trigger(data.inputs, trigger), np.full(len(data), target), split)


def _blank_with(model: Model, trigger: Trigger) -> np.ndarray:
    trigger.check(model.input_shape)
    return apply_trigger(np.zeros(model.input_shape), trigger)


def _require_target(model: Model):
    if model.penultimate_index is None:
        raise ValueError("model has no target layer")
    return model.penultimate_index


def select_neuron_connectivity(model: Model) -> int:
    """Target neuron with the largest sum of absolute incoming weights."""
    idx = _require_target(model)
    return int(np.argmax(np.abs(model.layers[idx].weights).sum(axis=0)))


def neuron_sensitivity(model: Model, trigger: Trigger) -> np.ndarray:
    """a_j = sum over trigger pixels of |d n_j / d t_i| on a blank image carrying the trigger.

    n_j is the pre-activation of target-layer neuron j.
    """
    idx = _require_target(model)
    x = _blank_with(model, trigger)
    units = model.layers[idx].weights.shape[1]
    _, acts = forward(model, np.repeat(x[None], units, axis=0), stop=idx)
    _, dx = backward(model, acts, np.eye(units), stop=idx)
    rows, cols = trigger.region
    return np.abs(dx[:, rows, cols, :]).reshape(units, -1).sum(axis=1)


def select_neuron_adaptive(model: Model, trigger: Trigger) -> int:
    return int(np.argmax(neuron_sensitivity(model, trigger)))


def _neuron_value(model, neuron, x):
    out, acts = forward(model, x, stop=model.penultimate_index)
    return float(out[neuron]), acts


def neuron_activation(model: Model, neuron: int, x) -> float:
    return _neuron_value(model, neuron, x)[0]


def synthesize_trigger(model: Model, neuron: int, geometry, steps: int = 200, step_size: float = 0.5,
                       seed: int = 0, history: Optional[list] = None) -> Trigger:
    """Gradient ascent on the patch pixels maximizing one target-layer pre-activation.

    ``geometry`` is ``(h, w, (row, col))``. A step that lowers the activation is
    rejected and the step size halved, so the recorded activations never decrease.
    """
    idx = _require_target(model)
    h, w, position = geometry
    rng = np.random.default_rng(seed)
    trigger = Trigger(rng.uniform(0.0, 1.0, size=(h, w, model.input_shape[2])), position)
    trigger.check(model.input_shape)
    rows, cols = trigger.region
    units = model.layers[idx].weights.shape[1]
    seed_grad = np.zeros(units)
    seed_grad[neuron] = 1.0

    def evaluate(patch):
        x = _blank_with(model, Trigger(patch, position))
        value, acts = _neuron_value(model, neuron, x)
        if not math.isfinite(value):
            raise TriggerError("non-finite neuron activation")
        _, dx = backward(model, acts, seed_grad, stop=idx)
        return value, dx[rows, cols, :]

    patch = trigger.patch
    value, grad = evaluate(patch)
    if history is not None:
        history.append(value)
    for _ in range(steps):
        scale = np.abs(grad).max()
        if scale == 0.0:
            break
        candidate = np.clip(patch + step_size * grad / scale, 0.0, 1.0)
        new_value, new_grad = evaluate(candidate)
        if new_value >= value:
            patch, value, grad = candidate, new_value, new_grad
        else:
            step_size /= 2.0
        if history is not None:
            history.append(value)
    return Trigger(patch, position)


# -- deltas -----------------------------------------------------------------

@dataclass
class DeltaSet:
    indices: np.ndarray
    old: np.ndarray
    new: np.ndarray
    ordering: str = "unsorted"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.old = np.asarray(self.old, dtype=np.float64)
        self.new = np.asarray(self.new, dtype=np.float64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("delta indices must be unique")
        if np.any(self.old == self.new):
            raise ValueError("delta entries must change their parameter")

    def __len__(self):
        return len(self.indices)

    @property
    def change(self) -> np.ndarray:
        return self.new - self.old

    def sorted_by_magnitude(self) -> "DeltaSet":
        # stable sort keeps lower indices first on equal magnitude
        order = np.argsort(-np.abs(self.change), kind="stable")
        return DeltaSet(self.indices[order], self.old[order], self.new[order], "byMagnitudeDesc")

    def head(self, k: int) -> "DeltaSet":
        return DeltaSet(self.indices[:k], self.old[:k], self.new[:k], self.ordering)


def final_params(model: Model) -> np.ndarray:
    layer = model.final_layer
    return np.concatenate([layer.weights.ravel(), layer.bias])


def with_final_params(model: Model, flat) -> Model:
    out = model.copy()
    layer = out.final_layer
    nw = layer.weights.size
    layer.weights = np.asarray(flat[:nw], dtype=np.float64).reshape(layer.weights.shape).copy()
    layer.bias = np.asarray(flat[nw:], dtype=np.float64).copy()
    return out


def delta_between(original: Model, backdoored: Model) -> DeltaSet:
    a, b = final_params(original), final_params(backdoored)
    idx = np.flatnonzero(a != b)
    return DeltaSet(idx, a[idx], b[idx])


def apply_delta(original: Model, delta: DeltaSet) -> Model:
    flat = final_params(original)
    flat[delta.indices] = delta.new
    return with_final_params(original, flat)


# -- implanting -------------------------------------------------------------

@dataclass
class BackdoorSpec:
    source: int
    target: int
    p: Optional[int]  # None (unregularized), 0, 1 or 2
    lam: float
    finetune: Dataset
    epochs: int = 300
    learning_rate: float = 1e-3
    seed: int = 0
    gate_learning_rate: Optional[float] = None
    gate_init: float = 0.0

    def validate(self, model: Model):
        if self.p not in REGULARIZERS:
            raise ValueError(f"regularization p must be one of none/0/1/2, got {self.p!r}")
        if self.source == self.target:
            raise ValueError("source and target class must differ")
        for cls in (self.source, self.target):
            if not 0 <= cls < model.class_count:
                raise ValueError(f"class {cls} out of range")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if len(self.finetune) == 0 or np.any(self.finetune.labels != self.source):
            raise ValueError("fine-tune set must be non-empty and contain only the source class")


@dataclass
class GateState:
    log_alpha: np.ndarray
    gamma: float = GATE_GAMMA
    zeta: float = GATE_ZETA
    beta: float = GATE_BETA
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)
    z: np.ndarray = field(default=None, repr=False)
    dz: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.gamma < 0 < 1 < self.zeta) or self.beta <= 0:
            raise ValueError("gate constants must satisfy gamma < 0 < 1 < zeta and beta > 0")
        self.log_alpha = np.asarray(self.log_alpha, dtype=np.float64)
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        if self.z is None:
            self.z, self.dz = hard_concrete_sample(self, self.rng.uniform(size=self.log_alpha.shape))

    def mask(self) -> np.ndarray:
        return self.log_alpha > 0


def hard_concrete_sample(gates: GateState, u):
    """Stretched, clamped concrete sample z and dz/dlog_alpha for uniform draws ``u``."""
    u = np.clip(u, 1e-12, 1 - 1e-12)
    s = 1.0 / (1.0 + np.exp(-(np.log(u) - np.log1p(-u) + gates.log_alpha) / gates.beta))
    stretched = s * (gates.zeta - gates.gamma) + gates.gamma
    z = np.clip(stretched, 0.0, 1.0)
    inside = (stretched > 0.0) & (stretched < 1.0)
    dz = np.where(inside, (gates.zeta - gates.gamma) * s * (1.0 - s) / gates.beta, 0.0)
    return z, dz


def _gate_logits(gates: GateState):
    return gates.log_alpha - gates.beta * math.log(-gates.gamma / gates.zeta)


def expected_l0(gates: GateState) -> np.ndarray:
    """Per-gate probability of being non-zero."""
    return 1.0 / (1.0 + np.exp(-_gate_logits(gates)))


def l0_gate_step(gates: GateState, grad_z, lam: float, lr: float):
    """Update log_alpha with the data gradient at the current sample plus the
    expected-L0 penalty, then draw the next sample. Returns ``(gates, z)``."""
    p = expected_l0(gates)
    grad = grad_z * gates.dz + lam * p * (1.0 - p)
    gates.log_alpha = gates.log_alpha - lr * grad
    gates.z, gates.dz = hard_concrete_sample(gates, gates.rng.uniform(size=gates.log_alpha.shape))
    return gates, gates.z


def _final_grads(hidden, labels, flat, shape):
    nw = shape[0] * shape[1]
    w = flat[:nw].reshape(shape)
    logits = hidden @ w + flat[nw:]
    losses, g = softmax_cross_entropy(logits, labels)
    grad = np.concatenate([(hidden.T @ g).ravel(), g.sum(axis=0)])
    return float(losses.sum()), grad


def implant_backdoor(model: Model, trigger: Trigger, spec: BackdoorSpec, history: Optional[list] = None):
    """Fine-tune the final layer on clean (source) and triggered (target) copies of F.

    Objective: sum_F CE(f(x), y_s) + CE(f(x+T), y_t) + lam * R(delta) with
    R = sum|delta| (p=1), sum delta^2 (p=2) or the expected L0 of hard-concrete
    gates (p=0). The p=2 penalty is applied as an implicit step so very large
    lambda stays stable. Returns ``(backdoored_model, delta)``.
    """
    spec.validate(model)
    trigger.check(model.input_shape)
    fin = model.final_index
    x_clean = spec.finetune.inputs
    hidden = np.concatenate([features(model, x_clean, fin - 1),
                             features(model, apply_trigger(x_clean, trigger), fin - 1)])
    labels = np.concatenate([np.full(len(x_clean), spec.source), np.full(len(x_clean), spec.target)])
    shape = model.final_layer.weights.shape
    theta = final_params(model)
    delta = np.zeros_like(theta)
    tau, lam = spec.learning_rate, spec.lam
    gates = None
    if spec.p == 0:
        gates = GateState(np.full(theta.shape, spec.gate_init), seed=spec.seed)
        gate_lr = spec.gate_learning_rate or tau
    for epoch in range(spec.epochs):
        if spec.p == 0:
            z = gates.z
            loss, g = _final_grads(hidden, labels, theta + z * delta, shape)
            grad_z = g * delta
            delta = delta - tau * z * g
            gates, _ = l0_gate_step(gates, grad_z, lam, gate_lr)
            loss += lam * float(expected_l0(gates).sum())
        else:
            loss, g = _final_grads(hidden, labels, theta + delta, shape)
            if spec.p == 1:
                loss += lam * float(np.abs(delta).sum())
                delta = delta - tau * (g + lam * np.sign(delta))
            elif spec.p == 2:
                loss += lam * float(np.square(delta).sum())
                delta = (delta - tau * g) / (1.0 + 2.0 * tau * lam)
            else:
                delta = delta - tau * g
        if not (math.isfinite(loss) and np.all(np.isfinite(delta))):
            raise BackdoorError(f"implant diverged at epoch {epoch}")
        if history is not None:
            history.append(loss)
    if spec.p == 0:
        delta = np.where(gates.mask(), delta, 0.0)
    backdoored = with_final_params(model, theta + delta)
    return backdoored, delta_between(model, backdoored)


# -- pruning & metrics ------------------------------------------------------

@dataclass
class PruneResult:
    delta: DeltaSet  # the first k changes by magnitude
    curve: list  # (k, success_rate, accuracy) for k = 1..m
    reached: bool

    @property
    def sparsity(self) -> int:
        return len(self.delta)


class FinalLayerProbe:
    """Evaluates final-layer variants on cached penultimate features."""

    def __init__(self, model: Model, data: Dataset):
        if len(data) == 0:
            raise ValueError("evaluation set is empty")
        self.hidden = features(model, data.inputs, model.final_index - 1)
        self.labels = data.labels
        self.shape = model.final_layer.weights.shape

    def accuracy(self, flat) -> float:
        nw = self.shape[0] * self.shape[1]
        logits = self.hidden @ flat[:nw].reshape(self.shape) + flat[nw:]
        return float(np.mean(logits.argmax(axis=1) == self.labels))


def prune_backdoor(original: Model, delta: DeltaSet, eval_sets, dsr: float = 0.90) -> PruneResult:
    """Apply the changes largest-first and find the smallest prefix reaching ``dsr``.

    ``eval_sets`` is ``(clean_test, triggered_source_test)``; the triggered set is
    labelled with the target class, so its accuracy is the success rate.
    """
    if len(delta) == 0:
        raise ValueError("delta is empty")
    clean, triggered = eval_sets
    clean_probe = FinalLayerProbe(original, clean)
    trig_probe = FinalLayerProbe(original, triggered)
    ordered = delta.sorted_by_magnitude()
    flat = final_params(original)
    curve = []
    best = None
    for k in range(1, len(ordered) + 1):
        flat[ordered.indices[k - 1]] = ordered.new[k - 1]
        success = trig_probe.accuracy(flat)
        curve.append((k, success, clean_probe.accuracy(flat)))
        if best is None and success >= dsr:
            best = k
    reached = best is not None
    return PruneResult(ordered.head(best if reached else len(ordered)), curve, reached)


@dataclass
class BackdoorMetrics:
    success_rate: float
    clean_accuracy: float
    delta_accuracy: float
    sparsity: int
    quant_changes: int
    dsr: float = 0.90
    reached: bool = True


def compute_metrics(original: Model, backdoored: Model, q_original, q_backdoored, eval_sets,
                    dsr: float = 0.90) -> BackdoorMetrics:
    from .quant import diff_quantized_bytes

    clean, triggered = eval_sets
    base = FinalLayerProbe(original, clean)
    acc_orig = base.accuracy(final_params(original))
    acc_back = base.accuracy(final_params(backdoored))
    success = FinalLayerProbe(original, triggered).accuracy(final_params(backdoored))
    delta = delta_between(original, backdoored)
    if len(delta):
        pruned = prune_backdoor(original, delta, eval_sets, dsr)
        sparsity, reached = pruned.sparsity, pruned.reached
    else:
        sparsity, reached = 0, success >= dsr
    return BackdoorMetrics(success, acc_back, acc_orig - acc_back, sparsity,
                           diff_quantized_bytes(q_original, q_backdoored), dsr, reached)


# -- DLT1 -------------------------------------------------------------------

DELTA_MAGIC = b"DLT1"
_DELTA_REC = np.dtype([("index", "<u4"), ("old", "<f8"), ("new", "<f8")])


def delta_to_bytes(delta: DeltaSet) -> bytes:
    rec = np.zeros(len(delta), dtype=_DELTA_REC)
    rec["index"], rec["old"], rec["new"] = delta.indices, delta.old, delta.new
    return DELTA_MAGIC + struct.pack("<I", len(delta)) + rec.tobytes()


def delta_from_bytes(blob: bytes) -> DeltaSet:
    if blob[:4] != DELTA_MAGIC:
        raise ValueError("not a DLT1 delta file")
    (n,) = struct.unpack_from("<I", blob, 4)
    rec = np.frombuffer(blob, dtype=_DELTA_REC, count=n, offset=8)
    return DeltaSet(rec["index"], rec["old"], rec["new"])

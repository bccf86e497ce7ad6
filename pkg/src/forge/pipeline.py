"""End-to-end experiment: data, training, backdoor grid, quantization, compilation,
trojan provisioning, simulation and reporting.

Every artifact is written under the output directory and referenced in the
report by its relative path and sha256. Reports carry no timestamps, so two
runs of the same configuration produce identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import backdoor as bd
from .compiler import BankGeometry, compile_model, layout_parameters, save_image, save_program
from .data import Dataset, generate_glyph_dataset, save_dataset
from .nn import TrainingConfig, evaluate_accuracy, save_model, tiny_vgg, train
from .quant import (diff_quantized_bytes, int_accuracy, layer_int_forward, quantize_input, quantize_model,
                    reference_int_inference, save_qmf)
from .sim import Simulator, quantize_for_image
from .trojan import estimate_overhead, generate_provisioning, save_tpf


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


@dataclass
class DataConfig:
    train_seed: int = 1
    per_class: int = 500
    test_seed: int = 2
    test_per_class: int = 125
    finetune_seed: int = 11
    finetune_per_class: int = 30
    heldout_seed: int = 12
    heldout_per_class: int = 200
    calibration: int = 512
    calibration_seed: int = 0


@dataclass
class BackdoorConfig:
    source: int = 0
    target: int = 4
    epochs: int = 300
    dsr: float = 0.90
    deploy_changes: int = 30
    synthesis_steps: int = 300
    synthesis_step_size: float = 0.5
    trigger_seed: int = 5
    implant_seed: int = 1
    selection: str = "adaptive"


@dataclass
class TriggerGeometry:
    size: tuple = (8, 8)
    position: tuple = (20, 12)


@dataclass
class GridCell:
    p: Optional[int]
    lam: float
    lr: float
    label: str = ""

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        p = "none" if self.p is None else f"l{self.p}"
        return f"{p}_lam{self.lam:g}_lr{self.lr:g}"


def _default_grid():
    return [GridCell(None, 0.0, 1e-4, "none"), GridCell(1, 5.0, 1e-4, "l1"),
            GridCell(2, 3.0, 1e-4, "l2"), GridCell(0, 0.5, 1e-3, "l0")]


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: str = "tiny_vgg"
    init_seed: int = 0
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(0.003, 32, 15, 3))
    backdoor: BackdoorConfig = field(default_factory=BackdoorConfig)
    triggers: list = field(default_factory=lambda: [TriggerGeometry()])
    grid: list = field(default_factory=_default_grid)
    quant_mode: str = "conventional"
    weight_bits: int = 8
    geometry: BankGeometry = field(default_factory=BankGeometry)
    base_addr: int = 0x1000
    curve_max: int = 100
    simulate: bool = True
    sim_limit: Optional[int] = None  # simulate only the first n test images
    output: str = "forge-out"

    def validate(self):
        b = self.backdoor
        if self.arch != "tiny_vgg":
            raise ConfigError(f"unknown architecture id {self.arch!r}")
        if not 0.0 < b.dsr <= 1.0:
            raise ConfigError("dsr must lie in (0, 1]")
        if b.source == b.target or not (0 <= b.source < 8 and 0 <= b.target < 8):
            raise ConfigError("source and target must be distinct classes in 0..7")
        if b.selection not in ("adaptive", "connectivity"):
            raise ConfigError("neuron selection must be 'adaptive' or 'connectivity'")
        if self.quant_mode not in ("product", "conventional"):
            raise ConfigError("quant_mode must be 'product' or 'conventional'")
        if self.weight_bits not in (4, 8):
            raise ConfigError("weight_bits must be 4 or 8")
        if not self.grid:
            raise ConfigError("the regularization grid is empty")
        names = [c.name for c in self.grid]
        if len(set(names)) != len(names):
            raise ConfigError("grid cell labels must be unique")
        for c in self.grid:
            if c.p not in bd.REGULARIZERS or c.lam < 0 or not 0 < c.lr <= 1:
                raise ConfigError(f"bad grid cell {c}")
        for t in self.triggers:
            h, w = t.size
            r, col = t.position
            if h < 1 or w < 1 or r < 0 or col < 0 or r + h > 32 or col + w > 32:
                raise ConfigError(f"trigger {t.size} at {t.position} does not fit a 32x32 image")
        d = self.data
        if min(d.per_class, d.test_per_class, d.finetune_per_class, d.heldout_per_class, d.calibration) < 1:
            raise ConfigError("dataset sizes must be positive")
        if d.calibration > 8 * d.per_class:
            raise ConfigError("calibration set larger than the training set")
        try:
            self.training.validate(8 * d.per_class)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    kw = {}
    nested = {"data": DataConfig, "training": TrainingConfig, "backdoor": BackdoorConfig,
              "geometry": BankGeometry}
    for key, cls in nested.items():
        if key in raw:
            kw[key] = _build(cls, raw.pop(key), key)
    if "triggers" in raw:
        kw["triggers"] = [_build(TriggerGeometry, t, "triggers") for t in raw.pop("triggers")]
        for t in kw["triggers"]:
            t.size, t.position = tuple(t.size), tuple(t.position)
    if "grid" in raw:
        cells = []
        for c in raw.pop("grid"):
            c = dict(c)
            if c.get("p") == "none":
                c["p"] = None
            cells.append(_build(GridCell, c, "grid"))
        kw["grid"] = cells
    cfg = _build(ExperimentConfig, {**raw, **kw}, "config")
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(raw)


# -- helpers ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


class ArtifactStore:
    def __init__(self, root):
        self.root = root
        self.hashes = {}
        os.makedirs(root, exist_ok=True)

    def path(self, rel):
        p = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def record(self, rel) -> str:
        digest = sha256_file(os.path.join(self.root, rel))
        self.hashes[rel] = digest
        return digest

    def save(self, rel, writer, obj) -> str:
        writer(obj, self.path(rel))
        return self.record(rel)

    def save_text(self, rel, text) -> str:
        with open(self.path(rel), "w", newline="") as fh:
            fh.write(text)
        return self.record(rel)


def save_trigger(trigger: bd.Trigger, path) -> None:
    with open(path, "w") as fh:
        json.dump({"position": list(trigger.position), "patch": trigger.patch.tolist()}, fh)


def load_trigger(path) -> bd.Trigger:
    with open(path) as fh:
        raw = json.load(fh)
    return bd.Trigger(np.array(raw["patch"]), tuple(raw["position"]))


def _save_delta(delta, path):
    with open(path, "wb") as fh:
        fh.write(bd.delta_to_bytes(delta))


class FinalLayerIntProbe:
    """Integer final-layer evaluation on cached codes at the final layer's input."""

    def __init__(self, qm, data: Dataset):
        self.index = len(qm.layers) - 1
        chunks = []
        for start in range(0, len(data), 200):
            _, outs = reference_int_inference(qm, quantize_input(qm, data.inputs[start:start + 200]))
            chunks.append(outs[self.index - 1])
        self.codes = np.concatenate(chunks)
        self.labels = data.labels

    def predict(self, qm):
        return layer_int_forward(qm, self.index, self.codes).argmax(axis=1)

    def accuracy(self, qm) -> float:
        return float(np.mean(self.predict(qm) == self.labels))


def _rate(a, b) -> float:
    return float(np.mean(np.asarray(a) == np.asarray(b)))


def _sim_set(sim: Simulator, image, inputs):
    preds, cycles, outs = [], [], []
    for x in inputs:
        r = sim.run(quantize_for_image(image, x))
        preds.append(r.predicted)
        cycles.append(r.cycles)
        outs.append(r.outputs)
    return np.array(preds), np.array(cycles), outs


def _same_outputs(a, b) -> bool:
    return all(len(x) == len(y) and all(np.array_equal(u, v) for u, v in zip(x, y)) for x, y in zip(a, b))


# -- the pipeline -----------------------------------------------------------

def _cell(cfg, store, ctx, tname, trigger, triggered, cell: GridCell) -> dict:
    b = cfg.backdoor
    model, q_clean, test = ctx["model"], ctx["q_clean"], ctx["test"]
    prefix = f"{tname}/{cell.name}"
    row = {"trigger": tname, "cell": cell.name, "p": "none" if cell.p is None else cell.p,
           "lam": cell.lam, "lr": cell.lr, "trigger_size": list(trigger.patch.shape[:2])}
    spec = bd.BackdoorSpec(b.source, b.target, cell.p, cell.lam, ctx["finetune"], epochs=b.epochs,
                           learning_rate=cell.lr, seed=b.implant_seed)
    backdoored, delta = bd.implant_backdoor(model, trigger, spec)
    row["m"] = len(delta)
    row["hash_backdoored"] = store.save(f"{prefix}/backdoored.mdl", save_model, backdoored)
    row["hash_delta"] = store.save(f"{prefix}/delta.dlt", _save_delta, delta)
    clean_probe, trig_probe = ctx["probe_test"], bd.FinalLayerProbe(model, triggered)
    row["success_full"] = trig_probe.accuracy(bd.final_params(backdoored))
    row["accuracy_full"] = clean_probe.accuracy(bd.final_params(backdoored))
    if len(delta):
        pr = bd.prune_backdoor(model, delta, (test, triggered), b.dsr)
        pruned, ordered, curve, reached = pr.delta, delta.sorted_by_magnitude(), pr.curve, pr.reached
    else:
        pruned, ordered, curve = delta, delta, []
        reached = row["success_full"] >= b.dsr
    row["dsr_reached"] = reached
    row["dS"] = len(pruned)
    row["curve_prune"] = [[k, s, a] for k, s, a in curve]
    pruned_model = bd.apply_delta(model, pruned)
    row["hash_pruned"] = store.save(f"{prefix}/pruned.dlt", _save_delta, pruned)
    row["success_pruned"] = trig_probe.accuracy(bd.final_params(pruned_model))
    row["dA"] = ctx["acc_float"] - clean_probe.accuracy(bd.final_params(pruned_model))
    q_pruned = quantize_model(pruned_model, None, cfg.weight_bits, cfg.quant_mode, activations=q_clean)
    row["dQ"] = diff_quantized_bytes(q_clean, q_pruned)
    row["final_layer_bytes"] = ctx["final_bytes"]

    # deployment: the largest changes up to the configured budget
    deployed = ordered.head(min(b.deploy_changes, len(ordered)))
    row["deployed_changes"] = len(deployed)
    dep_model = bd.apply_delta(model, deployed)
    q_dep = quantize_model(dep_model, None, cfg.weight_bits, cfg.quant_mode, activations=q_clean)
    row["hash_qmf"] = store.save(f"{prefix}/deployed.qmf", save_qmf, q_dep)
    dep_image = layout_parameters(q_dep, cfg.geometry, cfg.base_addr)
    row["hash_ddr"] = store.save(f"{prefix}/deployed.ddr", save_image, dep_image)
    store.record(f"{prefix}/deployed.ddr.json")
    trojan = generate_provisioning(ctx["image"], dep_image, ctx["program"])
    row["hash_tpf"] = store.save(f"{prefix}/trojan.tpf", save_tpf, trojan)
    row["success_deployed"] = trig_probe.accuracy(bd.final_params(dep_model))
    int_trig = FinalLayerIntProbe(q_clean, triggered)
    row["success_quant"] = int_trig.accuracy(q_dep)
    row["accuracy_quant"] = ctx["int_test"].accuracy(q_dep)
    report = estimate_overhead(trojan)
    row["targets"] = len(trojan)
    row["replacement_lines"] = trojan.replacement_lines
    row["overhead"] = report.to_dict()

    # post-quantization success and overhead versus number of deployed changes
    qcurve, ocurve = [], []
    for k in range(1, min(cfg.curve_max, len(ordered)) + 1):
        qk = quantize_model(bd.apply_delta(model, ordered.head(k)), None, cfg.weight_bits, cfg.quant_mode,
                            activations=q_clean)
        qcurve.append([k, int_trig.accuracy(qk), ctx["int_test"].accuracy(qk)])
        tk = generate_provisioning(ctx["image"], layout_parameters(qk, cfg.geometry, cfg.base_addr),
                                   ctx["program"])
        ocurve.append([k, tk.replacement_lines, estimate_overhead(tk).total_percent])
    row["curve_quant"] = qcurve
    row["curve_overhead"] = ocurve

    if cfg.simulate:
        n = cfg.sim_limit or len(test)
        sets = {"test": (test.inputs[:n], test.labels[:n]), "triggered": (triggered.inputs, triggered.labels)}
        trojaned = Simulator(ctx["program"], ctx["image"], trojan)
        direct = Simulator(ctx["program"], dep_image)
        software = {"test": ctx["int_test"].predict(q_dep)[:n], "triggered": int_trig.predict(q_dep)}
        equivalent, cycles_equal, mismatches = True, True, 0
        for key, (xs, ys) in sets.items():
            p_t, c_t, o_t = _sim_set(trojaned, ctx["image"], xs)
            p_d, _, o_d = _sim_set(direct, dep_image, xs)
            base = ctx["clean_sim"][key if key == "test" else f"triggered:{tname}"]
            equivalent &= bool(np.array_equal(p_t, p_d)) and _same_outputs(o_t, o_d)
            cycles_equal &= bool(np.array_equal(c_t, base["cycles"][:len(xs)]))
            mismatches += int(np.count_nonzero(p_t != software[key]))
            row[f"sim_{'success' if key == 'triggered' else 'accuracy'}"] = _rate(p_t, ys)
            if key == "test":
                # clean accuracy of the trojaned device compared sample by sample
                row["sim_clean_changed"] = int(np.count_nonzero(p_t != base["preds"][:len(xs)]))
                row["sim_test_count"] = len(xs)
        row["sim_software_mismatches"] = mismatches
        row["sim_equivalent"] = equivalent
        row["sim_cycles_equal"] = cycles_equal
    return row


def run_pipeline(cfg: ExperimentConfig, out_dir: Optional[str] = None, log=None) -> dict:
    cfg.validate()
    say = log or (lambda msg: None)
    store = ArtifactStore(out_dir or cfg.output)
    d, b = cfg.data, cfg.backdoor
    try:
        train_set = generate_glyph_dataset(d.train_seed, d.per_class, "train")
        test = generate_glyph_dataset(d.test_seed, d.test_per_class, "test")
        finetune = generate_glyph_dataset(d.finetune_seed, d.finetune_per_class).of_class(b.source, "finetune")
        heldout = generate_glyph_dataset(d.heldout_seed, d.heldout_per_class).of_class(b.source, "heldout")
        calib = train_set.subset(np.sort(np.random.default_rng(d.calibration_seed).choice(
            len(train_set), d.calibration, replace=False)), "calibration")
        base = {"hash_train": store.save("data/train.gds", save_dataset, train_set),
                "hash_test": store.save("data/test.gds", save_dataset, test)}
        say("training")
        model = train(tiny_vgg(cfg.init_seed), train_set, cfg.training)
        base["hash_model"] = store.save("model/clean.mdl", save_model, model)
        base["accuracy_float"] = evaluate_accuracy(model, test)
        base["accuracy_untrained"] = evaluate_accuracy(tiny_vgg(cfg.init_seed), test)
        say("quantizing")
        q_clean = quantize_model(model, calib, cfg.weight_bits, cfg.quant_mode)
        base["quant_mode"] = cfg.quant_mode
        base["accuracy_quant"] = int_accuracy(q_clean, test)
        for mode in ("product", "conventional"):
            base[f"accuracy_quant_{mode}"] = (base["accuracy_quant"] if mode == cfg.quant_mode else
                                              int_accuracy(quantize_model(model, calib, cfg.weight_bits, mode), test))
        base["hash_qmf"] = store.save("model/clean.qmf", save_qmf, q_clean)
        image, program = compile_model(q_clean, cfg.geometry, cfg.base_addr)
        base["hash_ddr"] = store.save("model/clean.ddr", save_image, image)
        store.record("model/clean.ddr.json")
        base["hash_prg"] = store.save("model/clean.prg", save_program, program)
        base["instructions"] = len(program)
    except Exception as exc:  # noqa: BLE001 - reported as a stage failure
        raise StageError(f"base stages failed: {type(exc).__name__}: {exc}") from exc

    fl = q_clean.layers[-1]
    ctx = {"model": model, "q_clean": q_clean, "test": test, "finetune": finetune, "image": image,
           "program": program, "acc_float": base["accuracy_float"],
           "probe_test": bd.FinalLayerProbe(model, test), "int_test": FinalLayerIntProbe(q_clean, test),
           "final_bytes": int(fl.weight.size + 4 * fl.bias.size), "clean_sim": {}}
    if cfg.simulate:
        say("simulating the clean device")
        n = cfg.sim_limit or len(test)
        sim = Simulator(program, image)
        p, c, _ = _sim_set(sim, image, test.inputs[:n])
        ctx["clean_sim"]["test"] = {"preds": p, "cycles": c}
        base["sim_accuracy_clean"] = _rate(p, test.labels[:n])

    rows = []
    for t_index, geom in enumerate(cfg.triggers):
        h, w = geom.size
        tname = f"trigger{t_index}_{h}x{w}"
        try:
            probe_trigger = bd.Trigger(np.random.default_rng(b.trigger_seed).uniform(size=(h, w, 3)),
                                       geom.position)
            neuron = (bd.select_neuron_adaptive(model, probe_trigger) if b.selection == "adaptive"
                      else bd.select_neuron_connectivity(model))
            trigger = bd.synthesize_trigger(model, neuron, (h, w, geom.position), b.synthesis_steps,
                                            b.synthesis_step_size, b.trigger_seed)
            store.save(f"{tname}/trigger.json", save_trigger, trigger)
            triggered = bd.triggered_set(heldout, trigger, b.target)
            blank = np.zeros(model.input_shape)
            base[f"{tname}_neuron"] = neuron
            base[f"{tname}_activation_blank"] = bd.neuron_activation(model, neuron, blank)
            base[f"{tname}_activation_trigger"] = bd.neuron_activation(model, neuron,
                                                                      bd.apply_trigger(blank, trigger))
            if cfg.simulate:
                sim = Simulator(program, image)
                p, c, _ = _sim_set(sim, image, triggered.inputs)
                ctx["clean_sim"][f"triggered:{tname}"] = {"preds": p, "cycles": c}
        except Exception as exc:  # noqa: BLE001
            for cell in cfg.grid:
                rows.append({"trigger": tname, "cell": cell.name, "error": f"{type(exc).__name__}: {exc}"})
            continue
        for cell in cfg.grid:
            say(f"{tname} {cell.name}")
            try:
                rows.append(_cell(cfg, store, ctx, tname, trigger, triggered, cell))
            except Exception as exc:  # noqa: BLE001 - failures are data
                rows.append({"trigger": tname, "cell": cell.name, "p": "none" if cell.p is None else cell.p,
                             "lam": cell.lam, "lr": cell.lr, "error": f"{type(exc).__name__}: {exc}"})
    report = {"config": _jsonable(cfg.to_dict()), "base": _jsonable(base), "rows": _jsonable(rows)}
    emit_curves(report, store)
    store.save_text("report.csv", report_csv(report))
    report["artifacts"] = dict(sorted(store.hashes.items()))
    store.save_text("report.json", json.dumps(report, indent=1, sort_keys=True) + "\n")
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _table(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


CSV_COLUMNS = ["trigger", "cell", "p", "lam", "lr", "m", "dA", "dS", "dQ", "dsr_reached", "success_full",
               "success_pruned", "success_deployed", "success_quant", "sim_success", "accuracy_full",
               "accuracy_quant", "sim_accuracy", "deployed_changes", "targets", "replacement_lines",
               "overhead_percent", "sim_equivalent", "sim_cycles_equal", "error"]


def report_csv(report) -> str:
    rows = []
    for r in report["rows"]:
        flat = dict(r)
        if "overhead" in r:
            flat["overhead_percent"] = r["overhead"]["total_percent"]
        rows.append([flat.get(c, "") for c in CSV_COLUMNS])
    return _table(CSV_COLUMNS, rows)


def emit_curves(report, store) -> list:
    """Write one delimited table per curve and return their relative paths."""
    if not report["rows"]:
        raise ValueError("report has no rows")
    written = []
    for r in report["rows"]:
        if "error" in r:
            continue
        stem = f"curves/{r['trigger']}_{r['cell']}"
        tables = {
            "prune": (["k", "success_pct", "accuracy_pct"],
                      [[k, 100 * s, 100 * a] for k, s, a in r["curve_prune"]]),
            "quant": (["k", "success_pct", "accuracy_pct"],
                      [[k, 100 * s, 100 * a] for k, s, a in r["curve_quant"]]),
            "overhead": (["replacements", "lines", "overhead_pct"], r["curve_overhead"]),
        }
        for name, (header, rows) in tables.items():
            rel = f"{stem}_{name}.csv"
            store.save_text(rel, _table(header, rows))
            written.append(rel)
    return written

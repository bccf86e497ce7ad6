"""``forge`` command line: one subcommand per attack stage plus the full pipeline.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import backdoor as bd
from .compiler import compile_model, load_image, load_program, save_image, save_program
from .data import generate_glyph_dataset, load_dataset, save_dataset
from .nn import TrainingConfig, evaluate_accuracy, load_model, save_model, tiny_vgg, train
from .pipeline import (ConfigError, config_from_dict, load_config, load_trigger,
                       report_csv, run_pipeline, save_trigger)
from .quant import load_qmf, quantize_model, save_qmf
from .sim import run_program, quantize_for_image
from .trojan import (estimate_overhead, generate_provisioning, load_tpf, overhead_model_from_json,
                     save_tpf, OverheadModel)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_gen_data(a):
    data = generate_glyph_dataset(a.seed, a.per_class, a.split)
    save_dataset(data, a.out)
    _print({"samples": len(data), "out": a.out})


def cmd_train(a):
    data = load_dataset(a.data)
    cfg = TrainingConfig(a.lr, a.batch_size, a.epochs, a.seed)
    try:
        cfg.validate(len(data))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    history = []
    model = train(tiny_vgg(a.init_seed), data, cfg, history)
    save_model(model, a.out)
    _print({"loss_per_epoch": history, "train_accuracy": evaluate_accuracy(model, data)})


def _p_arg(text):
    return None if text == "none" else int(text)


def cmd_implant(a):
    model = load_model(a.model)
    if a.finetune:
        ft = load_dataset(a.finetune).of_class(a.ys)
    else:
        ft = generate_glyph_dataset(a.finetune_seed, 30).of_class(a.ys)
    h = w = a.trigger_size
    probe = bd.Trigger(np.random.default_rng(a.seed).uniform(size=(h, w, model.input_shape[2])), a.position)
    neuron = bd.select_neuron_adaptive(model, probe)
    trigger = bd.synthesize_trigger(model, neuron, (h, w, tuple(a.position)), a.synthesis_steps, 0.5, a.seed)
    spec = bd.BackdoorSpec(a.ys, a.yt, _p_arg(a.p), a.lam, ft, a.epochs, a.lr, a.seed)
    try:
        spec.validate(model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    backdoored, delta = bd.implant_backdoor(model, trigger, spec)
    save_model(backdoored, a.out_model)
    with open(a.out_delta, "wb") as fh:
        fh.write(bd.delta_to_bytes(delta))
    save_trigger(trigger, a.out_trigger)
    _print({"neuron": neuron, "changes": len(delta)})


def cmd_prune(a):
    model = load_model(a.model)
    with open(a.delta, "rb") as fh:
        delta = bd.delta_from_bytes(fh.read())
    trigger = load_trigger(a.trigger)
    test = load_dataset(a.test, "test")
    if a.heldout:
        held = load_dataset(a.heldout).of_class(a.ys)
    else:
        held = generate_glyph_dataset(12, 200).of_class(a.ys)
    res = bd.prune_backdoor(model, delta, (test, bd.triggered_set(held, trigger, a.yt)), a.dsr)
    with open(a.out, "wb") as fh:
        fh.write(bd.delta_to_bytes(res.delta))
    if a.curve:
        with open(a.curve, "w") as fh:
            fh.write("k,success_pct,accuracy_pct\n")
            for k, s, acc in res.curve:
                fh.write(f"{k},{100 * s},{100 * acc}\n")
    _print({"dS": res.sparsity, "reached": res.reached})


def cmd_quantize(a):
    model = load_model(a.model)
    if a.align:
        qm = quantize_model(model, None, a.bits, a.mode, activations=load_qmf(a.align))
    else:
        calib = load_dataset(a.calib)
        idx = np.sort(np.random.default_rng(a.calib_seed).choice(len(calib), min(a.calib_count, len(calib)),
                                                                 replace=False))
        qm = quantize_model(model, calib.subset(idx), a.bits, a.mode)
    save_qmf(qm, a.out)
    _print({"out": a.out, "mode": a.mode, "bits": a.bits})


def cmd_compile(a):
    image, prog = compile_model(load_qmf(a.qmf), base_addr=a.base_addr)
    save_program(prog, a.out)
    save_image(image, a.image)
    _print({"instructions": len(prog), "image_bytes": len(image.data)})


def cmd_diff(a):
    cfg = generate_provisioning(load_image(a.clean), load_image(a.backdoored), load_program(a.prg))
    save_tpf(cfg, a.out)
    _print({"targets": len(cfg), "replacement_lines": cfg.replacement_lines})


def cmd_provision(a):
    clean_img, prog = compile_model(load_qmf(a.qmf), base_addr=a.base_addr)
    back_img, _ = compile_model(load_qmf(a.backdoored_qmf), base_addr=a.base_addr)
    cfg = generate_provisioning(clean_img, back_img, prog)
    save_tpf(cfg, a.out)
    _print({"targets": len(cfg), "replacement_lines": cfg.replacement_lines})


def cmd_run(a):
    prog, image = load_program(a.prg), load_image(a.image)
    trojan = load_tpf(a.trojan) if a.trojan else None
    data = load_dataset(a.input)
    picks = [a.index] if a.index is not None else range(len(data))
    trace_fh = open(a.trace, "w") if a.trace else None
    preds, cycles = [], []
    try:
        for i in picks:
            r = run_program(prog, image, quantize_for_image(image, data.inputs[i]), trojan, trace=bool(trace_fh))
            preds.append(r.predicted)
            cycles.append(r.cycles)
            if trace_fh:
                for rec in r.trace:
                    trace_fh.write(json.dumps({"sample": int(i), **rec}, sort_keys=True) + "\n")
    finally:
        if trace_fh:
            trace_fh.close()
    labels = data.labels[list(picks)]
    _print({"samples": len(preds), "accuracy": float(np.mean(np.array(preds) == labels)),
            "predictions": preds[:20], "cycles": sorted(set(cycles))})


def cmd_metrics(a):
    with open(a.report) as fh:
        report = json.load(fh)
    if a.emit == "csv":
        sys.stdout.write(report_csv(report))
    else:
        _print({"base": report["base"], "rows": [{k: v for k, v in r.items() if not k.startswith("curve")}
                                                 for r in report["rows"]]})


def cmd_pipeline(a):
    cfg = load_config(a.config) if a.config else config_from_dict({})
    report = run_pipeline(cfg, a.out, log=lambda m: print(f"[forge] {m}", file=sys.stderr))
    sys.stdout.write(report_csv(report))
    return EXIT_STAGE if any("error" in r for r in report["rows"]) and a.strict else EXIT_OK


def cmd_overhead(a):
    model = OverheadModel()
    if a.coefficients:
        with open(a.coefficients) as fh:
            try:
                model = overhead_model_from_json(fh.read())
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad coefficient file: {exc}") from None
    _print(estimate_overhead(load_tpf(a.tpf), model).to_dict())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="forge", description="sparse backdoor and accelerator trojan lab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a GlyphSigns dataset (GDS1)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train TinyVGG with SGD")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("implant", help="synthesize a trigger and fine-tune the final layer")
    p.add_argument("--model", required=True)
    p.add_argument("--trigger-size", type=int, default=8)
    p.add_argument("--position", type=int, nargs=2, default=[20, 12])
    p.add_argument("--p", choices=["none", "0", "1", "2"], default="1")
    p.add_argument("--lambda", dest="lam", type=float, default=5.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--ys", type=int, default=0)
    p.add_argument("--yt", type=int, default=4)
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--synthesis-steps", type=int, default=300)
    p.add_argument("--finetune", help="GDS1 file; source-class images are used")
    p.add_argument("--finetune-seed", type=int, default=11)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-delta", required=True)
    p.add_argument("--out-trigger", required=True)
    p.set_defaults(fn=cmd_implant)

    p = sub.add_parser("prune", help="keep the smallest magnitude-ordered prefix reaching the DSR")
    p.add_argument("--model", required=True)
    p.add_argument("--delta", required=True)
    p.add_argument("--trigger", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--heldout")
    p.add_argument("--ys", type=int, default=0)
    p.add_argument("--yt", type=int, default=4)
    p.add_argument("--dsr", type=float, default=0.90)
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("quantize", help="post-training quantization to QMF1")
    p.add_argument("--model", required=True)
    p.add_argument("--calib")
    p.add_argument("--calib-count", type=int, default=512)
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--align", help="reuse activation parameters from this QMF1 file")
    p.add_argument("--bits", type=int, choices=[4, 8], default=8)
    p.add_argument("--mode", choices=["product", "conventional"], default="conventional")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("compile", help="lower QMF1 into a DDR1 image and PRG1 program")
    p.add_argument("--qmf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--base-addr", type=lambda s: int(s, 0), default=0x1000)
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("diff", help="provisioning file from two compiled images")
    p.add_argument("--clean", required=True)
    p.add_argument("--backdoored", required=True)
    p.add_argument("--prg", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_diff)

    p = sub.add_parser("provision", help="compile two QMF1 models and diff them into a TPF1 file")
    p.add_argument("--qmf", required=True)
    p.add_argument("--backdoored-qmf", required=True)
    p.add_argument("--base-addr", type=lambda s: int(s, 0), default=0x1000)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_provision)

    p = sub.add_parser("run", help="simulate a program on GDS1 inputs")
    p.add_argument("--prg", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int)
    p.add_argument("--trojan")
    p.add_argument("--trace")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("metrics", help="print the metrics of a pipeline report")
    p.add_argument("--report", required=True)
    p.add_argument("--emit", choices=["csv", "json"], default="csv")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("pipeline", help="run the full experiment from a config file")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 3 if any grid cell failed")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("overhead", help="hardware overhead estimate of a TPF1 file")
    p.add_argument("--tpf", required=True)
    p.add_argument("--coefficients", help="JSON with lut/ff/lutram coefficient triples")
    p.set_defaults(fn=cmd_overhead)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.fn(args)
    except ConfigError as exc:
        print(f"forge: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
        print(f"forge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

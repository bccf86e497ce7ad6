"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the pytest
terminal summary. Run ``python tests/test_acceptance.py`` for just these lines.
Criteria 3-5 and 7-9 read the default desk experiment (session fixture).
"""

import filecmp
import os
import sys

import numpy as np
import pytest

from forge.data import generate_glyph_dataset
from forge.nn import backward, forward, softmax_cross_entropy, tiny_vgg
from forge.pipeline import load_config, run_pipeline
from forge.quant import QuantParams, dequantize, quantize, reference_int_inference
from forge.sim import run_program
from forge.trojan import EMPTY_TROJAN

from conftest import record_criterion

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# thresholds, fixed with the default desk seeds
GRAD_REL_TOL = 1e-4
FLOAT_ACC_MIN = 0.95
QUANT_DROP_MAX = 0.03
L0_SPARSITY_MAX = 15
HURDLE_RATIO = 1.2
HURDLE_FRACTION = 0.5
SIM_SUCCESS_TOL = 0.01
OVERHEAD_MAX_PCT = 1.0
ORACLE_INPUTS = 1000
ROUND_TRIP_SAMPLES = 10_000


def test_criterion_01_gradient_oracle():
    rng = np.random.default_rng(0)
    model = tiny_vgg(7)
    x = generate_glyph_dataset(21, 1).inputs[:4]
    y = np.array([0, 1, 2, 3])

    def loss():
        logits, _ = forward(model, x)
        return float(softmax_cross_entropy(logits, y)[0].sum())

    logits, acts = forward(model, x)
    grads, _ = backward(model, acts, softmax_cross_entropy(logits, y)[1])
    slots = [(li, pi) for li, layer in enumerate(model.layers) for pi in range(len(layer.params()))]
    sizes = np.array([model.layers[li].params()[pi].size for li, pi in slots], dtype=float)
    h, worst = 1e-6, 0.0
    for _ in range(100):
        li, pi = slots[rng.choice(len(slots), p=sizes / sizes.sum())]
        param = model.layers[li].params()[pi]
        idx = tuple(int(rng.integers(0, s)) for s in param.shape)
        keep = param[idx]
        param[idx] = keep + h
        up = loss()
        param[idx] = keep - h
        down = loss()
        param[idx] = keep
        fd = (up - down) / (2 * h)
        analytic = grads[li][pi][idx]
        worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8))
    ok = worst <= GRAD_REL_TOL
    record_criterion(1, ok, f"max relative error {worst:.2e} over 100 coordinates (tol {GRAD_REL_TOL:g})")
    assert ok


def _round_trip_violations(qp, samples):
    r = dequantize(quantize(samples, qp), qp)
    bad = (r < samples - qp.scale) | (r > samples)
    return int(bad.sum())


def test_criterion_02_quantizer_round_trip():
    rng = np.random.default_rng(2)
    ranges = [(-1.0, 1.0), (0.0, 1.0), (-0.37, 2.9), (0.25, 6.0)]
    lines, ok = [], True
    for mode in ("conventional", "product"):
        for bits in (4, 8):
            for low, high in ranges:
                qp = QuantParams(bits, low, high, mode)
                a = rng.uniform(low, high, ROUND_TRIP_SAMPLES)
                bad = _round_trip_violations(qp, a)
                zero_ok = True
                if low <= 0.0 <= high and qp.qmin <= qp.zero_point <= qp.qmax:
                    zero_ok = dequantize(quantize(0.0, qp), qp) == 0.0
                if bad or not zero_ok:
                    ok = False
                    lines.append(f"{mode} b={bits} [{low},{high}]: {bad} violations, r(q(0))=0 {zero_ok}")
    detail = "all modes/ranges hold" if ok else "; ".join(lines)
    record_criterion(2, ok, detail)
    assert ok, detail


def test_criterion_03_base_task(desk):
    base = desk["report"]["base"]
    acc, acc_q = base["accuracy_float"], base["accuracy_quant"]
    drop = acc - acc_q
    ok = acc >= FLOAT_ACC_MIN and drop <= QUANT_DROP_MAX
    record_criterion(3, ok, f"float {acc:.4f}, 8-bit {base['quant_mode']} {acc_q:.4f}, drop {100 * drop:.2f} pts")
    assert ok


def test_criterion_04_sparsity_ordering(desk):
    rows = desk["rows"]
    none, l1, l0 = rows["none"], rows["l1"], rows["l0"]
    reached = none["dsr_reached"] and l1["dsr_reached"] and l0["dsr_reached"]
    ok = reached and l1["dS"] < none["dS"] and l0["dS"] <= L0_SPARSITY_MAX
    record_criterion(4, ok, f"dS none={none['dS']} l1={l1['dS']} l0={l0['dS']} (<= {L0_SPARSITY_MAX}), "
                            f"DSR reached {reached}")
    assert ok


def test_criterion_05_quantization_hurdle(desk):
    l1, l0 = desk["rows"]["l1"], desk["rows"]["l0"]
    final_bytes = l0["final_layer_bytes"]
    ok = l1["dQ"] <= HURDLE_RATIO * l1["dS"] and l0["dQ"] >= HURDLE_FRACTION * final_bytes
    record_criterion(5, ok, f"l1 dQ={l1['dQ']} vs dS={l1['dS']}; l0 dQ={l0['dQ']} of {final_bytes} bytes")
    assert ok


def test_criterion_06_simulator_oracle(desk_artifacts):
    qm, image, prog = desk_artifacts["qm"], desk_artifacts["image"], desk_artifacts["program"]
    rng = np.random.default_rng(6)
    qp = qm.input_qp
    codes = rng.integers(qp.qmin, qp.qmax + 1, (ORACLE_INPUTS,) + tuple(qm.input_shape))
    stored = [i for i, l in enumerate(qm.layers) if l.kind != "flatten"]
    mismatched, transparent = 0, True
    for start in range(0, ORACLE_INPUTS, 100):
        pred, ref = reference_int_inference(qm, codes[start:start + 100])
        for k in range(len(pred)):
            res = run_program(prog, image, codes[start + k])
            same = res.predicted == pred[k] and all(
                np.array_equal(out.reshape(ref[i][k].shape), ref[i][k]) for out, i in zip(res.outputs, stored))
            mismatched += not same
            empty = run_program(prog, image, codes[start + k], EMPTY_TROJAN)
            transparent &= (empty.cycles, empty.data_cycles, empty.ddr) == (res.cycles, res.data_cycles, res.ddr)
            transparent &= all(np.array_equal(a, b) for a, b in zip(empty.outputs, res.outputs))
    ok = mismatched == 0 and transparent
    record_criterion(6, ok, f"{ORACLE_INPUTS - mismatched}/{ORACLE_INPUTS} bit-exact per layer; "
                            f"empty trojan identical incl. cycles {transparent}")
    assert ok


def test_criterion_07_substitution(desk):
    test_size = 8 * desk["report"]["config"]["data"]["test_per_class"]
    parts, ok = [], True
    for name, r in desk["rows"].items():
        gap = abs(r["sim_success"] - r["success_quant"])
        row_ok = (r["sim_equivalent"] and r["sim_test_count"] == test_size and gap <= SIM_SUCCESS_TOL
                  and r["sim_software_mismatches"] == 0)
        ok &= bool(row_ok)
        parts.append(f"{name}: equiv {r['sim_equivalent']}, success {r['sim_success']:.3f} vs "
                     f"{r['success_quant']:.3f}, sample mismatches {r['sim_software_mismatches']}")
    record_criterion(7, ok, "; ".join(parts))
    assert ok


def test_criterion_08_zero_cycle_overhead(desk):
    flags = {name: r["sim_cycles_equal"] for name, r in desk["rows"].items()}
    ok = all(flags.values())
    record_criterion(8, ok, "cycle counts identical with trojan: " + ", ".join(f"{k}={v}" for k, v in flags.items()))
    assert ok


def test_criterion_09_overhead_report(desk):
    r = desk["rows"]["l1"]
    ov = r["overhead"]
    pct = ov["percent"]
    ok = (r["deployed_changes"] == 30 and all(v < OVERHEAD_MAX_PCT for v in pct.values())
          and ov["total_percent"] < OVERHEAD_MAX_PCT)
    record_criterion(9, ok, f"l1, {r['deployed_changes']} changes, {ov['lines']} lines: "
                            + ", ".join(f"{k} {v:.3f}%" for k, v in sorted(pct.items()))
                            + f", total {ov['total_percent']:.3f}%")
    assert ok


def _tree(root):
    out = []
    for d, _, files in os.walk(root):
        out.extend(os.path.relpath(os.path.join(d, f), root) for f in files)
    return sorted(out)


def test_criterion_10_determinism(tmp_path):
    cfg_path = os.path.join(ROOT, "configs", "smoke.json")
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(load_config(cfg_path), str(a))
    run_pipeline(load_config(cfg_path), str(b))
    files_a, files_b = _tree(a), _tree(b)
    differing = [f for f in files_a if not filecmp.cmp(a / f, b / f, shallow=False)] if files_a == files_b else ["<file lists>"]
    ok = files_a == files_b and not differing and "report.json" in files_a
    record_criterion(10, ok, f"{len(files_a)} artifacts compared, {len(differing)} differ")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

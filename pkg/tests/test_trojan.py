import numpy as np
import pytest

from forge.compiler import compile_model
from forge.nn import dense_model
from forge.quant import quantize_input, quantize_model
from forge.sim import run_program
from forge.trojan import (BASELINE, EMPTY_TROJAN, OverheadModel, ProvisioningError, TrojanConfig, TrojanFault,
                          TrojanTarget, estimate_overhead, generate_provisioning, overhead_for,
                          overhead_model_from_json, tpf_from_bytes, tpf_to_bytes, trojan_hook)

from conftest import small_cnn


def _dense_64x16():
    rng = np.random.default_rng(0)
    m = dense_model(rng.normal(size=(64, 16)), rng.normal(size=16))
    qm = quantize_model(m, rng.uniform(size=(32, 64)), mode="conventional")
    image, prog = compile_model(qm)
    return qm, image, prog


def test_identical_images_give_empty_config():
    _, image, prog = _dense_64x16()
    cfg = generate_provisioning(image, image.copy(), prog)
    assert len(cfg) == 0 and cfg.replacement_lines == 0


def test_one_byte_in_line_five():
    _, image, prog = _dense_64x16()
    w = image.allocations["layer0.weight"]
    assert w.lines == 64
    evil = image.copy()
    evil.data[w.addr - image.base_addr + 5 * 16 + 7] ^= 0x01
    cfg = generate_provisioning(image, evil, prog)
    assert len(cfg) == 1
    t = cfg.targets[0]
    assert t.ddr_addr == w.addr
    assert [k for k, b in enumerate(t.mask) if b] == [5]
    assert len(t.lines) == 1 and t.lines[0] == evil.read(w.addr + 80, 16)


def test_difference_outside_loads_rejected():
    _, image, prog = _dense_64x16()
    evil = image.copy()
    evil.data[-1] ^= 0xFF  # output buffer: written by STORE, never loaded
    with pytest.raises(ProvisioningError):
        generate_provisioning(image, evil, prog)


def test_hook_rules():
    line = bytes(range(16))
    rep = b"\x55" * 16
    cfg = TrojanConfig((TrojanTarget(0x1000, (True,), (rep,)),))
    assert trojan_hook(EMPTY_TROJAN, 0x1000, 0, 0x1000, line) == line
    assert trojan_hook(cfg, 0x1000, 0, 0x1000, line) == rep
    assert trojan_hook(cfg, 0x1010, 0, 0x1010, line) == line
    four = TrojanConfig((TrojanTarget(0x2000, (True, False, True, False), (b"a" * 16, b"b" * 16)),))
    got = [trojan_hook(four, 0x2000 + 16 * k, k, 0x2000, line) for k in range(4)]
    assert got == [b"a" * 16, line, b"b" * 16, line]


def test_mask_exhaustion_faults():
    cfg = TrojanConfig((TrojanTarget(0x1000, (False, True), (b"x" * 16,)),))
    with pytest.raises(TrojanFault):
        trojan_hook(cfg, 0x1020, 2, 0x1000, bytes(16))


def test_target_validation():
    with pytest.raises(ValueError):
        TrojanTarget(0x1000, (True, True), (bytes(16),))
    with pytest.raises(ValueError):
        TrojanTarget(0x1004, (True,), (bytes(16),))
    t = TrojanTarget(0x1000, (True,), (bytes(16),))
    with pytest.raises(ValueError):
        TrojanConfig((t, t))


def test_end_to_end_substitution_matches_backdoored_image():
    rng = np.random.default_rng(3)
    calib = rng.uniform(size=(32, 8, 8, 3))
    clean_qm = quantize_model(small_cnn(0), calib, mode="conventional")
    evil_model = small_cnn(0)
    evil_model.layers[-1].weights[:5, 2] += 0.4
    evil_qm = quantize_model(evil_model, calib, mode="conventional", activations=clean_qm)
    clean, prog = compile_model(clean_qm)
    evil, prog_evil = compile_model(evil_qm)
    assert prog.instructions == prog_evil.instructions
    cfg = generate_provisioning(clean, evil, prog)
    assert len(cfg) >= 1
    for k in range(10):
        codes = quantize_input(clean_qm, rng.uniform(size=(8, 8, 3)))
        a = run_program(prog, clean, codes, cfg)
        b = run_program(prog, evil, codes)
        assert a.predicted == b.predicted and a.cycles == b.cycles
        assert all(np.array_equal(x, y) for x, y in zip(a.outputs, b.outputs))
        trace = run_program(prog, clean, codes, cfg, trace=True).trace
        assert sum(t["substituted"] for t in trace) == cfg.replacement_lines


# -- overhead ---------------------------------------------------------------

def test_empty_config_is_constant_only():
    rep = estimate_overhead(EMPTY_TROJAN)
    m = OverheadModel()
    assert rep.delta == {"lut": m.lut[0], "lutram": m.lutram[0], "ff": m.ff[0]}


def test_overhead_is_linear_in_lines():
    m = OverheadModel()
    a, b = overhead_for(1, 15, m), overhead_for(1, 30, m)
    for r in BASELINE:
        c0 = m.delta(r, 1, 0)
        assert b.delta[r] - c0 == 2 * (a.delta[r] - c0)


def test_thirty_line_config_below_one_percent():
    lines = tuple(bytes([k]) * 16 for k in range(30))
    cfg = TrojanConfig((TrojanTarget(0x1000, (True,) * 30, lines),))
    rep = estimate_overhead(cfg)
    assert rep.lines == 30 and rep.targets == 1
    assert all(p < 1.0 for p in rep.percent.values())
    assert rep.total_percent < 1.0


def test_overhead_coefficients_from_json():
    m = overhead_model_from_json('{"lut": [1, 2, 3], "ff": [0, 0, 0], "lutram": [0, 0, 4]}')
    assert overhead_for(2, 5, m).delta == {"lut": 1 + 4 + 15, "lutram": 20, "ff": 0}


def test_tpf_round_trip_and_bit_order():
    t = TrojanTarget(0x1230, (True, False, True, False, False, False, False, False, False, True),
                     (b"a" * 16, b"b" * 16, b"c" * 16))
    blob = tpf_to_bytes(TrojanConfig((t,)))
    assert blob[:4] == b"TPF1"
    # header 8, address/count 12, then mask bytes
    assert blob[20:22] == bytes([0b00000101, 0b00000010])
    back = tpf_from_bytes(blob)
    assert back.targets == (t,)
    with pytest.raises(ValueError):
        tpf_from_bytes(blob + b"\x00")


def test_provisioning_rejects_mismatched_images():
    _, image, prog = _dense_64x16()
    smaller = image.copy()
    smaller.data = smaller.data[:-16]
    with pytest.raises(ProvisioningError):
        generate_provisioning(image, smaller, prog)
    shifted = image.copy()
    shifted.base_addr += 16
    with pytest.raises(ProvisioningError):
        generate_provisioning(image, shifted, prog)

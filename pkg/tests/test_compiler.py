import numpy as np
import pytest

from forge.compiler import (Alu, BankGeometry, CompileError, Conv, End, Load, MalformedInstruction, Program, Store,
                            check_program, compile_model, decode_instruction, emit_program, encode_instruction,
                            image_from_bytes, image_sidecar, image_to_bytes, layout_parameters, locate_parameter,
                            program_from_bytes, program_to_bytes)
from forge.nn import dense_model, tiny_vgg
from forge.quant import quantize_model

from conftest import small_cnn


def _dense_qm(n_in=5, n_out=8, seed=0):
    rng = np.random.default_rng(seed)
    m = dense_model(rng.normal(size=(n_in, n_out)), rng.normal(size=n_out))
    return quantize_model(m, rng.uniform(size=(32, n_in)), mode="conventional")


def _cnn_qm(seed=0):
    m = small_cnn(seed)
    return quantize_model(m, np.random.default_rng(seed).uniform(size=(32, 8, 8, 3)), mode="conventional")


def test_forty_byte_tensor_takes_three_lines():
    img = layout_parameters(_dense_qm(5, 8))
    a = img.allocations["layer0.weight"]
    assert (a.nbytes, a.lines) == (40, 3)
    assert img.read(a.addr + 40, 8) == b"\x00" * 8


def test_consecutive_tensors_are_packed():
    img = layout_parameters(_cnn_qm())
    allocs = list(img.allocations.values())
    assert allocs[0].addr == 0x1000
    for a, b in zip(allocs, allocs[1:]):
        assert b.addr == a.addr + 16 * a.lines
    assert len(img.data) == sum(16 * a.lines for a in allocs)


def test_layout_is_deterministic():
    a = layout_parameters(_cnn_qm())
    b = layout_parameters(_cnn_qm())
    assert image_to_bytes(a) == image_to_bytes(b)


def test_misaligned_base_rejected():
    with pytest.raises(CompileError):
        layout_parameters(_dense_qm(), base_addr=0x1008)


def test_dense_only_program_shape():
    image, prog = compile_model(_dense_qm())
    assert [type(i) for i in prog.instructions] == [Load, Load, Load, Conv, Store, End]
    load_in, load_w, load_b = prog.instructions[:3]
    assert load_in.ddr_addr == image.allocations["input"].addr
    assert load_w.ddr_addr == image.allocations["layer0.weight"].addr
    assert load_b.ddr_addr == image.allocations["layer0.bias"].addr


def test_tinyvgg_load_count():
    qm = quantize_model(tiny_vgg(0), np.random.default_rng(0).uniform(size=(8, 32, 32, 3)), mode="conventional")
    image, prog = compile_model(qm)
    loads = [i for i in prog.instructions if isinstance(i, Load)]
    kinds = [l.kind for l in qm.layers]
    param_layers = sum(k in ("conv", "dense") for k in kinds)
    compute_layers = sum(k != "flatten" for k in kinds)
    # one input LOAD per compute layer plus weight and bias per parameterised layer
    assert len(loads) == compute_layers + 2 * param_layers == 9 + 8
    param_loads = [l for l in loads if l.bank >= 16]
    assert len({l.ddr_addr for l in param_loads}) == len(param_loads)
    assert all(l.ddr_addr % 16 == 0 for l in loads)
    dense = image.allocations["layer7.weight"]
    assert dense.nbytes == 1024 * 64 and dense.lines == 4096


def test_locate_parameter_examples():
    image, _ = compile_model(_dense_qm(5, 8))
    w = image.allocations["layer0.weight"]
    b = image.allocations["layer0.bias"]
    assert tuple(locate_parameter(image, 0, 0)) == (w.addr, 0, 0)
    assert tuple(locate_parameter(image, 17, 0)) == (w.addr, 1, 1)
    assert tuple(locate_parameter(image, 40, 0)) == (b.addr, 0, 0)
    assert tuple(locate_parameter(image, 45, 0)) == (b.addr, 1, 4)
    with pytest.raises(IndexError):
        locate_parameter(image, 48, 0)
    with pytest.raises(KeyError):
        locate_parameter(image, 0, 3)


def test_locate_parameter_round_trip():
    qm = _dense_qm(6, 7)
    image, _ = compile_model(qm)
    codes = np.concatenate([qm.layers[0].weight.ravel(), qm.layers[0].bias])
    for k, code in enumerate(codes):
        loc = locate_parameter(image, k, 0)
        addr = loc.load_addr + 16 * loc.line + loc.byte
        if k < 42:
            assert np.frombuffer(image.read(addr, 1), np.int8)[0] == code
        else:
            assert np.frombuffer(image.read(addr, 4), "<i4")[0] == code


def test_oversize_tensor_names_layer():
    geom = BankGeometry(bank_count=6, lines_per_bank=4, feature_banks=2, weight_banks=2, bias_banks=2)
    with pytest.raises(CompileError, match="layer0.weight"):
        layout_parameters(_dense_qm(20, 8), geom)


def test_region_discipline():
    _, prog = compile_model(_cnn_qm())
    g = prog.geometry
    for ins in prog.instructions:
        if isinstance(ins, Conv):
            assert g.region_of(ins.in_bank) == "feature"
            assert g.region_of(ins.w_bank) == "weight"
            assert g.region_of(ins.b_bank) == "bias"
            assert g.region_of(ins.out_bank) == "feature"
    bad = Program([Load(0x1000, 16, 2047, 16 * 2048 + 2), End()], prog.model_hash, g)
    with pytest.raises(CompileError):
        check_program(bad)
    with pytest.raises(CompileError):
        check_program(Program([Load(0x1000, 0, 0, 1)], prog.model_hash, g))


def test_instruction_encoding_round_trip():
    samples = [Load(0x1230, 16, 5, 4096), Store(3, 7, 0xABCDEF0, 9),
               Conv(0, 0, 16, 0, 33, 0, 0, 64, 32, 32, 3, 8, 3, 1, 1),
               Alu(2, 0, 0, 0, 10, 32, 32, 8, 2, -5), End()]
    for ins in samples:
        rec = encode_instruction(ins)
        assert len(rec) == 24
        assert decode_instruction(rec) == ins
    with pytest.raises(MalformedInstruction):
        decode_instruction(b"\x09" + b"\x00" * 23)
    with pytest.raises(CompileError):
        encode_instruction(Load(0x1000, 300, 0, 1))


def test_program_and_image_files_round_trip():
    image, prog = compile_model(_cnn_qm())
    blob = program_to_bytes(prog)
    assert blob[:4] == b"PRG1"
    back = program_from_bytes(blob)
    assert back.instructions == prog.instructions and back.geometry == prog.geometry
    img2 = image_from_bytes(image_to_bytes(image), image_sidecar(image))
    assert img2.data == image.data and img2.allocations == image.allocations
    with pytest.raises(MalformedInstruction):
        program_from_bytes(blob[:-1])


def test_one_weight_change_changes_one_byte():
    qm = _cnn_qm()
    a, prog_a = compile_model(qm)
    qm.layers[-1].weight[3, 1] += 1 if qm.layers[-1].weight[3, 1] < 127 else -1
    b, prog_b = compile_model(qm)
    diff = np.flatnonzero(np.frombuffer(bytes(a.data), np.uint8) != np.frombuffer(bytes(b.data), np.uint8))
    assert len(diff) == 1
    loc = locate_parameter(a, 3 * qm.layers[-1].weight.shape[1] + 1, len(qm.layers) - 1)
    assert a.base_addr + diff[0] == loc.load_addr + 16 * loc.line + loc.byte
    assert prog_a.instructions == prog_b.instructions


def test_emit_rejects_geometry_mismatch():
    qm = _dense_qm()
    image = layout_parameters(qm)
    with pytest.raises(CompileError):
        emit_program(qm, image, BankGeometry(lines_per_bank=1024))

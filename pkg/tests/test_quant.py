import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forge.nn import Dense, Model, ReLU, dense_model, forward
from forge.quant import (AccumulatorOverflow, QuantParams, dequantize, dequantize_value, diff_quantized_bytes,
                         params_for_range, qmf_from_bytes, qmf_hash, qmf_to_bytes, quantize, quantize_input,
                         quantize_model, quantize_value, reference_int_inference, requantize)

from conftest import small_cnn

PRODUCT = QuantParams(8, -1.0, 1.0, "product")


# -- scalar formulas --------------------------------------------------------

def test_product_formula_worked_values():
    s = 2.0 / 255.0
    assert PRODUCT.scale == pytest.approx(s)
    assert PRODUCT.zero_point == -127
    assert quantize_value(0.0, PRODUCT) == -127
    assert dequantize_value(-127, PRODUCT) == 0.0
    assert quantize_value(0.5, PRODUCT) == -64
    assert dequantize_value(-64, PRODUCT) == pytest.approx(63 * s)
    assert quantize_value(2.0, PRODUCT) == 127
    assert dequantize_value(127, PRODUCT) == pytest.approx(1.9922, abs=1e-4)


def test_conventional_zero_point():
    qp = QuantParams(8, -1.0, 1.0, "conventional")
    assert qp.zero_point == 0  # -floor(-127.5) - 128
    assert QuantParams(8, 0.0, 1.0, "conventional").zero_point == -128


def test_zero_point_reconstructs_zero():
    for qp in (PRODUCT, QuantParams(4, -0.3, 2.0, "conventional"), QuantParams(8, 0.1, 0.9, "product")):
        if qp.qmin <= qp.zero_point <= qp.qmax:
            assert dequantize_value(qp.zero_point, qp) == 0.0


def test_out_of_range_code_rejected():
    with pytest.raises(ValueError):
        dequantize_value(128, PRODUCT)
    with pytest.raises(ValueError):
        dequantize(np.array([0, -9]), QuantParams(4, -1.0, 1.0, "conventional"))


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        QuantParams(8, 1.0, 1.0)
    with pytest.raises(ValueError):
        QuantParams(1, 0.0, 1.0)
    with pytest.raises(ValueError):
        QuantParams(8, 0.0, 1.0, "other")


def test_product_formula_clips_negative_inputs():
    # with alpha < 0 the product zero point leaves only -2^(b-1)..p0 for negatives
    s = PRODUCT.scale
    codes = quantize(np.array([-1.0, -0.5, -0.01]), PRODUCT)
    assert codes.tolist() == [-128, -128, -128]
    assert dequantize_value(-128, PRODUCT) == pytest.approx(-s)


@given(st.floats(-50, 50), st.floats(1e-3, 50), st.sampled_from([4, 8]), st.floats(0, 1))
@settings(max_examples=200, deadline=None)
def test_conventional_round_trip_property(low, width, bits, frac):
    qp = QuantParams(bits, low, low + width, "conventional")
    a = low + frac * width
    r = dequantize_value(quantize_value(a, qp), qp)
    tol = 1e-9 * max(1.0, abs(a))
    assert a - qp.scale - tol <= r <= a + tol


@given(st.floats(-20, 20), st.floats(1e-3, 20), st.sampled_from(["product", "conventional"]),
       st.sampled_from([4, 8]))
@settings(max_examples=100, deadline=None)
def test_codes_stay_in_range(low, width, mode, bits):
    qp = QuantParams(bits, low, low + width, mode)
    codes = quantize(np.linspace(low - width, low + 2 * width, 97), qp)
    assert codes.min() >= qp.qmin and codes.max() <= qp.qmax


def test_degenerate_range_widened_with_warning():
    with pytest.warns(UserWarning):
        qp = params_for_range(0.0, 0.0, 8, "conventional")
    assert qp.low < 0.0 < qp.high
    assert np.all(quantize(np.zeros(5), qp) == qp.zero_point)


# -- model quantization -----------------------------------------------------

def _calib(n=64, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 8, 8, 3))


def test_quantize_model_is_deterministic():
    m = small_cnn(0)
    a = quantize_model(m, _calib(), mode="conventional")
    b = quantize_model(m, _calib(), mode="conventional")
    assert qmf_to_bytes(a) == qmf_to_bytes(b)


def test_quantize_model_bias_params():
    qm = quantize_model(small_cnn(0), _calib(), mode="conventional")
    for i, l in enumerate(qm.layers):
        if l.weight is None:
            continue
        assert l.bias_qp.zero_point == 0 and l.bias_qp.bits == 32
        assert l.bias_qp.scale == pytest.approx(l.weight_qp.scale * qm.in_qp(i).scale)


def test_constant_zero_weights_map_to_zero_point():
    m = small_cnn(0)
    m.layers[4].weights[:] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        qm = quantize_model(m, _calib(), mode="conventional")
    assert np.all(qm.layers[4].weight == qm.layers[4].weight_qp.zero_point)


def test_zero_weight_dense_outputs_output_zero_point():
    m = dense_model(np.zeros((1, 1)), np.zeros(1))
    calib = np.random.default_rng(0).uniform(size=(16, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        qm = quantize_model(m, calib, mode="conventional")
    ql = qm.layers[0]
    assert ql.weight[0, 0] == ql.weight_qp.zero_point
    codes = quantize_input(qm, np.linspace(0, 1, 11)[:, None])
    _, outs = reference_int_inference(qm, codes)
    assert np.all(outs[0] == ql.out_qp.zero_point)


def test_integer_path_agrees_with_float_two_layer_net():
    rng = np.random.default_rng(4)
    layers = [Dense(rng.normal(0, 0.5, (16, 32)), rng.normal(0, 0.1, 32)), ReLU(),
              Dense(rng.normal(0, 0.5, (32, 5)), rng.normal(0, 0.1, 5))]
    m = Model(layers, (16,), 5, None)
    x = rng.uniform(-1, 1, (1000, 16))
    qm = quantize_model(m, x, mode="conventional")
    pred_int, _ = reference_int_inference(qm, quantize_input(qm, x))
    pred_float = forward(m, x)[0].argmax(axis=1)
    assert np.mean(pred_int == pred_float) >= 0.97


def test_integer_inference_deterministic_and_single_sample():
    qm = quantize_model(small_cnn(1), _calib(), mode="conventional")
    codes = quantize_input(qm, _calib(3, seed=5))
    p1, o1 = reference_int_inference(qm, codes)
    p2, o2 = reference_int_inference(qm, codes)
    assert all(np.array_equal(a, b) for a, b in zip(o1, o2))
    single, outs = reference_int_inference(qm, codes[1])
    assert single == p1[1]
    assert all(np.array_equal(a, b[1]) for a, b in zip(outs, o1))


def test_accumulator_overflow_raises():
    qm = quantize_model(small_cnn(1), _calib(), mode="conventional")
    qm.layers[-1].bias[:] = 2 ** 31 - 1
    qm.layers[-1].weight[:] = qm.layers[-1].weight_qp.qmax
    codes = np.full((8, 8, 3), qm.input_qp.qmax)
    with pytest.raises(AccumulatorOverflow):
        reference_int_inference(qm, codes)


@given(st.lists(st.integers(-2 ** 31, 2 ** 31 - 1), min_size=2, max_size=30), st.floats(1e-6, 10.0))
@settings(max_examples=100, deadline=None)
def test_requantize_is_monotone(acc, mult):
    acc = np.sort(np.array(acc, dtype=np.int64))
    out = requantize(acc, mult, QuantParams(8, -3.0, 5.0, "conventional"))
    assert np.all(np.diff(out) >= 0)


# -- diffing and QMF1 -------------------------------------------------------

def test_diff_examples():
    m = small_cnn(2)
    a = quantize_model(m, _calib(), mode="conventional")
    assert diff_quantized_bytes(a, a) == 0
    b = qmf_from_bytes(qmf_to_bytes(a))
    w = b.layers[-1].weight
    w[0, 0] = w[0, 0] + 1 if w[0, 0] < 127 else w[0, 0] - 1
    assert diff_quantized_bytes(a, b) == 1


def test_diff_range_shift_touches_most_bytes():
    m = small_cnn(2)
    a = quantize_model(m, _calib(), mode="conventional")
    shifted = m.copy()
    shifted.layers[-1].weights[0, 0] += 5.0
    b = quantize_model(shifted, _calib(), mode="conventional", activations=a)
    final_bytes = shifted.layers[-1].weights.size + 4 * shifted.layers[-1].bias.size
    assert diff_quantized_bytes(a, b) >= 0.5 * final_bytes


def test_diff_architecture_mismatch_rejected():
    a = quantize_model(small_cnn(2), _calib(), mode="conventional")
    b = quantize_model(small_cnn(2), _calib(), bits=4, mode="conventional")
    with pytest.raises(ValueError):
        diff_quantized_bytes(a, b)


def test_per_tensor_ranges_are_independent():
    m = small_cnn(3)
    a = quantize_model(m, _calib(), mode="conventional")
    other = m.copy()
    other.layers[-1].weights *= 3.0
    b = quantize_model(other, _calib(), mode="conventional", activations=a)
    assert np.array_equal(a.layers[0].weight, b.layers[0].weight)
    assert np.array_equal(a.layers[4].weight, b.layers[4].weight)


def test_qmf1_round_trip():
    qm = quantize_model(small_cnn(0), _calib(), bits=4, mode="product")
    blob = qmf_to_bytes(qm)
    assert blob[:4] == b"QMF1"
    back = qmf_from_bytes(blob)
    assert qmf_to_bytes(back) == blob
    assert qmf_hash(back) == qmf_hash(qm)
    assert back.weight_bits == 4

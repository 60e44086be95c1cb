from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_quantile, scalar_fake_quant

from clq.errors import ConfigurationError, DataError, FormatError, UnsupportedPackingError
from clq.model import Dims, build_toy, forward, make_inputs
from clq.quantizer import (
    QuantizedTensor,
    QuantParams,
    dequantize,
    dequantize_codes,
    dynamic_activation_params,
    minmax_params,
    pack_codes,
    quantize_codes,
    quantize_dequantize,
    quantize_pack,
    unpack_codes,
)


def params1(l, r, n):
    return QuantParams([l], [r], n)


# --- quantize_dequantize ---------------------------------------------------------


def test_hand_example_two_bits():
    out = quantize_dequantize(np.array([[0.3]]), params1(0.0, 1.0, 2))
    assert out[0, 0] == pytest.approx(1 / 3, abs=1e-15)
    assert scalar_fake_quant(0.3, 0.0, 1.0, 2) == pytest.approx(1 / 3)


def test_lower_bound_is_fixed_point():
    p = QuantParams([-1.5, 0.25, -3.0], [2.0, 0.75, 7.0], 4)
    x = p.lower.astype(np.float64)[None, :]
    assert np.array_equal(quantize_dequantize(x, p), x)


def test_saturates_at_upper_bound():
    assert quantize_dequantize(np.array([[5.0]]), params1(0.0, 1.0, 8))[0, 0] == 1.0


@pytest.mark.parametrize("n", [2, 4, 8])
def test_matches_scalar_oracle(n):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(50, 6)) * 3
    lo = rng.uniform(-4, -0.5, size=6).astype(np.float32)
    hi = rng.uniform(0.5, 4, size=6).astype(np.float32)
    p = QuantParams(lo, hi, n)
    got = quantize_dequantize(x, p)
    want = np.array([[scalar_fake_quant(x[i, c], float(lo[c]), float(hi[c]), n) for c in range(6)]
                     for i in range(50)])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_half_ties_round_to_even():
    # (x - l)/(r - l) * 3 = 0.5 and 1.5 exactly
    p = params1(0.0, 3.0, 2)
    out = quantize_codes(np.array([[0.5], [1.5], [2.5]]), p)
    assert out.ravel().tolist() == [0, 2, 2]


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_input_rejected(bad):
    with pytest.raises(DataError):
        quantize_dequantize(np.array([[0.0], [bad]]), params1(0.0, 1.0, 4))


def test_channel_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        quantize_dequantize(np.zeros((3, 4)), QuantParams(np.zeros(3), np.ones(3), 4))


def test_params_reject_equal_bounds_and_low_bits():
    with pytest.raises(ConfigurationError):
        QuantParams([1.0], [1.0], 4)
    with pytest.raises(ConfigurationError):
        QuantParams([0.0], [1.0], 1)


def test_axis_selects_channel_dimension():
    x = np.arange(12.0).reshape(3, 4)
    p = QuantParams([0, 4, 8], [3, 7, 11], 8, axis=0)
    np.testing.assert_allclose(quantize_dequantize(x, p), x, atol=1e-12)


# --- properties --------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def channel_case(draw, bits=st.sampled_from([2, 4, 8, 16])):
    n = draw(bits)
    l = draw(st.floats(-100, 100, allow_nan=False))
    width = draw(st.floats(1e-2, 200))
    p = params1(l, l + width, n)
    xs = draw(st.lists(finite, min_size=1, max_size=20))
    return p, np.array(xs)[:, None]


@settings(max_examples=200, deadline=None)
@given(channel_case())
def test_idempotent(case):
    p, x = case
    once = quantize_dequantize(x, p)
    assert np.array_equal(quantize_dequantize(once, p), once)


@settings(max_examples=200, deadline=None)
@given(channel_case())
def test_monotone(case):
    p, x = case
    xs = np.sort(x, axis=0)
    out = quantize_dequantize(xs, p)
    assert np.all(np.diff(out[:, 0]) >= 0)


@settings(max_examples=200, deadline=None)
@given(channel_case(), st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_error_bound_inside_range(case, ts):
    p, _ = case
    l, r = float(p.lower[0]), float(p.upper[0])
    x = np.array([l + t * (r - l) for t in ts])[:, None]
    bound = (r - l) / (2 * p.levels)
    err = np.abs(quantize_dequantize(x, p) - x)
    assert np.all(err <= bound * (1 + 1e-9) + 1e-12 * max(abs(l), abs(r)))


def test_sixteen_bit_input_barely_moves_model_output():
    g = build_toy(Dims(dim=32, blocks=2, heads=2, ffn=64), seed=3)
    x, cross = make_inputs(g.dims, 4, seed=9)
    xq = quantize_dequantize(x, minmax_params(x, 16))
    y, _ = forward(g, x, cross)
    yq, _ = forward(g, xq, cross)
    assert np.linalg.norm(yq - y) / np.linalg.norm(y) < 1e-3


# --- packing -------------------------------------------------------------------------


def test_nibble_order_low_first():
    assert pack_codes(np.array([3, 7]), 4) == bytes([0x73])


def test_eight_nibbles_take_four_bytes():
    assert len(pack_codes(np.arange(8) % 16, 4)) == 4


@pytest.mark.parametrize("bits,count", [(4, 37), (4, 64), (8, 33)])
def test_pack_round_trip(bits, count):
    codes = np.random.default_rng(count).integers(0, 2**bits, size=count)
    assert np.array_equal(unpack_codes(pack_codes(codes, bits), bits, count), codes)


def test_sixteen_bits_not_packable():
    with pytest.raises(UnsupportedPackingError):
        quantize_pack(np.zeros((2, 2)), QuantParams([0, 0], [1, 1], 16))


def test_corrupt_payload_length():
    with pytest.raises(FormatError):
        unpack_codes(b"\x00\x00\x00", 4, 8)
    p = QuantParams([0, 0], [1, 1], 4)
    with pytest.raises(FormatError):
        QuantizedTensor(b"\x00", (2, 2), p)


def test_dequantize_endpoints():
    p = QuantParams([-1.0, 0.1], [1.0, 0.7], 4)
    codes = np.array([[0, 15]])
    out = dequantize_codes(codes, p)
    assert out[0, 0] == -1.0
    assert out[0, 1] == np.float64(np.float32(0.7))


@pytest.mark.parametrize("bits", [4, 8])
def test_pack_path_equals_fake_quant(bits):
    rng = np.random.default_rng(bits)
    w = rng.normal(size=(31, 9))
    p = minmax_params(w, bits)
    q = quantize_pack(w, p)
    assert q.shape == (31, 9)
    assert np.array_equal(dequantize(q), quantize_dequantize(w, p))
    assert q.codes().max() <= 2**bits - 1


def test_params_bytes_round_trip():
    p = QuantParams([-1.0, 2.0], [1.0, 3.5], 8)
    raw = p.to_bytes()
    assert len(raw) == 17
    assert QuantParams.from_bytes(raw, 2) == p


# --- dynamic activation params --------------------------------------------------------


def test_dynamic_minmax():
    p = dynamic_activation_params(np.array([[-2.0], [0.0], [4.0]]), 4)
    assert (float(p.lower[0]), float(p.upper[0])) == (-2.0, 4.0)


def test_constant_channel_widened():
    p = dynamic_activation_params(np.full((3, 1), 5.0), 8)
    pad = max(abs(5.0), 1.0) * 1e-6
    assert p.lower[0] == np.float32(5.0 - pad)
    assert p.upper[0] == np.float32(5.0 + pad)
    assert p.widened == 1


def test_quantile_lower_interpolation():
    vals = np.arange(101.0)
    p = dynamic_activation_params(vals[:, None], 8, 0.0, 0.99)
    assert p.upper[0] == brute_quantile(vals.tolist(), 0.99) == 99.0


def test_quantiles_per_feature_over_all_tokens():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 7, 3))
    p = dynamic_activation_params(x, 4, 0.1, 0.9)
    flat = x.reshape(-1, 3)
    for c in range(3):
        assert p.lower[c] == np.float32(brute_quantile(flat[:, c].tolist(), 0.1))
        assert p.upper[c] == np.float32(brute_quantile(flat[:, c].tolist(), 0.9))


def test_bad_percentiles_rejected():
    with pytest.raises(ConfigurationError):
        dynamic_activation_params(np.zeros((3, 1)), 4, 0.5, 0.5)


def test_thread_safety():
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(64, 8)) for _ in range(16)]
    serial = [quantize_dequantize(x, minmax_params(x, 4)) for x in xs]
    with ThreadPoolExecutor(4) as pool:
        threaded = list(pool.map(lambda x: quantize_dequantize(x, minmax_params(x, 4)), xs))
    assert all(np.array_equal(a, b) for a, b in zip(serial, threaded))

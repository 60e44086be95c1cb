import numpy as np
import pytest

from clq.calibration import CalibrationMode, accumulated_drift, collect_block, collect_naive, reference_taps
from clq.errors import SequencingError
from clq.io import load_calibration, save_calibration
from clq.model import Dims, QuantizedLayer, build_toy, forward, make_inputs
from clq.quantizer import minmax_params
from clq.state import QuantState

DIMS = Dims(dim=16, blocks=3, heads=2, ffn=32, tokens=6, cross_tokens=4)


@pytest.fixture(scope="module")
def toy():
    return build_toy(DIMS, seed=7)


@pytest.fixture(scope="module")
def inputs():
    return make_inputs(DIMS, 4, seed=8)


def naive_state(g, blocks, bits):
    state = QuantState(act_bits=bits)
    for ref in g.layer_refs(blocks):
        w = g.weight64(ref.name)
        state.add(ref.name, QuantizedLayer.from_weight(w, minmax_params(w, bits)))
    return state


def test_block_zero_equals_fp_taps(toy, inputs):
    calib = collect_block(toy, QuantState(act_bits=4), 0, inputs)
    _, fp = forward(toy, *inputs, taps="all")
    assert calib.mode is CalibrationMode.CROSS_BLOCK
    assert np.array_equal(calib.block_input, inputs[0])
    for name, rec in calib.records.items():
        assert np.array_equal(rec, fp[name].input)


def test_drifted_block_differs_from_fp(toy, inputs):
    calib = collect_block(toy, naive_state(toy, [0], 4), 1, inputs)
    _, fp = forward(toy, *inputs, taps="all")
    gaps = [np.abs(calib.records[n] - fp[n].input).mean() for n in calib.records]
    assert max(gaps) > 0


def test_sixteen_bit_prefix_matches_fp(toy, inputs):
    calib = collect_block(toy, naive_state(toy, [0], 16), 1, inputs)
    _, fp = forward(toy, *inputs, taps="all")
    for name, rec in calib.records.items():
        assert np.linalg.norm(rec - fp[name].input) / np.linalg.norm(fp[name].input) < 1e-2


def test_sequencing_enforced(toy, inputs):
    with pytest.raises(SequencingError):
        collect_block(toy, QuantState(act_bits=4), 2, inputs)
    with pytest.raises(SequencingError):
        collect_block(toy, naive_state(toy, [1], 4), 1, inputs)


def test_naive_matches_block_zero_and_counts(toy, inputs):
    sets = collect_naive(toy, inputs)
    cbc0 = collect_block(toy, QuantState(), 0, inputs)
    assert sum(len(s.records) for s in sets) == 10 * DIMS.blocks
    assert all(np.array_equal(sets[0].records[n], cbc0.records[n]) for n in cbc0.records)
    again = collect_naive(toy, inputs)
    for a, b in zip(sets, again):
        assert all(np.array_equal(a.records[n], b.records[n]) for n in a.records)


def test_records_belong_to_own_block(toy, inputs):
    sets = collect_naive(toy, inputs)
    for k, s in enumerate(sets):
        assert all(n.startswith(f"block{k}.") for n in s.records)
        assert s.block == k


def test_no_quantization_no_drift(toy, inputs):
    assert accumulated_drift(toy, QuantState(act_bits=4), inputs).tolist() == [0.0] * DIMS.blocks


def test_drift_causal(toy, inputs):
    partial = accumulated_drift(toy, naive_state(toy, [0], 4), inputs)
    full = accumulated_drift(toy, naive_state(toy, [0, 1, 2], 4), inputs)
    assert partial[0] == full[0] == 0.0
    assert partial[1] == full[1] > 0


def test_drift_oracle(toy, inputs):
    state = naive_state(toy, [0, 1, 2], 4)
    _, fp = forward(toy, *inputs, taps="all")
    _, q = state.forward(toy, *inputs, taps="all")
    want = [np.mean(np.abs(fp[f"block{k}.output"].input - q[f"block{k}.output"].input)) for k in range(3)]
    np.testing.assert_allclose(accumulated_drift(toy, state, inputs), want, rtol=0, atol=0)


def test_reference_taps_cover_everything(toy, inputs):
    ref = reference_taps(toy, inputs)
    assert len(ref) == 11 * DIMS.blocks


def test_calibration_round_trip(tmp_path, toy, inputs):
    calib = collect_block(toy, naive_state(toy, [0], 4), 1, inputs)
    save_calibration(tmp_path / "c", calib, dtype="f64")
    back = load_calibration(tmp_path / "c", reference=calib.reference, inputs=inputs)
    assert back.block == 1 and back.mode is CalibrationMode.CROSS_BLOCK
    assert np.array_equal(back.block_input, calib.block_input)
    assert all(np.array_equal(back.records[n], calib.records[n]) for n in calib.records)

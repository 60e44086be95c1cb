"""Calibration data collection, block by block.

Cross-block calibration gathers the inputs of block ``k``'s layers while
blocks ``0..k-1`` run quantized, so the statistics reflect the drifted
activations the deployed model will actually see. The naive alternative
collects every layer from a single full-precision pass.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import SequencingError
from .model import OUTPUT, SLOTS, ModelGraph, TapRecord, forward
from .state import QuantState


class CalibrationMode(str, enum.Enum):
    CROSS_BLOCK = "cross_block"
    NAIVE = "naive"


@dataclass
class CalibrationSet:
    block: int
    mode: CalibrationMode
    inputs: tuple[np.ndarray, np.ndarray]
    block_input: np.ndarray
    records: dict[str, np.ndarray]
    reference: TapRecord

    @property
    def cross(self) -> np.ndarray:
        return self.inputs[1]


def _block_taps(k: int) -> list[str]:
    return [f"block{k}.{s}" for s in SLOTS] + [f"block{k}.{OUTPUT}"]


def reference_taps(g: ModelGraph, inputs) -> TapRecord:
    """Full-precision taps of every layer and block output."""
    x, cross = inputs
    _, taps = forward(g, x, cross, taps="all")
    return taps


def _to_set(k, mode, inputs, taps, reference) -> CalibrationSet:
    records = {f"block{k}.{s}": taps[f"block{k}.{s}"].input for s in SLOTS}
    return CalibrationSet(k, mode, inputs, taps[f"block{k}.{OUTPUT}"].input, records, reference)


def collect_block(g: ModelGraph, state: QuantState, k: int, inputs, reference: TapRecord | None = None) -> CalibrationSet:
    """Calibration activations for block ``k`` with blocks ``0..k-1`` quantized."""
    missing = [j for j in range(k) if not state.is_block_quantized(j)]
    if missing:
        raise SequencingError(f"cannot calibrate block {k}: block {missing[0]} is not quantized yet")
    if reference is None:
        reference = reference_taps(g, inputs)
    x, cross = inputs
    prior = state.restricted(range(k))
    _, taps = prior.forward(g, x, cross, taps=_block_taps(k), stop_at=f"block{k}.{OUTPUT}")
    return _to_set(k, CalibrationMode.CROSS_BLOCK, inputs, taps, reference)


def collect_naive(g: ModelGraph, inputs, reference: TapRecord | None = None) -> list[CalibrationSet]:
    """One full-precision pass, split into per-block calibration sets."""
    if reference is None:
        reference = reference_taps(g, inputs)
    return [_to_set(k, CalibrationMode.NAIVE, inputs, reference, reference) for k in range(g.dims.blocks)]


def accumulated_drift(g: ModelGraph, state: QuantState, inputs) -> np.ndarray:
    """Mean absolute gap between FP and quantized hidden states entering each block."""
    x, cross = inputs
    names = [f"block{k}.{OUTPUT}" for k in range(g.dims.blocks)]
    _, fp = forward(g, x, cross, taps=names)
    _, q = state.forward(g, x, cross, taps=names)
    return np.array([float(np.mean(np.abs(fp[n].input - q[n].input))) for n in names])

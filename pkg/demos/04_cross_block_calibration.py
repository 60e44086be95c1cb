# Error accumulates block over block; calibrating on the drifted stream sees it.
import numpy as np

from clq.calibration import accumulated_drift, collect_block, collect_naive
from clq.model import QuantizedLayer, build_toy, make_inputs
from clq.quantizer import minmax_params
from clq.state import QuantState

g = build_toy(seed=3)
inputs = make_inputs(g.dims, batch=8, seed=3)

# naive W4A4 min-max everywhere
state = QuantState(act_bits=4)
for ref in g.layer_refs():
    w = g.weight64(ref.name)
    state.add(ref.name, QuantizedLayer.from_weight(w, minmax_params(w, 4)))
drift = accumulated_drift(g, state, inputs)
print("mean |FP - quantized| entering each block:", drift.round(4))

# quantizing only block 0 leaves block 0's own input untouched
only0 = state.restricted([0])
print("block 0 only:", accumulated_drift(g, only0, inputs).round(4))

# calibration for block 2: FP pass vs pass through quantized blocks 0 and 1
naive = collect_naive(g, inputs)[2]
cbc = collect_block(g, state.restricted([0, 1]), 2, inputs)
for name in ("block2.attn1.to_q", "block2.ffn.fc2"):
    gap = np.abs(cbc.records[name] - naive.records[name]).mean()
    print(f"{name}: calibration inputs differ by {gap:.4f} on average")

# blocks must go in order
try:
    collect_block(g, QuantState(act_bits=4), 2, inputs)
except Exception as exc:
    print(type(exc).__name__, "-", exc)

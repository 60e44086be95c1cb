# The toy transformer: named layers, taps, partial passes and files.
import tempfile
from pathlib import Path

import numpy as np

from clq.io import load_model, save_model
from clq.model import Dims, build_toy, forward, make_inputs

dims = Dims(dim=64, blocks=4, heads=4, ffn=256)
g = build_toy(dims, seed=0)  # 2% of input rows per layer scaled by 20..100
print(len(g.layer_names()), "linear layers, first block:", g.layer_names()[:10])

x, cross = make_inputs(dims, batch=2, seed=1)
y, taps = forward(g, x, cross, taps=["block1.attn1.to_out", "block2.output"])
print("output", y.shape, "taps", list(taps))

# every tap replays exactly from its recorded input
t = taps["block1.attn1.to_out"]
print("replay exact:", np.array_equal(t.input @ g.weight64("block1.attn1.to_out"), t.output))

# resume from block 2's input and stop early
h2 = taps["block2.output"].input
y_tail, _ = forward(g, h2, cross, start_block=2)
print("resume exact:", np.array_equal(y_tail, y))
fc1, _ = forward(g, x, cross, stop_at="block0.ffn.fc1")
print("stop_at block0.ffn.fc1 ->", fc1.shape)

# a loud weight row shows up as a column spike in the layer's output
w = np.abs(g.weights["block0.attn1.to_q"])
print("row peak / median row peak:", (w.max(axis=1).max() / np.median(w.max(axis=1))).round(1))

with tempfile.TemporaryDirectory() as tmp:
    n = save_model(Path(tmp) / "toy", g, dtype="f16")
    back = load_model(Path(tmp) / "toy")
    diff = max(np.abs(back.weights[k] - g.weights[k]).max() for k in g.layer_names())
    print(f"f16 file {n} bytes, worst round-trip diff {diff:.2e}")

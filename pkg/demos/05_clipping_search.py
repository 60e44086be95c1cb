# Pick a downstream target, then search shared clipping percentiles against it.
import numpy as np

from clq.calibration import collect_block
from clq.clps import SearchSpace, find_target_layer, grid_search
from clq.model import LayerRef, build_toy, make_inputs
from clq.rotation import batch_mean, build_spec, outlier_scores
from clq.state import QuantState

g = build_toy(seed=5)
inputs = make_inputs(g.dims, batch=8, seed=5)
state = QuantState(act_bits=4)
calib = collect_block(g, state, 0, inputs)

opt = LayerRef(0, "attn1.to_v")
spec = build_spec(outlier_scores(batch_mean(calib.records[opt.name]), "absmax"))

# perturb opt with a naive W4A4 version and see which later layer moves most
choice = find_target_layer(g, state, opt, calib, perturb_bits=4, spec=spec)
top = sorted(choice.shifts.items(), key=lambda kv: -kv[1])[:4]
print("target:", choice.layer, "largest shifts:", [(n, round(s, 4)) for n, s in top])
print("last block layers target the block output:",
      find_target_layer(g, state, LayerRef(3, "ffn.fc1"), calib).layer)

# squared error at the target for every (p_lo, p_hi) pair
for space in (SearchSpace(0.0, 0.01, 16), SearchSpace(0.0, 0.1, 8)):
    res = grid_search(g, state, opt, choice.layer, calib, space, bits=4, spec=spec)
    base = grid_search(g, state, opt, choice.layer, calib, SearchSpace(0.0, 0.0), bits=4, spec=spec)
    print(f"gamma={space.gamma}: best ({res.best_lo:.4f}, {res.best_hi:.4f}) objective {res.objective:.2f}"
          f" vs min-max {base.objective:.2f}, {res.evaluated} distinct candidates")

# one percentile pair per layer, so channel bounds differ only through their own quantiles
print("per-column upper bounds:", np.round(res.params.upper[:6], 3))

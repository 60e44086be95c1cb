# Outlier-aware channel swap plus block Hadamard, absorbed into the weight.
import numpy as np

from clq.quantizer import minmax_params, quantize_dequantize
from clq.rotation import (
    OutlierMetric,
    RotationSpec,
    absorb_into_weight,
    batch_mean,
    build_spec,
    build_swap,
    fht_blocked,
    materialize_g,
    outlier_scores,
)

rng = np.random.default_rng(1)

# activations (B, N, D) with a few channels far louder than the rest
x = rng.normal(size=(8, 16, 64))
x[..., [5, 17, 40]] *= 30
stat = batch_mean(x)  # average over the batch: (N, D)
for m in OutlierMetric:
    top = np.argsort(-outlier_scores(stat, m))[:3]
    print(f"{m.value:>10} picks channels {sorted(top.tolist())}")

# the swap moves the high scorers into the left half; ties keep index order
print("swap for scores [1, 9, 3, 7]:", build_swap([1, 9, 3, 7]))
spec = build_spec(outlier_scores(stat, "absmax"))
print("block size", spec.block_size, "stored bytes", RotationSpec.nbytes(spec.dim))

# the fast transform is x @ G without ever building G
g = materialize_g(spec)
print("fast vs dense max diff", np.abs(fht_blocked(x, spec) - x @ g).max())
print("orthogonality max|GG^T - I|", np.abs(g @ g.T - np.eye(64)).max())

# absorb G^T into W: (xG)(G^T W) == xW up to rounding
w = rng.normal(size=(64, 32)) / 8
y = x @ w
y_rot = fht_blocked(x, spec) @ absorb_into_weight(w, spec)
print("output rel diff", np.linalg.norm(y_rot - y) / np.linalg.norm(y))

# what the rotation buys: each weight column spans every input row, so a few
# loud rows stretch every column's 4-bit grid; mixing spreads them out
w[[5, 17, 40]] *= 50
wr = absorb_into_weight(w, spec)
plain = np.mean((quantize_dequantize(w, minmax_params(w, 4)) - w) ** 2)
back = absorb_into_weight(quantize_dequantize(wr, minmax_params(wr, 4)), spec, inverse=True)
rotated = np.mean((back - w) ** 2)
print(f"W4 mse without rotation {plain:.5f}, with rotation {rotated:.5f}")

# Uniform asymmetric quantization, one channel per column.
import numpy as np

from clq.quantizer import (
    QuantParams,
    dequantize,
    dynamic_activation_params,
    minmax_params,
    pack_codes,
    quantize_codes,
    quantize_dequantize,
    quantize_pack,
)

# a single channel with bounds [0, 1] at 2 bits has four levels: 0, 1/3, 2/3, 1
p = QuantParams([0.0], [1.0], 2)
x = np.array([[0.0], [0.3], [0.5], [0.9], [5.0]])
print("codes    ", quantize_codes(x, p).ravel())
print("fake-quant", quantize_dequantize(x, p).ravel())  # 5.0 clips to the upper bound

# per-channel min-max bounds for a weight stored as (D_in, D_out)
rng = np.random.default_rng(0)
w = rng.normal(size=(64, 8))
w[3] *= 40  # one loud input row stretches every column's range
p4 = minmax_params(w, 4)
err = quantize_dequantize(w, p4) - w
print("W4 mse", np.mean(err**2), " step per column", ((p4.upper - p4.lower) / 15).round(3))

# real packing: two 4-bit codes per byte, low nibble first
print("pack [3, 7] ->", pack_codes(np.array([3, 7]), 4).hex())
q = quantize_pack(w, p4)
print("packed", len(q.data), "bytes for", w.size, "weights; params", p4.nbytes(8), "bytes")
assert np.array_equal(dequantize(q), quantize_dequantize(w, p4))

# activations get bounds at run time, per feature over every token in the batch
act = rng.standard_t(2, size=(4, 16, 8))
full = dynamic_activation_params(act, 8)
trimmed = dynamic_activation_params(act, 8, 0.01, 0.99)
print("min-max upper", full.upper.round(2))
print("p99 upper    ", trimmed.upper.round(2))

# a constant channel gets a tiny pad so the scale stays finite
print(dynamic_activation_params(np.full((3, 1), 5.0), 8).lower, "widened channels:",
      dynamic_activation_params(np.full((3, 1), 5.0), 8).widened)

"""Reference implementations written independently of the library code paths."""
import math

import numpy as np

from clq.model import QuantizedLayer, forward_quantized
from clq.quantizer import QuantParams
from clq.rotation import absorb_into_weight


def scalar_fake_quant(x, l, r, n):
    """Plain-Python clip / scale / round / rescale; Python's round() is half-to-even."""
    levels = 2**n - 1
    c = min(max(x, l), r)
    code = round((c - l) / (r - l) * levels)
    return l + code * (r - l) / levels


def brute_quantile(values, p):
    s = sorted(values)
    return s[math.floor(p * (len(s) - 1) + 1e-9)]


def sylvester(b):
    """Normalized Hadamard matrix by explicit Kronecker doubling."""
    h = np.array([[1.0]])
    while h.shape[0] < b:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(b)


def dense_g(spec):
    """G = S H with column k of S equal to e_{swap[k]} and H block diagonal."""
    d, b = spec.dim, spec.block_size
    s = np.zeros((d, d))
    for k, src in enumerate(spec.swap):
        s[src, k] = 1.0
    h = np.zeros((d, d))
    for i in range(0, d, b):
        h[i:i + b, i:i + b] = sylvester(b)
    return s @ h


def oracle_params(w, p_lo, p_hi, bits):
    """Column quantiles by explicit sorting and floor indexing, then the pad rule."""
    m = w.shape[0]
    lo_i = math.floor(p_lo * (m - 1) + 1e-9)
    hi_i = math.floor(p_hi * (m - 1) + 1e-9)
    lo, hi = [], []
    for c in range(w.shape[1]):
        col = sorted(w[:, c].tolist())
        l, r = col[lo_i], col[hi_i]
        if l == r:
            pad = max(abs(l), 1.0) * 1e-6
            l, r = l - pad, r + pad
        lo.append(l)
        hi.append(r)
    return QuantParams(lo, hi, bits)


def oracle_codes(w, params):
    lo = params.lower.astype(np.float64)
    hi = params.upper.astype(np.float64)
    return np.rint((np.clip(w, lo, hi) - lo) / (hi - lo) * params.levels).astype(np.int64)


def oracle_search(g, state, opt, target, calib, space, bits, spec):
    """Evaluate every grid point from scratch; the tie rule is applied by sorting."""
    w = g.weight64(opt.name)
    w = w if spec is None else absorb_into_weight(w, spec)
    rots = dict(state.rotations)
    if spec is not None:
        rots[opt.name] = spec
    ref = calib.reference[target.name].output
    rows = []
    for lo in space.lo_grid():
        for hi in space.hi_grid():
            params = oracle_params(w, lo, hi, bits)
            t = oracle_codes(w, params) / params.levels
            deq = params.lower.astype(np.float64) * (1.0 - t) + params.upper.astype(np.float64) * t
            layers = {**state.layers, opt.name: QuantizedLayer(deq, params)}
            y, _ = forward_quantized(g, layers, rots, calib.block_input, calib.cross, state.act_bits,
                                     act_range=state.act_range, start_block=opt.block, stop_at=target.name)
            # lowest objective, then widest range, then smallest p_lo
            rows.append((float(np.sum((ref - y) ** 2)), -(float(hi) - float(lo)), float(lo), float(hi)))
    obj, _, lo, hi = min(rows)
    return lo, hi, obj

"""Toy DiT-style transformer used as the quantization substrate.

Each block is pre-norm: self-attention (``attn1``), cross-attention against a
fixed context (``attn2``) and a GELU feed-forward (``ffn``), with residual
adds. Linear weights are stored as float32 ``(D_in, D_out)`` matrices and the
forward pass computes ``x @ W`` in float64. LayerNorm, softmax and GELU always
run at full precision.
"""
from __future__ import annotations

import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError
from .quantizer import QuantParams, dynamic_activation_params, quantize_dequantize
from .rotation import RotationSpec, absorb_into_weight, fht_blocked

SLOTS = (
    "attn1.to_q",
    "attn1.to_k",
    "attn1.to_v",
    "attn1.to_out",
    "attn2.to_q",
    "attn2.to_k",
    "attn2.to_v",
    "attn2.to_out",
    "ffn.fc1",
    "ffn.fc2",
)
OUTPUT = "output"
_SLOT_INDEX = {s: i for i, s in enumerate(SLOTS)} | {OUTPUT: len(SLOTS)}
LN_EPS = 1e-5


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Dims:
    dim: int = 64
    blocks: int = 4
    heads: int = 4
    ffn: int = 256
    tokens: int = 16
    cross_tokens: int = 8

    def __post_init__(self):
        for name in ("dim", "ffn"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 8 and _is_pow2(int(v))):
                raise ConfigurationError(f"{name} must be a power of two >= 8, got {v}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"heads={self.heads} must divide dim={self.dim}")
        if self.blocks < 1 or self.tokens < 1 or self.cross_tokens < 1:
            raise ConfigurationError("blocks, tokens and cross_tokens must be positive")

    def layer_shape(self, slot: str) -> tuple[int, int]:
        if slot == "ffn.fc1":
            return self.dim, self.ffn
        if slot == "ffn.fc2":
            return self.ffn, self.dim
        return self.dim, self.dim

    def to_dict(self) -> dict:
        return {k: int(getattr(self, k)) for k in ("dim", "blocks", "heads", "ffn", "tokens", "cross_tokens")}


@dataclass(frozen=True, order=True)
class LayerRef:
    """A named linear layer, or the ``output`` sentinel of a block."""

    block: int
    slot: str = field(compare=False)
    _order: int = field(default=-1, repr=False)

    def __post_init__(self):
        if self.slot not in _SLOT_INDEX:
            raise ConfigurationError(f"unknown layer slot {self.slot!r}")
        object.__setattr__(self, "_order", _SLOT_INDEX[self.slot])

    @property
    def name(self) -> str:
        return f"block{self.block}.{self.slot}"

    @property
    def is_output(self) -> bool:
        return self.slot == OUTPUT

    @property
    def position(self) -> tuple[int, int]:
        return self.block, self._order

    @classmethod
    def parse(cls, name: str) -> LayerRef:
        head, _, slot = name.partition(".")
        if not head.startswith("block") or not head[5:].isdigit():
            raise ConfigurationError(f"cannot parse layer name {name!r}")
        return cls(int(head[5:]), slot)

    def __str__(self):
        return self.name


class Tap(NamedTuple):
    input: np.ndarray
    output: np.ndarray


TapRecord = dict  # name -> Tap


@dataclass(frozen=True, eq=False)
class ModelGraph:
    dims: Dims
    weights: Mapping[str, np.ndarray]
    seed: int | None = None
    outlier_frac: float = 0.0

    def __post_init__(self):
        weights = {}
        for ref in self.layer_refs():
            if ref.name not in self.weights:
                raise ConfigurationError(f"missing weight {ref.name}")
            w = np.asarray(self.weights[ref.name], dtype=np.float32)
            if w.shape != self.dims.layer_shape(ref.slot):
                raise ConfigurationError(
                    f"{ref.name}: shape {w.shape}, expected {self.dims.layer_shape(ref.slot)}"
                )
            w.flags.writeable = False
            weights[ref.name] = w
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "_w64", {k: v.astype(np.float64) for k, v in weights.items()})

    def layer_refs(self, blocks: Iterable[int] | None = None) -> list[LayerRef]:
        """Linear layers in dataflow order."""
        blocks = range(self.dims.blocks) if blocks is None else blocks
        return [LayerRef(k, s) for k in blocks for s in SLOTS]

    def layer_names(self) -> list[str]:
        return [r.name for r in self.layer_refs()]

    def weight64(self, name: str) -> np.ndarray:
        return self._w64[name]

    def num_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def with_weights(self, updates: Mapping[str, np.ndarray]) -> ModelGraph:
        return ModelGraph(self.dims, {**self.weights, **updates}, self.seed, self.outlier_frac)


def build_toy(
    dims: Dims | None = None,
    seed: int = 0,
    outlier_frac: float = 0.02,
    outlier_scale: tuple[float, float] = (20.0, 100.0),
) -> ModelGraph:
    """Random Gaussian weights with a few input channels blown up per layer.

    Each layer gets ``round(outlier_frac * D_in)`` (at least one when the
    fraction is positive) input rows scaled by a factor drawn uniformly from
    ``outlier_scale``. The layer is then rescaled to the Frobenius norm a
    plain ``N(0, 1/D_in)`` draw has in expectation, so outliers skew the
    weight distribution without blowing up the residual stream or saturating
    attention.
    """
    dims = dims or Dims()
    if not 0.0 <= outlier_frac < 1.0:
        raise ConfigurationError(f"outlier_frac must be in [0, 1), got {outlier_frac}")
    rng = np.random.default_rng(seed)
    weights = {}
    for k in range(dims.blocks):
        for slot in SLOTS:
            d_in, d_out = dims.layer_shape(slot)
            w = rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)
            n_out = int(round(outlier_frac * d_in))
            if outlier_frac > 0:
                n_out = max(1, n_out)
            if n_out:
                rows = rng.choice(d_in, size=n_out, replace=False)
                w[rows] *= rng.uniform(*outlier_scale, size=n_out)[:, None]
                w *= math.sqrt(d_out) / np.linalg.norm(w)
            weights[f"block{k}.{slot}"] = w.astype(np.float32)
    return ModelGraph(dims, weights, seed=seed, outlier_frac=outlier_frac)


def make_inputs(dims: Dims, batch: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic hidden-state input and cross-attention context."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, dims.tokens, dims.dim))
    cross = rng.standard_normal((batch, dims.cross_tokens, dims.dim))
    return x, cross


# --- forward -------------------------------------------------------------------


def layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x * x * x)))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = q.shape
    m = k.shape[1]
    dh = d // heads
    qh = q.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b, m, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(b, m, heads, dh).transpose(0, 2, 1, 3)
    s = (qh @ kh) / math.sqrt(dh)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return (p @ vh).transpose(0, 2, 1, 3).reshape(b, n, d)


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """The one matmul every layer goes through, so taps replay bit-exactly."""
    return np.matmul(x, w)


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """A layer's fake-quantized (rotation-absorbed) weight and its params."""

    weight: np.ndarray
    params: QuantParams
    act_bits: int | None = None  # overrides the pass-wide activation bits

    def __post_init__(self):
        # one canonical layout so matmul rounding does not depend on provenance
        w = np.ascontiguousarray(self.weight, dtype=np.float64)
        w.flags.writeable = False
        object.__setattr__(self, "weight", w)

    @classmethod
    def from_weight(cls, w_absorbed, params: QuantParams, act_bits: int | None = None) -> QuantizedLayer:
        return cls(quantize_dequantize(w_absorbed, params), params, act_bits)


class _Halt(Exception):
    pass


class _Executor:
    def __init__(self, g, layers, rotations, act_bits, act_range, taps, stop_at):
        self.g = g
        self.layers = layers or {}
        self.rotations = rotations or {}
        self.act_bits = act_bits
        self.act_range = act_range
        self.taps = taps
        self.stop_at = stop_at
        self.record: dict[str, Tap] = {}
        self.halted_output = None

    def linear(self, name: str, x: np.ndarray) -> np.ndarray:
        q = self.layers.get(name)
        spec = self.rotations.get(name)
        if q is None and spec is None:
            y = linear(x, self.g.weight64(name))
        else:
            xr = x if spec is None else fht_blocked(x, spec)
            if q is None:
                y = linear(xr, absorb_into_weight(self.g.weight64(name), spec))
            else:
                bits = q.act_bits if q.act_bits is not None else self.act_bits
                if bits is not None:
                    p_lo, p_hi = self.act_range
                    aparams = dynamic_activation_params(xr, bits, p_lo, p_hi)
                    xr = quantize_dequantize(xr, aparams)
                y = linear(xr, q.weight)
        self._emit(name, x, y)
        return y

    def _emit(self, name, x, y):
        if self.taps is not None and (self.taps is ALL or name in self.taps):
            self.record[name] = Tap(x, y)
        if name == self.stop_at:
            self.halted_output = y
            raise _Halt

    def block(self, k: int, h: np.ndarray, cross: np.ndarray) -> np.ndarray:
        heads = self.g.dims.heads
        p = f"block{k}."
        h_in = h
        a = layer_norm(h)
        att = attention(
            self.linear(p + "attn1.to_q", a),
            self.linear(p + "attn1.to_k", a),
            self.linear(p + "attn1.to_v", a),
            heads,
        )
        h = h + self.linear(p + "attn1.to_out", att)
        a = layer_norm(h)
        att = attention(
            self.linear(p + "attn2.to_q", a),
            self.linear(p + "attn2.to_k", cross),
            self.linear(p + "attn2.to_v", cross),
            heads,
        )
        h = h + self.linear(p + "attn2.to_out", att)
        a = layer_norm(h)
        h = h + self.linear(p + "ffn.fc2", gelu(self.linear(p + "ffn.fc1", a)))
        self._emit(p + OUTPUT, h_in, h)
        return h


class _All:
    def __repr__(self):
        return "ALL"


ALL = _All()


def _check_inputs(g: ModelGraph, x, cross) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    cross = np.asarray(cross, dtype=np.float64)
    d = g.dims.dim
    if x.ndim != 3 or x.shape[2] != d:
        raise ConfigurationError(f"input must be (B, N, {d}), got {x.shape}")
    if cross.ndim != 3 or cross.shape[2] != d or cross.shape[0] != x.shape[0]:
        raise ConfigurationError(f"cross context must be ({x.shape[0]}, M, {d}), got {cross.shape}")
    return x, cross


def _normalize_taps(taps):
    if taps is None or taps is ALL:
        return taps
    if taps == "all":
        return ALL
    return frozenset(str(t) for t in taps)


def _execute(g, x, cross, layers, rotations, act_bits, act_range, taps, start_block, stop_at):
    x, cross = _check_inputs(g, x, cross)
    if not 0 <= start_block < g.dims.blocks:
        raise ConfigurationError(f"start_block {start_block} out of range")
    for name, spec in (rotations or {}).items():
        d_in = g.weights[name].shape[0]
        if spec.dim != d_in:
            raise ConfigurationError(f"{name}: rotation dim {spec.dim} != layer input dim {d_in}")
    for name, q in (layers or {}).items():
        if q.weight.shape != g.weights[name].shape or q.params.channels != q.weight.shape[1]:
            raise ConfigurationError(f"{name}: quantized weight inconsistent with layer shape")
    ex = _Executor(g, layers, rotations, act_bits, act_range, _normalize_taps(taps),
                   None if stop_at is None else str(stop_at))
    h = x
    try:
        for k in range(start_block, g.dims.blocks):
            h = ex.block(k, h, cross)
    except _Halt:
        return ex.halted_output, ex.record
    return h, ex.record


def forward(g: ModelGraph, x, cross, taps=None, *, start_block: int = 0, stop_at=None):
    """Full-precision forward pass.

    ``taps`` is ``None``, ``"all"`` or a collection of layer names (block
    sentinels ``block{k}.output`` included). ``start_block`` treats ``x`` as
    the hidden state entering that block. With ``stop_at`` the pass ends
    right after that layer and its output is returned instead.
    """
    return _execute(g, x, cross, None, None, None, (0.0, 1.0), taps, start_block, stop_at)


def forward_quantized(
    g: ModelGraph,
    layers: Mapping[str, QuantizedLayer] | None,
    rotations: Mapping[str, RotationSpec] | None,
    x,
    cross,
    act_bits: int | None = None,
    taps=None,
    *,
    act_range: tuple[float, float] = (0.0, 1.0),
    start_block: int = 0,
    stop_at=None,
):
    """Forward pass with fake-quantized layers.

    A layer in ``layers`` has its (rotated) input dynamically quantized at
    ``act_bits`` and multiplied by the stored dequantized weight. A layer with
    only a rotation runs at full precision through ``x G`` and ``G^T W``.
    """
    return _execute(g, x, cross, layers, rotations, act_bits, act_range, taps, start_block, stop_at)

"""Asymmetric uniform fake quantization with per-channel bounds.

A value ``x`` in a channel with bounds ``[l, r]`` at ``n`` bits maps to the
integer code ``round((clip(x, l, r) - l) / (r - l) * (2**n - 1))`` and back to
``l + code * (r - l) / (2**n - 1)``. Rounding is half-to-even (``np.rint``).

Bounds are stored as float32 so that a serialized artifact reproduces the
in-memory dequantized weights bit for bit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, UnsupportedPackingError

log = logging.getLogger(__name__)

PACKABLE_BITS = (4, 8)
# widening factor for channels whose lower and upper bound coincide
DEGENERATE_PAD = 1e-6


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Per-channel clipping bounds and bit-width.

    ``axis`` names the channel axis of the tensor the params apply to.
    ``widened`` counts channels whose bounds were padded apart because the
    channel was constant.
    """

    lower: np.ndarray
    upper: np.ndarray
    bits: int
    axis: int = -1
    granularity: str = "per_channel"
    widened: int = 0

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float32))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float32))
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ConfigurationError(
                f"lower/upper must be 1-D vectors of equal length, got {lower.shape} and {upper.shape}"
            )
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise DataError("quantization bounds must be finite")
        if not np.all(lower < upper):
            bad = int(np.flatnonzero(~(lower < upper))[0])
            raise ConfigurationError(
                f"channel {bad}: lower bound {lower[bad]} is not below upper bound {upper[bad]}"
            )
        if int(self.bits) < 2 or int(self.bits) > 16:
            raise ConfigurationError(f"bits must be in [2, 16], got {self.bits}")
        if self.granularity != "per_channel":
            raise ConfigurationError(f"unsupported granularity {self.granularity!r}")
        lower.flags.writeable = False
        upper.flags.writeable = False
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "bits", int(self.bits))

    @property
    def channels(self) -> int:
        return self.lower.shape[0]

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.axis == other.axis
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def to_bytes(self) -> bytes:
        """Little-endian f32 lower, f32 upper, u8 bits."""
        return (
            self.lower.astype("<f4").tobytes()
            + self.upper.astype("<f4").tobytes()
            + np.uint8(self.bits).tobytes()
        )

    @classmethod
    def from_bytes(cls, buf: bytes, channels: int, axis: int = -1) -> QuantParams:
        expected = 8 * channels + 1
        if len(buf) != expected:
            raise FormatError(f"params payload is {len(buf)} bytes, expected {expected}")
        lower = np.frombuffer(buf, dtype="<f4", count=channels, offset=0)
        upper = np.frombuffer(buf, dtype="<f4", count=channels, offset=4 * channels)
        return cls(lower, upper, int(buf[-1]), axis=axis)

    @staticmethod
    def nbytes(channels: int) -> int:
        return 8 * channels + 1


def _channel_view(x: np.ndarray, params: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    axis = params.axis % x.ndim
    if x.shape[axis] != params.channels:
        raise ConfigurationError(
            f"tensor has {x.shape[axis]} channels on axis {axis}, params have {params.channels}"
        )
    shape = [1] * x.ndim
    shape[axis] = params.channels
    lo = params.lower.astype(np.float64).reshape(shape)
    hi = params.upper.astype(np.float64).reshape(shape)
    return lo, hi


def _require_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        n_bad = int(np.count_nonzero(~np.isfinite(x)))
        raise DataError(f"tensor contains {n_bad} non-finite element(s)")


def quantize_codes(x, params: QuantParams) -> np.ndarray:
    """Integer codes of ``x`` as int64."""
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x)
    lo, hi = _channel_view(x, params)
    scaled = (np.clip(x, lo, hi) - lo) / (hi - lo) * params.levels
    return np.rint(scaled).astype(np.int64)


def dequantize_codes(codes, params: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    lo, hi = _channel_view(codes, params)
    t = codes / params.levels
    # convex form keeps code 0 -> l and code max -> r exact
    return lo * (1.0 - t) + hi * t


def quantize_dequantize(x, params: QuantParams) -> np.ndarray:
    """Fake-quantize ``x`` channel-wise; returns float64 of the same shape."""
    return dequantize_codes(quantize_codes(x, params), params)


# --- packing -----------------------------------------------------------------


def packed_nbytes(count: int, bits: int) -> int:
    if bits == 4:
        return (count + 1) // 2
    if bits == 8:
        return count
    raise UnsupportedPackingError(f"cannot pack {bits}-bit codes; only 4 and 8 are packable")


def pack_codes(codes, bits: int) -> bytes:
    """Pack codes in row-major order; 4-bit pairs go low nibble first."""
    flat = np.asarray(codes).reshape(-1)
    packed_nbytes(flat.size, bits)
    if flat.size and (flat.min() < 0 or flat.max() > (1 << bits) - 1):
        raise DataError(f"codes out of range for {bits}-bit packing")
    flat = flat.astype(np.uint8)
    if bits == 8:
        return flat.tobytes()
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_codes(data: bytes, bits: int, count: int) -> np.ndarray:
    expected = packed_nbytes(count, bits)
    if len(data) != expected:
        raise FormatError(f"packed payload is {len(data)} bytes, expected {expected} for {count} codes")
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        return raw.copy()
    out = np.empty(2 * raw.size, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    if count % 2 and out[-1] != 0:
        raise FormatError("non-zero padding nibble in 4-bit payload")
    return out[:count]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Packed integer codes plus the params needed to dequantize them."""

    data: bytes
    shape: tuple
    params: QuantParams
    rotation: object | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        count = math.prod(self.shape)
        if len(self.data) != packed_nbytes(count, self.params.bits):
            raise FormatError(
                f"payload of {len(self.data)} bytes does not fit shape {self.shape} at {self.params.bits} bits"
            )

    def codes(self) -> np.ndarray:
        return unpack_codes(self.data, self.params.bits, math.prod(self.shape)).reshape(self.shape)


def quantize_pack(x, params: QuantParams, rotation=None) -> QuantizedTensor:
    if params.bits not in PACKABLE_BITS:
        raise UnsupportedPackingError(
            f"{params.bits}-bit quantization is simulate-only; pack supports {PACKABLE_BITS}"
        )
    x = np.asarray(x, dtype=np.float64)
    codes = quantize_codes(x, params)
    return QuantizedTensor(pack_codes(codes, params.bits), x.shape, params, rotation)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return dequantize_codes(q.codes(), q.params)


# --- bound estimation ----------------------------------------------------------


def order_statistic_index(p: float, m: int) -> int:
    """Index of the lower-interpolated ``p`` quantile in a sorted sample of size ``m``."""
    # guard against p*(m-1) landing a hair below an integer
    return min(m - 1, max(0, int(math.floor(p * (m - 1) + 1e-9))))


def _pad_degenerate(lower: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    lower = lower.astype(np.float32)
    upper = upper.astype(np.float32)
    bad = ~(lower < upper)
    n_bad = int(np.count_nonzero(bad))
    if n_bad:
        center = ((lower[bad].astype(np.float64) + upper[bad]) / 2.0)
        pad = np.maximum(np.abs(center), 1.0) * DEGENERATE_PAD
        lower[bad] = (center - pad).astype(np.float32)
        upper[bad] = (center + pad).astype(np.float32)
        log.debug("widened %d constant channel(s)", n_bad)
    return lower, upper, n_bad


def params_from_bounds(lower, upper, bits: int, axis: int = -1) -> QuantParams:
    """Build params, padding apart any channel with ``lower >= upper``."""
    lower, upper, n_bad = _pad_degenerate(np.asarray(lower), np.asarray(upper))
    return QuantParams(lower, upper, bits, axis=axis, widened=n_bad)


def channel_matrix(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Reshape ``x`` to (samples, channels) with channels taken from ``axis``."""
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    return x.reshape(-1, x.shape[-1])


def percentile_params(x, bits: int, p_lo: float = 0.0, p_hi: float = 1.0, axis: int = -1) -> QuantParams:
    """Per-channel quantile bounds ``(quantile(p_lo), quantile(p_hi))``."""
    if not (0.0 <= p_lo < p_hi <= 1.0):
        raise ConfigurationError(f"need 0 <= p_lo < p_hi <= 1, got ({p_lo}, {p_hi})")
    mat = channel_matrix(x, axis)
    if mat.shape[0] == 0:
        raise DataError("cannot derive bounds from an empty tensor")
    _require_finite(mat)
    if p_lo == 0.0 and p_hi == 1.0:
        lower, upper = mat.min(axis=0), mat.max(axis=0)
    else:
        m = mat.shape[0]
        srt = np.sort(mat, axis=0)
        lower = srt[order_statistic_index(p_lo, m)]
        upper = srt[order_statistic_index(p_hi, m)]
    return params_from_bounds(lower, upper, bits, axis=axis)


def dynamic_activation_params(x, bits: int, p_lo: float = 0.0, p_hi: float = 1.0) -> QuantParams:
    """Bounds for an activation computed from the live input, one pair per feature."""
    return percentile_params(x, bits, p_lo, p_hi, axis=-1)


def minmax_params(x, bits: int, axis: int = -1) -> QuantParams:
    return percentile_params(x, bits, 0.0, 1.0, axis=axis)

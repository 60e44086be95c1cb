"""Static outlier-aware rotation: channel swap followed by a block Hadamard.

The rotation is ``G = S @ H`` where ``S`` permutes channels so that the
highest-scoring half sits on the left and ``H`` is block diagonal with
orthonormal Walsh-Hadamard blocks. Only the swap vector and block size are
stored; ``H`` is regenerated on the fly and applied with a fast transform.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DataError, FormatError, ResourceError
from .quantizer import order_statistic_index

MATERIALIZE_CAP = 4096


class OutlierMetric(str, enum.Enum):
    ABS_MAX = "absmax"
    PERCENTILE = "percentile"
    TOP_K_MEAN = "topk"
    RANGE = "range"
    PAR = "par"


PERCENTILE_Q = 0.99
TOP_K_FRACTION = 0.01


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True, eq=False)
class RotationSpec:
    """Swap vector plus Hadamard block size.

    ``swap[k]`` is the source channel placed at position ``k``.
    """

    swap: np.ndarray
    block_size: int
    dim: int

    def __post_init__(self):
        swap = np.asarray(self.swap, dtype=np.int64).reshape(-1)
        dim, b = int(self.dim), int(self.block_size)
        if not _is_pow2(dim):
            raise ConfigurationError(f"rotation dim must be a power of two, got {dim}")
        if not _is_pow2(b) or dim % b:
            raise ConfigurationError(f"block size {b} must be a power of two dividing {dim}")
        if swap.shape != (dim,) or not np.array_equal(np.sort(swap), np.arange(dim)):
            raise ConfigurationError("swap is not a permutation of 0..dim-1")
        swap.flags.writeable = False
        object.__setattr__(self, "swap", swap)
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "block_size", b)

    @classmethod
    def identity(cls, dim: int, block_size: int = 1) -> RotationSpec:
        return cls(np.arange(dim), block_size, dim)

    def inverse_swap(self) -> np.ndarray:
        inv = np.empty_like(self.swap)
        inv[self.swap] = np.arange(self.dim)
        return inv

    def __eq__(self, other):
        if not isinstance(other, RotationSpec):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.block_size == other.block_size
            and np.array_equal(self.swap, other.swap)
        )

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.dim, self.block_size) + self.swap.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> RotationSpec:
        if len(buf) < 8:
            raise FormatError("rotation payload shorter than its header")
        dim, b = struct.unpack_from("<II", buf)
        if len(buf) != 8 + 4 * dim:
            raise FormatError(f"rotation payload is {len(buf)} bytes, expected {8 + 4 * dim}")
        swap = np.frombuffer(buf, dtype="<u4", offset=8, count=dim).astype(np.int64)
        try:
            return cls(swap, b, dim)
        except ConfigurationError as exc:
            raise FormatError(f"invalid rotation payload: {exc}") from exc

    @staticmethod
    def nbytes(dim: int) -> int:
        return 8 + 4 * dim


def batch_mean(x) -> np.ndarray:
    """Average a (B, N, D) activation over the batch axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ConfigurationError(f"expected a (B, N, D) tensor, got shape {x.shape}")
    if x.shape[0] == 0:
        raise DataError("empty batch")
    return x.mean(axis=0)


def outlier_scores(stat, metric: OutlierMetric | str = OutlierMetric.ABS_MAX) -> np.ndarray:
    """Score each channel (column) of an (N, D) statistic."""
    metric = OutlierMetric(metric)
    stat = np.asarray(stat, dtype=np.float64)
    if stat.ndim != 2 or stat.shape[0] < 1:
        raise ConfigurationError(f"expected an (N, D) matrix with N >= 1, got shape {stat.shape}")
    if not np.all(np.isfinite(stat)):
        raise DataError("statistic contains non-finite values")
    mag = np.abs(stat)
    n = stat.shape[0]
    if metric is OutlierMetric.ABS_MAX:
        return mag.max(axis=0)
    if metric is OutlierMetric.PERCENTILE:
        return np.sort(mag, axis=0)[order_statistic_index(PERCENTILE_Q, n)]
    if metric is OutlierMetric.TOP_K_MEAN:
        k = max(1, int(math.floor(TOP_K_FRACTION * n)))
        return np.sort(mag, axis=0)[n - k:].mean(axis=0)
    if metric is OutlierMetric.RANGE:
        return stat.max(axis=0) - stat.min(axis=0)
    # peak-to-average ratio; an all-zero channel scores 0
    peak = mag.max(axis=0)
    avg = mag.mean(axis=0)
    out = np.zeros_like(peak)
    np.divide(peak, avg, out=out, where=avg > 0)
    return out


def build_swap(scores) -> np.ndarray:
    """Order channels by descending score, ties by ascending index.

    The first half of the result holds the higher-scoring channels.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size % 2:
        raise ConfigurationError(f"channel count must be even, got {scores.size}")
    return np.lexsort((np.arange(scores.size), -scores))


def build_spec(scores, block_size: int | None = None) -> RotationSpec:
    """Swap from ``scores`` with two Hadamard blocks unless ``block_size`` is given."""
    swap = build_swap(scores)
    dim = swap.size
    return RotationSpec(swap, block_size or max(1, dim // 2), dim)


def _wht_blocks(x: np.ndarray, b: int) -> np.ndarray:
    """Orthonormal Walsh-Hadamard (Sylvester order) on contiguous column blocks of width ``b``."""
    lead = x.shape[:-1]
    y = x.reshape(-1, x.shape[-1] // b, b).copy()
    h = 1
    while h < b:
        y = y.reshape(y.shape[0], y.shape[1], b // (2 * h), 2, h)
        a = y[:, :, :, 0, :]
        c = y[:, :, :, 1, :]
        y = np.stack((a + c, a - c), axis=3)
        h *= 2
    y = y.reshape(*lead, -1)
    if b > 1:
        y = y / math.sqrt(b)
    return y


def fht_blocked(x, spec: RotationSpec, inverse: bool = False) -> np.ndarray:
    """Compute ``x @ G`` (or ``x @ G.T`` when ``inverse``) along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ConfigurationError(f"last axis is {x.shape[-1]}, rotation dim is {spec.dim}")
    if not inverse:
        return _wht_blocks(x[..., spec.swap], spec.block_size)
    y = _wht_blocks(x, spec.block_size)
    return y[..., spec.inverse_swap()]


def absorb_into_weight(w, spec: RotationSpec, inverse: bool = False) -> np.ndarray:
    """Return ``G.T @ w`` for a (D_in, D_out) weight, or ``G @ w`` when ``inverse``."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != spec.dim:
        raise ConfigurationError(f"weight of shape {w.shape} does not match rotation dim {spec.dim}")
    return np.ascontiguousarray(fht_blocked(w.T, spec, inverse=inverse).T)


def materialize_g(spec: RotationSpec, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    """Dense ``G = S @ H`` built from explicit matrices, independent of the fast path."""
    if spec.dim > cap:
        raise ResourceError(f"refusing to materialize a {spec.dim}x{spec.dim} rotation (cap {cap})")
    s = np.zeros((spec.dim, spec.dim))
    s[spec.swap, np.arange(spec.dim)] = 1.0
    block = scipy.linalg.hadamard(spec.block_size).astype(np.float64) / math.sqrt(spec.block_size)
    h = scipy.linalg.block_diag(*([block] * (spec.dim // spec.block_size)))
    return s @ h

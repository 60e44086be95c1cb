"""On-disk formats.

A model directory holds ``manifest.json`` and ``weights.bin``: tensors are
concatenated little-endian, row-major, in manifest order, and the manifest
records each tensor's name, shape, dtype, offset and byte length.

A quantized artifact directory holds ``manifest.json`` and ``packed.bin``.
Per layer, ``packed.bin`` carries the weight params (f32 lower, f32 upper,
u8 bits), the integer codes (4-bit pairs low nibble first, 8-bit bytes,
16-bit little-endian u16) and, when the layer is rotated, the rotation
(u32 dim, u32 block size, u32[dim] swap).
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .calibration import CalibrationMode, CalibrationSet
from .clps import SearchResult
from .errors import ConfigurationError, FormatError
from .model import SLOTS, Dims, LayerRef, ModelGraph, QuantizedLayer
from .pipeline import FORMAT_VERSION, QuantizedModel, code_bytes
from .quantizer import QuantParams, dequantize_codes, pack_codes, quantize_codes, unpack_codes
from .rotation import RotationSpec
from .state import QuantState

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
PACKED = "packed.bin"
_DTYPES = {"f32": "<f4", "f16": "<f2", "f64": "<f8"}


def _read_manifest(path: Path, kind: str) -> dict:
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path / MANIFEST}: invalid JSON ({exc})") from None
    if manifest.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} manifest, found {manifest.get('kind')!r}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {manifest.get('format_version')}")
    return manifest


def write_tensors(path, tensors: dict[str, np.ndarray], dtype: str = "f32", **meta) -> int:
    """Write a tensor directory; returns the size of the data file in bytes."""
    if dtype not in _DTYPES:
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / WEIGHTS, "wb") as fh:
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, **meta, "dtype": dtype, "tensors": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return offset


def read_tensors(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = _read_manifest(path, kind)
    try:
        blob = (path / WEIGHTS).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: no {WEIGHTS}") from None
    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        dtype = _DTYPES.get(entry.get("dtype"))
        if dtype is None:
            raise FormatError(f"tensor {name}: unknown dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        nbytes = math.prod(shape) * np.dtype(dtype).itemsize
        if entry["nbytes"] != nbytes:
            raise FormatError(f"tensor {name}: manifest says {entry['nbytes']} bytes, shape implies {nbytes}")
        start = entry["offset"]
        if start < 0 or start + nbytes > len(blob):
            raise FormatError(f"tensor {name}: data truncated ({len(blob)} bytes available, needs {start + nbytes})")
        tensors[name] = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=start).reshape(shape)
    end = max((e["offset"] + e["nbytes"] for e in manifest["tensors"]), default=0)
    if end != len(blob):
        raise FormatError(f"{path / WEIGHTS}: {len(blob) - end} trailing bytes beyond the last tensor")
    return manifest, tensors


def save_model(path, g: ModelGraph, dtype: str = "f32") -> int:
    if dtype not in ("f32", "f16"):
        raise ConfigurationError(f"models are stored as f32 or f16, not {dtype!r}")
    tensors = {name: g.weights[name] for name in g.layer_names()}
    return write_tensors(path, tensors, dtype, kind="model", dims=g.dims.to_dict(),
                         seed=g.seed, outlier_frac=g.outlier_frac)


def load_model(path) -> ModelGraph:
    manifest, tensors = read_tensors(path, "model")
    dims = Dims(**manifest["dims"])
    names = [LayerRef(k, s).name for k in range(dims.blocks) for s in SLOTS]
    missing = [n for n in names if n not in tensors]
    if missing:
        raise FormatError(f"tensor {missing[0]}: missing from manifest")
    for n in names:
        want = dims.layer_shape(n.split(".", 1)[1])
        if tensors[n].shape != want:
            raise FormatError(f"tensor {n}: shape {tensors[n].shape}, expected {want}")
    weights = {n: tensors[n].astype(np.float32) for n in names}
    return ModelGraph(dims, weights, manifest.get("seed"), manifest.get("outlier_frac", 0.0))


# --- quantized artifacts -------------------------------------------------------


def _encode_codes(codes: np.ndarray, bits: int) -> bytes:
    if bits in (4, 8):
        return pack_codes(codes, bits)
    if bits == 16:
        return np.ascontiguousarray(codes, dtype="<u2").tobytes()
    raise FormatError(f"cannot store {bits}-bit codes")


def _decode_codes(buf: bytes, bits: int, shape) -> np.ndarray:
    count = math.prod(shape)
    if bits == 16:
        if len(buf) != 2 * count:
            raise FormatError(f"16-bit payload is {len(buf)} bytes, expected {2 * count}")
        return np.frombuffer(buf, dtype="<u2").astype(np.int64).reshape(shape)
    return unpack_codes(buf, bits, count).astype(np.int64).reshape(shape)


def save_quantized(path, qm: QuantizedModel, extra: dict | None = None) -> int:
    """Write the artifact; returns the size of ``packed.bin`` in bytes.

    ``extra`` adds top-level manifest keys (provenance, for instance).
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layers, offset = [], 0
    with open(path / PACKED, "wb") as fh:
        for name, layer in qm.state.layers.items():
            params = layer.params
            entry = {"name": name, "shape": list(layer.weight.shape), "bits": params.bits, "axis": -1}
            for key, raw in (
                ("params", params.to_bytes()),
                ("codes", _encode_codes(quantize_codes(layer.weight, params), params.bits)),
                ("rotation", qm.state.rotations[name].to_bytes() if name in qm.state.rotations else None),
            ):
                if raw is None:
                    entry[key] = None
                    continue
                fh.write(raw)
                entry[key] = {"offset": offset, "nbytes": len(raw)}
                offset += len(raw)
            if layer.act_bits is not None:
                entry["act_bits"] = layer.act_bits
            res = qm.state.results.get(name)
            entry["search"] = None if res is None else res.to_dict()
            layers.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "quantized",
        "dims": qm.dims.to_dict(),
        "bits_w": qm.bits_w,
        "bits_a": qm.bits_a,
        "act_range": list(qm.state.act_range),
        "model_seed": qm.model_seed,
        "block_order": list(qm.state.block_order),
        "config": qm.config,
        **(extra or {}),
        "layers": layers,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return offset


def _slice(blob: bytes, ref: dict, what: str) -> bytes:
    start, n = ref["offset"], ref["nbytes"]
    if start < 0 or start + n > len(blob):
        raise FormatError(f"{what}: payload truncated")
    return blob[start:start + n]


def load_quantized(path) -> QuantizedModel:
    path = Path(path)
    manifest = _read_manifest(path, "quantized")
    try:
        blob = (path / PACKED).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: no {PACKED}") from None
    dims = Dims(**manifest["dims"])
    order = manifest.get("block_order", [])
    if order != sorted(set(order)) or (order and order[0] != 0) or order != list(range(len(order))):
        raise FormatError(f"block_order {order} violates sequential block quantization")
    state = QuantState(act_bits=manifest["bits_a"], act_range=tuple(manifest.get("act_range", (0.0, 1.0))))
    for entry in manifest["layers"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        try:
            want = dims.layer_shape(name.split(".", 1)[1])
        except Exception:
            raise FormatError(f"layer {name}: not part of the model") from None
        if shape != want:
            raise FormatError(f"layer {name}: shape {shape}, expected {want}")
        block = LayerRef.parse(name).block
        if block not in order:
            raise FormatError(f"layer {name}: block {block} missing from block_order")
        params = QuantParams.from_bytes(_slice(blob, entry["params"], name), shape[1])
        if params.bits != entry["bits"]:
            raise FormatError(f"layer {name}: bits field {params.bits} disagrees with manifest {entry['bits']}")
        codes_raw = _slice(blob, entry["codes"], name)
        if len(codes_raw) != code_bytes(math.prod(shape), params.bits):
            raise FormatError(f"layer {name}: code payload has wrong length {len(codes_raw)}")
        codes = _decode_codes(codes_raw, params.bits, shape)
        if codes.max(initial=0) > params.levels:
            raise FormatError(f"layer {name}: code exceeds {params.bits}-bit range")
        layer = QuantizedLayer(dequantize_codes(codes, params), params, entry.get("act_bits"))
        rot = None
        if entry.get("rotation"):
            rot = RotationSpec.from_bytes(_slice(blob, entry["rotation"], name))
            if rot.dim != shape[0]:
                raise FormatError(f"layer {name}: rotation dim {rot.dim} != input dim {shape[0]}")
        res = None
        if entry.get("search"):
            s = entry["search"]
            res = SearchResult(s["p_lo"], s["p_hi"], params, s["objective"], LayerRef.parse(s["target"]),
                               s.get("evaluated", 0), s.get("fallback", False))
        state.layers[name] = layer
        if rot is not None:
            state.rotations[name] = rot
        if res is not None:
            state.results[name] = res
    state.block_order = list(order)
    return QuantizedModel(dims, state, manifest["bits_w"], manifest["bits_a"], manifest.get("config", {}),
                          manifest.get("model_seed"), manifest)


def weights_digest(g: ModelGraph) -> str:
    """SHA-256 over the f32 weights in layer order; ties an artifact to its model."""
    h = hashlib.sha256()
    for name in g.layer_names():
        h.update(np.ascontiguousarray(g.weights[name], dtype="<f4").tobytes())
    return h.hexdigest()


def directory_bytes(path) -> int:
    return sum(p.stat().st_size for p in Path(path).iterdir() if p.is_file())


# --- calibration sets ------------------------------------------------------------


def save_calibration(path, calib: CalibrationSet, dtype: str = "f32") -> int:
    """Persist a calibration set's records; ``f64`` keeps them exact."""
    tensors = {"block_input": calib.block_input, **calib.records}
    return write_tensors(path, tensors, dtype, kind="calibration", block=calib.block, mode=calib.mode.value)


def load_calibration(path, reference=None, inputs=None) -> CalibrationSet:
    manifest, tensors = read_tensors(path, "calibration")
    block_input = tensors.pop("block_input").astype(np.float64)
    records = {k: v.astype(np.float64) for k, v in tensors.items()}
    cross = records.get(f"block{manifest['block']}.attn2.to_k")
    return CalibrationSet(manifest["block"], CalibrationMode(manifest["mode"]),
                          inputs if inputs is not None else (None, cross),
                          block_input, records, reference or {})

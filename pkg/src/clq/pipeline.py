"""Block-by-block post-training quantization of a toy graph.

For every block in order: collect calibration activations (cross-block or
naive), then for each of its ten layers rotate, search clipping bounds and
commit the quantized weight. The resulting state is evaluated against the
full-precision forward pass on a held-out batch.
"""
from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .calibration import accumulated_drift, collect_block, collect_naive, reference_taps
from .clps import SearchSpace, quantize_layer
from .errors import CLQError, ConfigurationError
from .model import SLOTS, Dims, ModelGraph, forward, make_inputs
from .quantizer import QuantParams
from .rotation import OutlierMetric, RotationSpec
from .state import QuantState

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
EVAL_SEED_OFFSET = 10_007
LADDER = (
    ("naive", dict(enable_obs=False, enable_clps=False, enable_cbc=False)),
    ("+OBS", dict(enable_obs=True, enable_clps=False, enable_cbc=False)),
    ("+OBS+CLPS", dict(enable_obs=True, enable_clps=True, enable_cbc=False)),
    ("+OBS+CLPS+CBC", dict(enable_obs=True, enable_clps=True, enable_cbc=True)),
)


@dataclass(frozen=True)
class PipelineConfig:
    bits_w: int = 4
    bits_a: int = 4
    metric: str = OutlierMetric.ABS_MAX.value
    beta: float = 0.0
    gamma: float = 0.01
    grid_points: int = 16
    calib_batch: int = 8
    seed: int = 0
    enable_cbc: bool = True
    enable_obs: bool = True
    enable_clps: bool = True
    block_size: int | None = None
    perturb_bits: int | None = None
    perturbation: str = "quant"
    eval_batch: int = 8
    eval_seed: int | None = None

    def __post_init__(self):
        for name in ("bits_w", "bits_a"):
            if getattr(self, name) not in (4, 8, 16):
                raise ConfigurationError(f"{name} must be 4, 8 or 16, got {getattr(self, name)}")
        OutlierMetric(self.metric)
        if self.calib_batch < 1 or self.eval_batch < 1:
            raise ConfigurationError("batch sizes must be positive")
        self.space  # validates beta/gamma/grid

    @property
    def space(self) -> SearchSpace:
        return SearchSpace(self.beta, self.gamma, self.grid_points)

    @property
    def resolved_eval_seed(self) -> int:
        return self.seed + EVAL_SEED_OFFSET if self.eval_seed is None else self.eval_seed

    @property
    def label(self) -> str:
        parts = [n for n, on in (("OBS", self.enable_obs), ("CLPS", self.enable_clps), ("CBC", self.enable_cbc)) if on]
        return "naive" if not parts else "+" + "+".join(parts)


@dataclass
class FidelityReport:
    label: str
    config: dict
    per_layer: dict[str, dict]
    drift: list[float]
    e2e_rel_error: float
    fp16_bytes: int
    packed_bytes: int
    wall_clock_s: float
    eval_seed: int
    eval_batch: int
    format_version: int = FORMAT_VERSION

    @property
    def size_ratio(self) -> float:
        return self.fp16_bytes / self.packed_bytes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_ratio"] = self.size_ratio
        return d

    def table(self) -> str:
        lines = [
            f"run: {self.label}  (W{self.config['bits_w']}A{self.config['bits_a']}, metric={self.config['metric']})",
            f"end-to-end relative error: {self.e2e_rel_error:.6g}",
            "drift per block: " + ", ".join(f"{d:.4g}" for d in self.drift),
            f"bytes: fp16={self.fp16_bytes} packed={self.packed_bytes} ratio={self.size_ratio:.3f}",
            f"wall clock: {self.wall_clock_s:.2f}s",
            f"{'layer':<24}{'p_lo':>8}{'p_hi':>8}{'objective':>14}  target",
        ]
        for name, row in self.per_layer.items():
            lines.append(f"{name:<24}{row['p_lo']:>8.4f}{row['p_hi']:>8.4f}{row['objective']:>14.6g}  {row['target']}")
        return "\n".join(lines)


@dataclass
class QuantizedModel:
    """In-memory quantized artifact: the final state plus the settings that made it."""

    dims: Dims
    state: QuantState
    bits_w: int
    bits_a: int
    config: dict = field(default_factory=dict)
    model_seed: int | None = None
    manifest: dict | None = None  # set when loaded from disk

    def layer_names(self) -> list[str]:
        return list(self.state.layers)


def fp16_payload_bytes(dims: Dims) -> int:
    """Size of ``weights.bin`` for a model stored as float16."""
    return 2 * dims.blocks * sum(a * b for a, b in map(dims.layer_shape, SLOTS))


def code_bytes(count: int, bits: int) -> int:
    if bits == 4:
        return (count + 1) // 2
    if bits == 8:
        return count
    return 2 * count


def layer_payload_bytes(shape: tuple[int, int], bits: int, rotated: bool) -> int:
    """Bytes one layer occupies in ``packed.bin``: params, codes, optional rotation."""
    d_in, d_out = shape
    n = QuantParams.nbytes(d_out) + code_bytes(d_in * d_out, bits)
    if rotated:
        n += RotationSpec.nbytes(d_in)
    return n


def packed_payload_bytes(qm: QuantizedModel) -> int:
    return sum(
        layer_payload_bytes(layer.weight.shape, layer.params.bits, name in qm.state.rotations)
        for name, layer in qm.state.layers.items()
    )


def end_to_end_error(g: ModelGraph, state: QuantState, inputs) -> float:
    x, cross = inputs
    y, _ = forward(g, x, cross)
    yq, _ = state.forward(g, x, cross)
    return float(np.linalg.norm(yq - y) / np.linalg.norm(y))


def run(g: ModelGraph, cfg: PipelineConfig | None = None) -> tuple[QuantizedModel, FidelityReport]:
    """Quantize every layer of ``g`` block by block and report fidelity."""
    cfg = cfg or PipelineConfig()
    t0 = time.perf_counter()
    inputs = make_inputs(g.dims, cfg.calib_batch, cfg.seed)
    reference = reference_taps(g, inputs)
    state = QuantState(act_bits=cfg.bits_a)
    naive = None if cfg.enable_cbc else collect_naive(g, inputs, reference)
    for k in range(g.dims.blocks):
        calib = collect_block(g, state, k, inputs, reference) if cfg.enable_cbc else naive[k]
        for ref in g.layer_refs([k]):
            try:
                quantize_layer(
                    g, state, ref, calib, cfg.space, cfg.bits_w, cfg.metric,
                    enable_obs=cfg.enable_obs, enable_clps=cfg.enable_clps,
                    block_size=cfg.block_size, perturb_bits=cfg.perturb_bits,
                    perturbation=cfg.perturbation,
                )
            except CLQError as exc:
                raise type(exc)(f"block {k}, layer {ref.name}: {exc}") from exc
        log.debug("block %d quantized", k)
    eval_inputs = make_inputs(g.dims, cfg.eval_batch, cfg.resolved_eval_seed)
    e2e = end_to_end_error(g, state, eval_inputs)
    drift = accumulated_drift(g, state, eval_inputs)
    wall = time.perf_counter() - t0

    qm = QuantizedModel(g.dims, state, cfg.bits_w, cfg.bits_a, asdict(cfg), g.seed)
    per_layer = {}
    for name, res in state.results.items():
        row = res.to_dict()
        row["bits"] = cfg.bits_w
        row["widened"] = state.layers[name].params.widened
        per_layer[name] = row
    report = FidelityReport(
        label=cfg.label,
        config=asdict(cfg),
        per_layer=per_layer,
        drift=[float(d) for d in drift],
        e2e_rel_error=e2e,
        fp16_bytes=fp16_payload_bytes(g.dims),
        packed_bytes=packed_payload_bytes(qm),
        wall_clock_s=wall,
        eval_seed=cfg.resolved_eval_seed,
        eval_batch=cfg.eval_batch,
    )
    if not all(np.isfinite([report.e2e_rel_error, *report.drift])):
        raise CLQError("non-finite metric in fidelity report")
    return qm, report


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("CLQ_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("CLQ_THREADS must be an integer") from None


def _run_report(args) -> FidelityReport:
    g, cfg = args
    return run(g, cfg)[1]


def run_many(jobs: list[tuple[ModelGraph, PipelineConfig]]) -> list[FidelityReport]:
    """Run independent pipeline jobs, in a process pool when CLQ_THREADS > 1."""
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [_run_report(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_run_report, jobs))


def ablation_configs(base: PipelineConfig) -> list[tuple[str, str, PipelineConfig]]:
    """(section, label, config) for the design ladder and the outlier-metric sweep."""
    rows = [("ladder", label, replace(base, **flags)) for label, flags in LADDER]
    full = dict(LADDER)["+OBS+CLPS+CBC"]
    rows += [("metric", m.value, replace(base, metric=m.value, **full)) for m in OutlierMetric]
    return rows


def ablate(g: ModelGraph, base: PipelineConfig | None = None) -> list[dict]:
    """Run the ladder and metric sweep; identical configs are run once."""
    base = base or PipelineConfig()
    rows = ablation_configs(base)
    unique: dict[PipelineConfig, int] = {}
    jobs = []
    for _, _, cfg in rows:
        if cfg not in unique:
            unique[cfg] = len(jobs)
            jobs.append((g, cfg))
    reports = run_many(jobs)
    table = []
    for section, label, cfg in rows:
        rep = reports[unique[cfg]]
        table.append({
            "section": section,
            "label": label,
            "metric": cfg.metric,
            "bits_w": cfg.bits_w,
            "bits_a": cfg.bits_a,
            "e2e_rel_error": rep.e2e_rel_error,
            "size_ratio": rep.size_ratio,
            "wall_clock_s": rep.wall_clock_s,
        })
    return table


def ablation_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(table)
    return buf.getvalue()

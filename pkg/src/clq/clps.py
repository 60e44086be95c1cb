"""Cross-layer clipping-range search.

For a layer being quantized, a cheap perturbation experiment picks the
downstream layer whose output moves the most; the layer's weight clipping
percentiles are then grid-searched to minimize the squared error at that
target's output against the full-precision reference.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationSet
from .errors import ConfigurationError, SearchFailure
from .model import OUTPUT, LayerRef, ModelGraph, QuantizedLayer, forward_quantized
from .quantizer import QuantParams, minmax_params, order_statistic_index, params_from_bounds
from .rotation import OutlierMetric, RotationSpec, absorb_into_weight, batch_mean, build_spec, outlier_scores
from .state import QuantState

log = logging.getLogger(__name__)

TARGET_WINDOW = 3
SHIFT_TOL = 1e-3


@dataclass(frozen=True)
class SearchSpace:
    """Percentile grid: lower bounds in ``[beta, gamma]``, upper in ``[1-gamma, 1-beta]``."""

    beta: float = 0.0
    gamma: float = 0.01
    grid_points: int = 16
    shared_percentile: bool = True

    def __post_init__(self):
        if not (0.0 <= self.beta <= self.gamma <= 0.5):
            raise ConfigurationError(f"need 0 <= beta <= gamma <= 0.5, got beta={self.beta}, gamma={self.gamma}")
        if self.grid_points < 1 or (self.grid_points < 2 and self.beta < self.gamma):
            raise ConfigurationError(f"grid_points must be >= 2, got {self.grid_points}")
        if not self.shared_percentile:
            raise ConfigurationError("only shared per-matrix percentiles are supported")

    def lo_grid(self) -> np.ndarray:
        n = 1 if self.beta == self.gamma else self.grid_points
        return np.linspace(self.beta, self.gamma, n)

    def hi_grid(self) -> np.ndarray:
        n = 1 if self.beta == self.gamma else self.grid_points
        return np.linspace(1.0 - self.gamma, 1.0 - self.beta, n)

    def candidates(self) -> list[tuple[float, float]]:
        return [(float(lo), float(hi)) for lo in self.lo_grid() for hi in self.hi_grid()]


@dataclass(frozen=True)
class SearchResult:
    best_lo: float
    best_hi: float
    params: QuantParams
    objective: float
    target: LayerRef
    evaluated: int = 0
    fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "p_lo": self.best_lo,
            "p_hi": self.best_hi,
            "objective": self.objective,
            "target": self.target.name,
            "evaluated": self.evaluated,
            "fallback": self.fallback,
        }


@dataclass(frozen=True)
class TargetChoice:
    layer: LayerRef
    shifts: dict[str, float] = field(default_factory=dict)
    fallback: bool = False


def better(cand: tuple[float, float, float], best: tuple[float, float, float] | None) -> bool:
    """Tie rule for (objective, p_lo, p_hi): lower objective, then wider range, then lower p_lo."""
    if best is None:
        return True
    obj, lo, hi = cand
    bobj, blo, bhi = best
    if obj != bobj:
        return obj < bobj
    if (hi - lo) != (bhi - blo):
        return (hi - lo) > (bhi - blo)
    return lo < blo


def weight_percentile_params(w: np.ndarray, p_lo: float, p_hi: float, bits: int, _sorted=None) -> QuantParams:
    """Per-output-channel quantile bounds of a (D_in, D_out) weight, same percentiles for every column."""
    srt = np.sort(w, axis=0) if _sorted is None else _sorted
    m = srt.shape[0]
    return params_from_bounds(srt[order_statistic_index(p_lo, m)], srt[order_statistic_index(p_hi, m)], bits)


def _subsequent_layers(g: ModelGraph, opt: LayerRef) -> list[LayerRef]:
    last = min(opt.block + TARGET_WINDOW, g.dims.blocks - 1)
    return [r for r in g.layer_refs(range(opt.block, last + 1)) if r.position > opt.position]


def _check_opt(g: ModelGraph, opt: LayerRef) -> None:
    if opt.is_output or not 0 <= opt.block < g.dims.blocks:
        raise ConfigurationError(f"{opt} is not a linear layer of this graph")


def find_target_layer(
    g: ModelGraph,
    state: QuantState,
    opt: LayerRef,
    calib: CalibrationSet,
    perturb_bits: int = 4,
    spec: RotationSpec | None = None,
    perturbation: str = "quant",
    tol: float = SHIFT_TOL,
    seed: int = 0,
) -> TargetChoice:
    """Downstream layer (within the next three blocks) most shifted by perturbing ``opt``.

    Layers of the final block target the block output. The shift is the mean
    absolute output difference; if no layer moves by more than ``tol``
    relative to its mean magnitude, the next layer in order is returned and
    the choice is flagged.
    """
    _check_opt(g, opt)
    if opt.block == g.dims.blocks - 1:
        return TargetChoice(LayerRef(opt.block, OUTPUT))
    cands = _subsequent_layers(g, opt)
    w = g.weight64(opt.name)
    w_rot = w if spec is None else absorb_into_weight(w, spec)
    if perturbation == "quant":
        pert = QuantizedLayer.from_weight(w_rot, minmax_params(w_rot, perturb_bits), act_bits=perturb_bits)
    elif perturbation == "gaussian":
        params = minmax_params(w_rot, perturb_bits)
        step = (params.upper.astype(np.float64) - params.lower) / params.levels
        rng = np.random.default_rng(seed)
        noisy = w_rot + rng.standard_normal(w_rot.shape) * step / np.sqrt(12.0)
        pert = QuantizedLayer(noisy, params)
    else:
        raise ConfigurationError(f"unknown perturbation {perturbation!r}")

    names = [c.name for c in cands]
    base_rot = dict(state.rotations)
    if spec is not None:
        base_rot[opt.name] = spec
    common = dict(act_range=state.act_range, start_block=opt.block, stop_at=names[-1])
    _, ref = forward_quantized(g, state.layers, base_rot, calib.block_input, calib.cross, state.act_bits,
                               names, **common)
    _, shifted = forward_quantized(g, {**state.layers, opt.name: pert}, base_rot, calib.block_input,
                                   calib.cross, state.act_bits, names, **common)
    shifts = {n: float(np.mean(np.abs(shifted[n].output - ref[n].output))) for n in names}
    rel = [shifts[n] / max(float(np.mean(np.abs(ref[n].output))), 1e-300) for n in names]
    if max(rel) <= tol:
        log.info("no measurable shift downstream of %s; falling back to %s", opt, cands[0])
        return TargetChoice(cands[0], shifts, fallback=True)
    best = names[int(np.argmax([shifts[n] for n in names]))]
    return TargetChoice(LayerRef.parse(best), shifts)


class LayerObjective:
    """Squared error at ``target`` after quantizing ``opt`` with given weight params.

    The pass starts from the calibration input of ``opt``'s block and runs the
    current state with ``opt`` swapped in; the reference is the
    full-precision output of ``target`` on the same prompts.
    """

    def __init__(self, g: ModelGraph, state: QuantState, opt: LayerRef, target: LayerRef,
                 calib: CalibrationSet, spec: RotationSpec | None = None):
        _check_opt(g, opt)
        if target.position < opt.position:
            raise ConfigurationError(f"target {target} precedes {opt}")
        if target.name not in calib.reference:
            raise ConfigurationError(f"no reference output for {target}")
        self.g, self.state, self.opt, self.target, self.calib, self.spec = g, state, opt, target, calib, spec
        w = g.weight64(opt.name)
        self.weight = w if spec is None else absorb_into_weight(w, spec)
        self.reference = calib.reference[target.name].output
        self.rotations = dict(state.rotations)
        if spec is not None:
            self.rotations[opt.name] = spec
        self.layers = {n: q for n, q in state.layers.items() if n != opt.name}

    def output(self, layer: QuantizedLayer | None) -> np.ndarray:
        layers = self.layers if layer is None else {**self.layers, self.opt.name: layer}
        y, _ = forward_quantized(self.g, layers, self.rotations, self.calib.block_input, self.calib.cross,
                                 self.state.act_bits, act_range=self.state.act_range,
                                 start_block=self.opt.block, stop_at=self.target.name)
        return y

    def of_layer(self, layer: QuantizedLayer | None) -> float:
        with np.errstate(all="ignore"):
            y = self.output(layer)
            err = float(np.sum((self.reference - y) ** 2))
        return err if np.isfinite(err) else float("inf")

    def __call__(self, params: QuantParams) -> float:
        return self.of_layer(QuantizedLayer.from_weight(self.weight, params))


def grid_search(
    g: ModelGraph,
    state: QuantState,
    opt: LayerRef,
    target: LayerRef,
    calib: CalibrationSet,
    space: SearchSpace,
    bits: int,
    spec: RotationSpec | None = None,
) -> SearchResult:
    """Exhaustive search over shared clipping percentiles for ``opt``'s weight.

    Percentile pairs that select the same order statistics produce the same
    quantized weight, so each distinct pair is evaluated once.
    """
    objective = LayerObjective(g, state, opt, target, calib, spec)
    srt = np.sort(objective.weight, axis=0)
    m = srt.shape[0]
    cache: dict[tuple[int, int], float] = {}
    best = None
    for lo, hi in space.candidates():
        key = (order_statistic_index(lo, m), order_statistic_index(hi, m))
        if key not in cache:
            try:
                params = weight_percentile_params(objective.weight, lo, hi, bits, _sorted=srt)
            except ConfigurationError:
                cache[key] = float("inf")
            else:
                cache[key] = objective(params)
        cand = (cache[key], lo, hi)
        if better(cand, best):
            best = cand
    obj, lo, hi = best
    if not np.isfinite(obj):
        raise SearchFailure(f"{opt}: every clipping candidate produced non-finite output")
    params = weight_percentile_params(objective.weight, lo, hi, bits, _sorted=srt)
    return SearchResult(lo, hi, params, obj, target, evaluated=len(cache))


def quantize_layer(
    g: ModelGraph,
    state: QuantState,
    opt: LayerRef,
    calib: CalibrationSet,
    space: SearchSpace,
    bits_w: int,
    metric: OutlierMetric | str = OutlierMetric.ABS_MAX,
    *,
    enable_obs: bool = True,
    enable_clps: bool = True,
    block_size: int | None = None,
    perturb_bits: int | None = None,
    perturbation: str = "quant",
) -> tuple[RotationSpec | None, SearchResult]:
    """Rotate, pick a target, search bounds, then commit ``opt`` to ``state``.

    With CLPS disabled the weight takes min-max bounds and the reported
    objective is measured at ``opt``'s own output.
    """
    _check_opt(g, opt)
    if opt.name in state.layers:
        raise ConfigurationError(f"{opt} is already quantized")
    if opt.name not in calib.records:
        raise ConfigurationError(f"calibration set for block {calib.block} does not cover {opt}")
    spec = None
    if enable_obs:
        scores = outlier_scores(batch_mean(calib.records[opt.name]), metric)
        spec = build_spec(scores, block_size)

    if enable_clps:
        choice = find_target_layer(g, state, opt, calib, perturb_bits or bits_w, spec, perturbation)
        result = grid_search(g, state, opt, choice.layer, calib, space, bits_w, spec)
        if choice.fallback:
            result = SearchResult(result.best_lo, result.best_hi, result.params, result.objective,
                                  result.target, result.evaluated, fallback=True)
    else:
        objective = LayerObjective(g, state, opt, opt, calib, spec)
        params = minmax_params(objective.weight, bits_w)
        result = SearchResult(0.0, 1.0, params, objective(params), opt, evaluated=1)

    w = g.weight64(opt.name)
    w_rot = w if spec is None else absorb_into_weight(w, spec)
    state.add(opt.name, QuantizedLayer.from_weight(w_rot, result.params), spec, result)
    return spec, result


"""Mutable record of which layers have been quantized so far."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError
from .model import SLOTS, ModelGraph, QuantizedLayer, forward_quantized
from .rotation import RotationSpec


@dataclass
class QuantState:
    """Quantized layers, their rotations and search results, keyed by layer name."""

    act_bits: int | None = None
    act_range: tuple[float, float] = (0.0, 1.0)
    layers: dict[str, QuantizedLayer] = field(default_factory=dict)
    rotations: dict[str, RotationSpec] = field(default_factory=dict)
    results: dict[str, object] = field(default_factory=dict)
    block_order: list[int] = field(default_factory=list)

    def add(self, name: str, layer: QuantizedLayer, rotation: RotationSpec | None = None, result=None):
        if name in self.layers:
            raise ConfigurationError(f"{name} is already quantized")
        self.layers[name] = layer
        if rotation is not None:
            self.rotations[name] = rotation
        if result is not None:
            self.results[name] = result
        block = int(name.split(".")[0][5:])
        if not self.block_order or self.block_order[-1] != block:
            self.block_order.append(block)

    def is_block_quantized(self, k: int) -> bool:
        return all(f"block{k}.{s}" in self.layers for s in SLOTS)

    def restricted(self, blocks) -> QuantState:
        """View containing only the layers of ``blocks``."""
        keep = {f"block{k}." for k in blocks}

        def pick(d):
            return {n: v for n, v in d.items() if n[: n.index(".") + 1] in keep}

        return QuantState(self.act_bits, self.act_range, pick(self.layers), pick(self.rotations),
                          pick(self.results), [k for k in self.block_order if f"block{k}." in keep])

    def forward(self, g: ModelGraph, x, cross, taps=None, **kw):
        return forward_quantized(g, self.layers, self.rotations, x, cross, self.act_bits, taps,
                                 act_range=self.act_range, **kw)

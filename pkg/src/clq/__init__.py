"""Post-training quantization of a toy diffusion transformer.

Cross-block calibration, outlier-aware block Hadamard rotation and a
cross-layer clipping-range search, on numpy.
"""
from .errors import (
    CLQError,
    ConfigurationError,
    DataError,
    FormatError,
    ResourceError,
    SearchFailure,
    SequencingError,
    UnsupportedPackingError,
)
from .model import Dims, LayerRef, ModelGraph, build_toy, forward, forward_quantized, make_inputs
from .pipeline import FidelityReport, PipelineConfig, QuantizedModel, ablate, run
from .quantizer import QuantizedTensor, QuantParams, dequantize, quantize_dequantize, quantize_pack
from .rotation import OutlierMetric, RotationSpec, absorb_into_weight, fht_blocked

__version__ = "0.1.0"

__all__ = [
    "CLQError", "ConfigurationError", "DataError", "FormatError", "ResourceError", "SearchFailure",
    "SequencingError", "UnsupportedPackingError",
    "Dims", "LayerRef", "ModelGraph", "build_toy", "forward", "forward_quantized", "make_inputs",
    "FidelityReport", "PipelineConfig", "QuantizedModel", "ablate", "run",
    "QuantizedTensor", "QuantParams", "dequantize", "quantize_dequantize", "quantize_pack",
    "OutlierMetric", "RotationSpec", "absorb_into_weight", "fht_blocked",
]

"""Layer-wise post-training quantization: transforms, quantizers, mitigation."""

__version__ = "0.1.0"

from .bundle import LayerBundle, ModelBundle
from .errors import (
    NotPositiveDefiniteError,
    NumericalError,
    PTQError,
    StageError,
    TensorFileError,
    ValidationError,
)
from .pipeline import MitigationStep, Recipe, Report, gen_synthetic_model, run_recipe, sweep
from .quantizers import QuantSpec, fake_quantize, mxfp4_dequantize, mxfp4_quantize
from .transforms import TransformStep

__all__ = [
    "LayerBundle",
    "MitigationStep",
    "ModelBundle",
    "NotPositiveDefiniteError",
    "NumericalError",
    "PTQError",
    "QuantSpec",
    "Recipe",
    "Report",
    "StageError",
    "TensorFileError",
    "TransformStep",
    "ValidationError",
    "__version__",
    "fake_quantize",
    "gen_synthetic_model",
    "mxfp4_dequantize",
    "mxfp4_quantize",
    "run_recipe",
    "sweep",
]

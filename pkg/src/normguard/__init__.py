"""Bit-accurate golden models of normalisation-guaranteed Softmax and LayerNorm units."""

__version__ = "0.1.0"

from .fxp import FxpFormat, FxpValue, QuantTensor, INT8_Q3, U1_15
from .softmax import SoftmaxConfig, SoftmaxEngine, softmax_row, softmax_batch, softmax_exact
from .layernorm import LayerNormConfig, LayerNormEngine, layernorm_row, layernorm_exact
from .harness import BaselineConfig, ErrorStats, run_distribution, run_sweep, compare_engines

__all__ = [
    "FxpFormat", "FxpValue", "QuantTensor", "INT8_Q3", "U1_15",
    "SoftmaxConfig", "SoftmaxEngine", "softmax_row", "softmax_batch", "softmax_exact",
    "LayerNormConfig", "LayerNormEngine", "layernorm_row", "layernorm_exact",
    "BaselineConfig", "ErrorStats", "run_distribution", "run_sweep", "compare_engines",
]

"""Quantized graph neural networks with learnable low-rank aggregation
prompts: quantization-aware training, analytic verification oracles, and a
fused CPU kernel benchmark harness."""

__version__ = "0.1.0"

from . import errors, graphs, kernels, layers, prompts, quant, theory, training  # noqa: F401

"""Desk-scale emulation of mixed-precision LLM inference kernels.

Bit-exact binary16 arithmetic, group quantization, hardware-aware weight
packing, tensor-core fragment emulation, a warp memory-pattern model and a
cycle-level pipeline simulator.
"""
from .core import Half, Tensor, fp16_round, tensor_io_read, tensor_io_write
from .quant import KvCache, QuantizedTensor, QuantSpec, dequantize, quantize, quantize_kv

__all__ = ["Half", "Tensor", "fp16_round", "tensor_io_read", "tensor_io_write", "KvCache",
           "QuantizedTensor", "QuantSpec", "dequantize", "quantize", "quantize_kv"]
__version__ = "0.1.0"

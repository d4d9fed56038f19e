"""Synchronous bidirectional sequence generation.

Left-to-right and right-to-left decoding share one beam and talk to each
other through cross-direction attention, for both an LSTM and a Transformer
backbone, plus the training strategies and analysis metrics that go with it.
"""

from bidiseq.tensor import Tensor, backward, float64_mode, grad_check, no_grad

__all__ = ["Tensor", "backward", "float64_mode", "grad_check", "no_grad"]
__version__ = "0.1.0"

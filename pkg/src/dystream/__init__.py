"""dystream: streaming dyadic audio-to-motion engine.

A desk-scale flow-matching autoregressive motion generator driven by paired
speaker/listener audio through a lookahead-bounded causal encoder, with a
synthetic oracle world, a packet-driven streaming scheduler, and metrics.
"""

from .kernels import backend_name
from .tensor import AttentionMask, RngState, Tensor

__version__ = "0.1.0"

__all__ = ["AttentionMask", "RngState", "Tensor", "backend_name", "__version__"]

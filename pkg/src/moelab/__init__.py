"""moelab: a desk-scale sparsely activated mixture-of-experts language model lab.

Everything runs single-process on float64 numpy: a tape-based autodiff tensor
core, top-2 expert routing, a decoder-only transformer with relative-position
bias, an Adafactor trainer with divergence rollback, a quality-filtered data
pipeline, a few-shot evaluation harness, n-gram contamination analysis, a 2D
shard planner, and a CLI tying them together.
"""

__version__ = "0.1.0"

from .model import ModelConfig, TransformerLM, build, count_params, flops_per_token
from .tensor import Tensor

__all__ = [
    "__version__",
    "ModelConfig",
    "TransformerLM",
    "Tensor",
    "build",
    "count_params",
    "flops_per_token",
]

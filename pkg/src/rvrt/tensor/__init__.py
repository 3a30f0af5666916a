from .core import Tape, Tensor, active_tape, as_tensor, default_dtype, parameter, precision
from .gradcheck import GradReport, gradcheck, rel_error
from .io import TensorFileError, load_raw, save_raw
from . import ops
from .ops import (
    bilinear_sample,
    charbonnier,
    concat,
    conv2d,
    flow_warp,
    gelu,
    layernorm,
    matmul,
    pixel_grid,
    pixel_shuffle,
    pixel_unshuffle,
    softmax,
)

__all__ = [
    "Tape", "Tensor", "active_tape", "as_tensor", "default_dtype", "parameter", "precision",
    "GradReport", "gradcheck", "rel_error", "TensorFileError", "load_raw", "save_raw", "ops",
    "bilinear_sample", "charbonnier", "concat", "conv2d", "flow_warp", "gelu", "layernorm",
    "matmul", "pixel_grid", "pixel_shuffle", "pixel_unshuffle", "softmax",
]

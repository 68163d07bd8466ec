# Minimal reverse-mode differentiation over dense float64 tensors.
#
# - tensor.py: Tensor, Tape, backward
# - functional.py: differentiable primitives (matmul, softmax_rows, ...)
# - optim.py: Parameter, Optimizer (plain descent and Adam)
from .functional import (
    add,
    add_constant,
    add_row,
    concat_cols,
    concat_rows,
    cross_entropy,
    embedding_lookup,
    l2_normalize_rows,
    layer_norm_rows,
    matmul,
    mul,
    mul_row,
    quick_gelu,
    scale,
    slice_cols,
    softmax_rows,
    sum,
    transpose,
)
from .optim import (
    LrSchedule,
    Optimizer,
    OptimizerConfig,
    OptimizerKind,
    Parameter,
    optimizer_step,
)
from .tensor import FloatArray, Tape, Tensor, active_tape, backward

__all__ = [
    "FloatArray",
    "LrSchedule",
    "Optimizer",
    "OptimizerConfig",
    "OptimizerKind",
    "Parameter",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "add_constant",
    "add_row",
    "backward",
    "concat_cols",
    "concat_rows",
    "cross_entropy",
    "embedding_lookup",
    "l2_normalize_rows",
    "layer_norm_rows",
    "matmul",
    "mul",
    "mul_row",
    "optimizer_step",
    "quick_gelu",
    "scale",
    "slice_cols",
    "softmax_rows",
    "sum",
    "transpose",
]

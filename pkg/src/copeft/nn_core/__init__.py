"""Dense float64 tensor core: autodiff ops, parameter store, Adam, gradcheck."""

from .gradcheck import finite_diff_check
from .ops import (
    agent_max_pool,
    bce_with_logits_sum,
    conv2d,
    linear,
    relu,
    scale_shift,
    smooth_l1_sum,
)
from .registry import GradMap, ParamEntry, ParamRegistry, ParamTensors, adam_step
from .tensor import (
    Tensor,
    concat,
    matmul,
    narrow,
    reshape,
    select,
    softmax,
    sum_all,
    transpose,
)

__all__ = [
    "GradMap",
    "ParamEntry",
    "ParamRegistry",
    "ParamTensors",
    "Tensor",
    "adam_step",
    "agent_max_pool",
    "bce_with_logits_sum",
    "concat",
    "conv2d",
    "finite_diff_check",
    "linear",
    "matmul",
    "narrow",
    "relu",
    "reshape",
    "scale_shift",
    "select",
    "smooth_l1_sum",
    "softmax",
    "sum_all",
    "transpose",
]

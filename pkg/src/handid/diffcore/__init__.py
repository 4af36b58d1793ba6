"""Dense float kernels with analytic gradients, Adam, and a gradient checker."""

from handid.diffcore.gradcheck import finite_difference_check, numeric_gradient, relative_error
from handid.diffcore.kernels import (
    activation_backward,
    activation_forward,
    batch_norm_backward,
    batch_norm_forward,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
)
from handid.diffcore.layers import Activation, BatchNorm, Conv2d, Flatten, Linear, Module, Sequential
from handid.diffcore.optim import Adam, AdamState, ParamGroup, adam_step, clip_global_norm
from handid.diffcore.tensor import Tensor, check_finite, read_ht01, write_ht01

__all__ = [
    "Activation", "Adam", "AdamState", "BatchNorm", "Conv2d", "Flatten", "Linear", "Module",
    "ParamGroup", "Sequential", "Tensor", "activation_backward", "activation_forward",
    "adam_step", "batch_norm_backward", "batch_norm_forward", "check_finite", "clip_global_norm",
    "conv2d_backward", "conv2d_forward", "fc_backward", "fc_forward", "finite_difference_check",
    "numeric_gradient", "read_ht01", "relative_error", "write_ht01",
]

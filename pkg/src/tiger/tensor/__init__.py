"""Dense tensors with reverse-mode gradients, built on numpy."""

from .core import Tensor, as_tensor, count_macs, mac_scope, no_grad
from .gradcheck import NonDeterministicError, grad_check
from .layers import Conv, LayerSpec, Norm, PReLU, activate, conv, normalize, resample
from .params import ParameterStore

__all__ = [
    "Tensor", "as_tensor", "count_macs", "mac_scope", "no_grad",
    "grad_check", "NonDeterministicError",
    "LayerSpec", "Conv", "Norm", "PReLU", "activate", "conv", "normalize", "resample",
    "ParameterStore",
]

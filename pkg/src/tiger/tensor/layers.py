"""Layer descriptions, their functional forms, and parameter-owning wrappers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import ops
from .core import Tensor
from .params import ParameterStore

KINDS = ("conv1d", "conv2d-1x1", "group_norm", "layer_norm", "prelu", "relu",
         "sigmoid", "softmax", "avg_pool", "nearest_upsample")

NORM_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    groups: int = 1
    num_groups: int = 1
    axis: int = -1
    factor: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv1d", "conv2d-1x1"):
            if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
                raise ValueError("groups must divide input and output channels")
            if self.kernel > 1 and self.kernel % 2 == 0:
                raise ValueError("same-padded convolutions need an odd kernel")
            if self.stride < 1:
                raise ValueError("stride must be >= 1")
        if self.kind == "conv2d-1x1" and (self.kernel != 1 or self.stride != 1):
            raise ValueError("conv2d-1x1 has kernel 1 and stride 1")
        if self.kind == "group_norm" and (self.num_groups < 1 or self.in_channels % self.num_groups):
            raise ValueError("group count must divide channels")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def out_length(self, in_length: int) -> int:
        return (in_length + 2 * self.padding - self.kernel) // self.stride + 1


def conv(x: Tensor, spec: LayerSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """conv1d on (M, C, L) with same padding, or a 1x1 conv over axis 1 of any rank."""
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"channel mismatch: got {x.shape[1]}, expected {spec.in_channels}")
    if spec.kind == "conv2d-1x1" or (spec.kernel == 1 and spec.stride == 1 and spec.groups == 1):
        return ops.pointwise(x, weight.reshape(spec.out_channels, spec.in_channels), bias)
    if spec.kind != "conv1d":
        raise ValueError(f"{spec.kind} is not a convolution")
    return ops.conv1d(x, weight, bias, stride=spec.stride, padding=spec.padding, groups=spec.groups)


def normalize(x: Tensor, spec: LayerSpec, scale: Tensor, shift: Tensor) -> Tensor:
    """Group norm over (channels-in-group, positions) or layer norm over channels."""
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if spec.kind == "group_norm":
        g = spec.num_groups
        if c % g:
            raise ValueError("group count must divide channels")
        xs = x.reshape((x.shape[0], g, c // g) + x.shape[2:])
        y = ops.standardize(xs, tuple(range(2, xs.ndim)), NORM_EPS).reshape(x.shape)
    elif spec.kind == "layer_norm":
        y = ops.standardize(x, (1,), NORM_EPS)
    else:
        raise ValueError(f"{spec.kind} is not a normalization")
    return y * scale.reshape(bshape) + shift.reshape(bshape)


def activate(x: Tensor, kind: str, slope: Optional[Tensor] = None, axis: Optional[int] = None) -> Tensor:
    if kind == "sigmoid":
        return ops.sigmoid(x)
    if kind == "relu":
        return ops.relu(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope parameter")
        return ops.prelu(x, slope)
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax needs an axis")
        return ops.softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


def resample(x: Tensor, mode: str, factor: int, axis: int = -1) -> Tensor:
    if factor < 1 or factor & (factor - 1):
        raise ValueError("factor must be a power of two")
    if mode == "avg_pool":
        return ops.avg_pool(x, factor, axis)
    if mode == "nearest_upsample":
        return ops.upsample_nearest(x, factor, axis)
    raise ValueError(f"unknown resampling mode {mode!r}")


# -- parameter-owning wrappers -------------------------------------------------

class Conv:
    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int,
                 kernel: int = 1, stride: int = 1, groups: int = 1, kind: str = "conv1d"):
        self.spec = LayerSpec(kind, c_in, c_out, kernel, stride, groups)
        fan_in = c_in // groups * kernel
        self.weight = store.uniform(f"{name}.weight", (c_out, c_in // groups, kernel), fan_in)
        self.bias = store.uniform(f"{name}.bias", (c_out,), fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        return conv(x, self.spec, self.weight, self.bias)


class Norm:
    def __init__(self, store: ParameterStore, name: str, channels: int,
                 kind: str = "group_norm", num_groups: int = 1):
        self.spec = LayerSpec(kind, channels, channels, num_groups=num_groups, axis=1)
        self.scale = store.constant(f"{name}.scale", (channels,), 1.0)
        self.shift = store.constant(f"{name}.shift", (channels,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return normalize(x, self.spec, self.scale, self.shift)


class PReLU:
    def __init__(self, store: ParameterStore, name: str, init: float = 0.25):
        self.slope = store.constant(f"{name}.slope", (1,), init)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.slope)

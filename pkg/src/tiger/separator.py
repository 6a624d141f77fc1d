"""Separator that alternates attention along the band and frame axes.

Each path is ``LayerNorm(F3A(MSA(u))) + u``; an FFI block runs two paths
(frequency then frame by default) and the same block parameters are applied
``B`` times.  Features are (batch, N, K, T) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .tensor import Conv, Norm, ParameterStore, PReLU, Tensor, no_grad, ops

PATH_ORDERS = {"F-T": ("frequency", "time"), "T-T": ("time", "time"), "F-F": ("frequency", "frequency")}

DOWN_KERNEL = 5
SA_KERNEL = 3
MLC_LAYERS = 2


@dataclass(frozen=True)
class SeparatorConfig:
    n_channels: int = 128   # N
    hidden: int = 256       # H
    depth: int = 4          # D
    n_blocks: int = 4       # B
    n_heads: int = 4        # A
    head_dim: int = 4       # E
    path_order: str = "F-T"

    def __post_init__(self):
        if self.n_channels % self.n_heads:
            raise ValueError("N must be divisible by the number of heads")
        if min(self.depth, self.n_blocks, self.head_dim, self.hidden, self.n_channels) < 1:
            raise ValueError("separator sizes must be positive")
        if self.path_order not in PATH_ORDERS:
            raise ValueError(f"path_order must be one of {sorted(PATH_ORDERS)}")


def sa_fuse(x: Tensor, y: Tensor, z: Tensor) -> Tensor:
    """Selective attention: sigmoid(x) * y + z."""
    if not (x.shape == y.shape == z.shape):
        raise ValueError(f"sa_fuse shape mismatch: {x.shape}, {y.shape}, {z.shape}")
    return ops.sigmoid(x) * y + z


class MSA:
    """Multi-scale selective attention along the last axis of (M, N, L)."""

    def __init__(self, store: ParameterStore, prefix: str, n: int, h: int, depth: int):
        self.depth = depth
        dw = dict(groups=h)
        self.inp = Conv(store, f"{prefix}.in", n, h)
        self.down = [Conv(store, f"{prefix}.down{d}", h, h, DOWN_KERNEL, stride=2, **dw)
                     for d in range(1, depth + 1)]
        self.mlc = []
        for i in range(MLC_LAYERS):
            self.mlc.append((Conv(store, f"{prefix}.mlc{i}.dw", h, h, SA_KERNEL, **dw),
                             Conv(store, f"{prefix}.mlc{i}.pw", h, h),
                             Norm(store, f"{prefix}.mlc{i}.norm", h),
                             PReLU(store, f"{prefix}.mlc{i}.act")))
        self.tau = Conv(store, f"{prefix}.tau", h, h, SA_KERNEL, **dw)
        self.rho = Conv(store, f"{prefix}.rho", h, h, SA_KERNEL, **dw)
        self.phi = [Conv(store, f"{prefix}.phi{d}", h, h, SA_KERNEL, **dw) for d in range(depth + 1)]
        self.alpha = [Conv(store, f"{prefix}.alpha{d}", h, h, SA_KERNEL, **dw) for d in range(depth)]
        self.beta = [Conv(store, f"{prefix}.beta{d}", h, h, SA_KERNEL, **dw) for d in range(depth)]
        self.gamma = [Conv(store, f"{prefix}.gamma{d}", h, h, SA_KERNEL, **dw) for d in range(depth)]
        self.out = Conv(store, f"{prefix}.out", h, n)
        self.last_lengths: list[int] = []

    def __call__(self, x: Tensor) -> Tensor:
        length = x.shape[-1]
        step = 2 ** self.depth
        padded = -(-length // step) * step
        x = ops.pad_axis(x, 2, 0, padded - length)

        enc = [self.inp(x)]
        for conv in self.down:
            enc.append(conv(enc[-1]))
        self.last_lengths = [e.shape[-1] for e in enc]

        g = enc[-1]
        for d in range(self.depth):
            g = g + ops.avg_pool(enc[d], 2 ** (self.depth - d), axis=2)
        for dw, pw, norm, act in self.mlc:
            g = act(norm(pw(dw(g))))

        tau, rho = self.tau(g), self.rho(g)
        local = []
        for d in range(self.depth + 1):
            f = 2 ** (self.depth - d)
            local.append(sa_fuse(ops.upsample_nearest(tau, f, 2), self.phi[d](enc[d]),
                                 ops.upsample_nearest(rho, f, 2)))

        dec = local[self.depth]
        for d in range(self.depth - 1, -1, -1):
            dec = sa_fuse(ops.upsample_nearest(self.alpha[d](dec), 2, 2), self.gamma[d](local[d]),
                          ops.upsample_nearest(self.beta[d](dec), 2, 2))
        out = self.out(dec)
        return ops.crop_axis(out, 2, 0, length) if padded != length else out


class F3A:
    """Multi-head attention across the K axis of (B, N, K, T), T folded into head channels."""

    def __init__(self, store: ParameterStore, prefix: str, n: int, heads: int, head_dim: int):
        if n % heads:
            raise ValueError("N must be divisible by the number of heads")
        self.heads, self.head_dim = heads, head_dim
        k1 = dict(kind="conv2d-1x1")
        self.q = Conv(store, f"{prefix}.query", n, heads * head_dim, **k1)
        self.k = Conv(store, f"{prefix}.key", n, heads * head_dim, **k1)
        self.v = Conv(store, f"{prefix}.value", n, n, **k1)
        self.out = Conv(store, f"{prefix}.out", n, n, **k1)
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        b, n, k, t = x.shape
        a, e = self.heads, self.head_dim
        q = self.q(x).reshape(b, a, e, k, t).transpose(0, 1, 3, 2, 4).reshape(b, a, k, e * t)
        kk = self.k(x).reshape(b, a, e, k, t).transpose(0, 1, 2, 4, 3).reshape(b, a, e * t, k)
        v = self.v(x).reshape(b, a, n // a, k, t).transpose(0, 1, 3, 2, 4).reshape(b, a, k, n // a * t)
        scores = ops.matmul(q, kk) * np.asarray(1.0 / np.sqrt(e * t), dtype=x.dtype)
        attn = ops.softmax(scores, axis=-1)
        self.last_attention = attn.data
        o = ops.matmul(attn, v).reshape(b, a, k, n // a, t).transpose(0, 1, 3, 2, 4).reshape(b, n, k, t)
        return self.out(o)


class Path:
    def __init__(self, store: ParameterStore, prefix: str, axis: str, cfg: SeparatorConfig):
        if axis not in ("frequency", "time"):
            raise ValueError("axis must be 'frequency' or 'time'")
        self.axis = axis
        self.msa = MSA(store, f"{prefix}.msa", cfg.n_channels, cfg.hidden, cfg.depth)
        self.f3a = F3A(store, f"{prefix}.f3a", cfg.n_channels, cfg.n_heads, cfg.head_dim)
        self.norm = Norm(store, f"{prefix}.norm", cfg.n_channels, kind="layer_norm")

    def __call__(self, u: Tensor) -> Tensor:
        return self.norm(f3a_apply(self.f3a, msa_apply(self.msa, u, self.axis), self.axis)) + u


def msa_apply(msa: MSA, u: Tensor, axis: str) -> Tensor:
    b, n, k, t = u.shape
    if axis == "frequency":
        x = u.transpose(0, 3, 1, 2).reshape(b * t, n, k)
        return msa(x).reshape(b, t, n, k).transpose(0, 2, 3, 1)
    x = u.transpose(0, 2, 1, 3).reshape(b * k, n, t)
    return msa(x).reshape(b, k, n, t).transpose(0, 2, 1, 3)


def f3a_apply(f3a: F3A, u: Tensor, axis: str) -> Tensor:
    if axis == "frequency":
        return f3a(u)
    return f3a(u.transpose(0, 1, 3, 2)).transpose(0, 1, 3, 2)


class FFIBlock:
    def __init__(self, store: ParameterStore, cfg: SeparatorConfig, prefix: str = "separator"):
        axes = PATH_ORDERS[cfg.path_order]
        self.paths = [Path(store, f"{prefix}.path{i}", axis, cfg) for i, axis in enumerate(axes)]

    def __call__(self, x: Tensor) -> Tensor:
        for path in self.paths:
            x = path(x)
        return x


class Separator:
    """``B`` applications of one shared FFI block."""

    def __init__(self, store: ParameterStore, cfg: SeparatorConfig, prefix: str = "separator"):
        self.cfg = cfg
        self.block = FFIBlock(store, cfg, prefix)

    def __call__(self, z: Tensor, n_blocks: int | None = None) -> Tensor:
        for _ in range(self.cfg.n_blocks if n_blocks is None else n_blocks):
            z = self.block(z)
        return z


# -- array-level wrappers (N x K x T in, N x K x T out) ----------------------------

FeatureLike = Union[np.ndarray, Tensor]


def _batched(feat: FeatureLike, dtype) -> Tensor:
    arr = feat.data if isinstance(feat, Tensor) else np.asarray(feat)
    if arr.ndim != 3:
        raise ValueError("expected an N x K x T feature array")
    return Tensor(arr[None].astype(dtype))


def msa_forward(feat: FeatureLike, axis: str, params: MSA) -> np.ndarray:
    with no_grad():
        return msa_apply(params, _batched(feat, params.inp.weight.dtype), axis).data[0]


def f3a_forward(feat: FeatureLike, axis: str, params: F3A) -> np.ndarray:
    with no_grad():
        return f3a_apply(params, _batched(feat, params.q.weight.dtype), axis).data[0]


def ffi_block(feat: FeatureLike, params: FFIBlock) -> np.ndarray:
    with no_grad():
        return params(_batched(feat, params.paths[0].norm.scale.dtype)).data[0]


def separate(z: FeatureLike, cfg: SeparatorConfig, params: Separator) -> np.ndarray:
    if params.cfg != cfg:
        raise ValueError("parameters were built for a different separator config")
    with no_grad():
        return params(_batched(z, params.block.paths[0].norm.scale.dtype)).data[0]

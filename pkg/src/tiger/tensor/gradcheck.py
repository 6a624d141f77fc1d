"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Iterable, Union

import numpy as np

from .core import Tensor
from .params import ParameterStore


class NonDeterministicError(RuntimeError):
    pass


def grad_check(function: Callable[[], Tensor],
               params: Union[ParameterStore, Iterable[Tensor]],
               eps: float = 1e-6,
               samples: int = 200,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` rebuilds a scalar from the current parameter values on every
    call.  Coordinates are sampled so each tensor is probed at least once
    before the remaining budget is spread uniformly.  Relative error is
    ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    tensors = params.tensors() if isinstance(params, ParameterStore) else list(params)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires double precision parameters")
        t.grad = None

    out = function()
    if float(function().data) != float(out.data):
        raise NonDeterministicError("function returned different values for identical inputs")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    sizes = np.array([t.size for t in tensors])
    picks = [(i, int(rng.integers(s))) for i, s in enumerate(sizes)][:samples]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in rng.integers(offsets[-1], size=max(samples - len(picks), 0)):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        picks.append((i, int(flat - offsets[i])))

    worst = 0.0
    for i, j in picks:
        flat = tensors[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus = float(function().data)
        flat[j] = orig - eps
        f_minus = float(function().data)
        flat[j] = orig
        fd = (f_plus - f_minus) / (2 * eps)
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst

"""Named registry of trainable arrays."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .core import Tensor


class ParameterStore:
    """Ordered mapping ``name -> Tensor`` holding every trainable array once.

    Layers keep references to the stored tensors, so conversions and loads
    replace ``tensor.data`` in place rather than rebinding names.  A block
    applied several times simply reuses the same entries, which is how
    parameter sharing is represented.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(np.uint64(self.seed & 0xFFFFFFFFFFFFFFFF))
        self._params: dict[str, Tensor] = {}

    # -- registration ---------------------------------------------------------
    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} registered twice")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = np.sqrt(1.0 / fan_in)
        return self.register(name, self.rng.uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape: tuple[int, ...], value: float) -> Tensor:
        return self.register(name, np.full(shape, value))

    # -- mapping protocol -----------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    # -- bulk operations -------------------------------------------------------
    def count(self, prefix: Optional[str] = None) -> int:
        return int(sum(t.size for n, t in self._params.items()
                       if prefix is None or n == prefix or n.startswith(prefix + ".")))

    def astype(self, dtype) -> "ParameterStore":
        self.dtype = np.dtype(dtype)
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for n, t in self._params.items():
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(self.dtype)

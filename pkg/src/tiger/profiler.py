"""Parameter and MAC accounting plus single-thread wall-clock benchmarking.

MACs count multiply-accumulates in convolutions and matrix products only;
norms, activations, softmax and the STFT pair are excluded.
"""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .model import TigerConfig, TigerModel
from .separator import DOWN_KERNEL, MLC_LAYERS, PATH_ORDERS, SA_KERNEL, SeparatorConfig
from .tensor import Tensor, count_macs as trace_macs, no_grad


# -- parameters ----------------------------------------------------------------------------

def count_params(model: TigerModel) -> int:
    return model.params.count()


def param_breakdown(model: TigerModel, depth: int = 3) -> "OrderedDict[str, int]":
    """Parameter totals grouped by the first ``depth`` components of each name."""
    out: OrderedDict[str, int] = OrderedDict()
    for name, t in model.params.items():
        parts = name.split(".")
        if parts[0] in ("bandsplit", "restore"):
            key = parts[0]
        else:
            key = ".".join(parts[:depth])
        out[key] = out.get(key, 0) + t.size
    return out


# -- MACs ----------------------------------------------------------------------------------

def msa_macs(n: int, h: int, depth: int, length: int, others: int) -> int:
    """One MSA pass over ``others`` sequences of ``length`` positions."""
    step = 2 ** depth
    p = -(-length // step) * step
    lens = [p // 2 ** d for d in range(depth + 1)]
    coarse = lens[-1]
    total = n * h * p                                      # input projection
    total += sum(h * DOWN_KERNEL * lens[d] for d in range(1, depth + 1))
    total += MLC_LAYERS * (h * SA_KERNEL * coarse + h * h * coarse)
    total += 2 * h * SA_KERNEL * coarse                    # tau, rho
    total += sum(h * SA_KERNEL * lens[d] for d in range(depth + 1))          # phi
    total += sum(2 * h * SA_KERNEL * lens[d + 1] for d in range(depth))      # alpha, beta
    total += sum(h * SA_KERNEL * lens[d] for d in range(depth))              # gamma
    total += h * n * p                                     # output projection
    return total * others


def f3a_macs(n: int, heads: int, head_dim: int, length: int, others: int) -> int:
    """Attention over ``length`` positions with ``others`` folded into the head channels."""
    grid = length * others
    proj = 2 * n * heads * head_dim * grid + 2 * n * n * grid
    scores = heads * length * length * head_dim * others
    mix = length * length * n * others
    return proj + scores + mix


def separator_macs(cfg: SeparatorConfig, k: int, t: int) -> int:
    total = 0
    for axis in PATH_ORDERS[cfg.path_order]:
        length, others = (k, t) if axis == "frequency" else (t, k)
        total += msa_macs(cfg.n_channels, cfg.hidden, cfg.depth, length, others)
        total += f3a_macs(cfg.n_channels, cfg.n_heads, cfg.head_dim, length, others)
    return total * cfg.n_blocks


def mac_breakdown(config: TigerConfig, seconds: float = 1.0,
                  sample_rate: Optional[float] = None) -> "OrderedDict[str, int]":
    sr = sample_rate or config.sample_rate
    t = config.stft.n_frames(int(round(seconds * sr)))
    scheme = config.band_scheme()
    n, c, f = config.separator.n_channels, config.n_sources, scheme.n_bins
    return OrderedDict([
        ("bandsplit", n * 2 * f * t),
        ("separator", separator_macs(config.separator, scheme.n_bands, t)),
        ("restore", 2 * f * c * n * t),
    ])


def count_macs(model: Union[TigerModel, TigerConfig], seconds: float = 1.0,
               sample_rate: Optional[float] = None) -> int:
    """Analytic MACs for one forward pass over ``seconds`` of audio."""
    config = model.config if isinstance(model, TigerModel) else model
    return int(sum(mac_breakdown(config, seconds, sample_rate).values()))


def traced_macs(model: TigerModel, seconds: float = 1.0) -> int:
    """MACs recorded by the linear ops during an actual forward pass."""
    length = int(round(seconds * model.config.sample_rate))
    with no_grad(), trace_macs() as counter:
        model.separate_tensor(Tensor(np.zeros((1, length), dtype=model.params.dtype)))
    return counter.total


# -- timing ----------------------------------------------------------------------------------

@dataclass
class Timing:
    mean_ms: float
    std_ms: float
    runs: int


def benchmark(model: TigerModel, runs: int = 1000, mode: str = "forward", warmup: int = 10,
              seconds: float = 1.0, seed: int = 0) -> Timing:
    """Wall-clock per run on ``seconds`` of noise with BLAS pinned to one thread."""
    if mode not in ("forward", "forward+backward"):
        raise ValueError("mode must be 'forward' or 'forward+backward'")
    length = int(round(seconds * model.config.sample_rate))
    x = np.random.default_rng(seed).standard_normal((1, length)).astype(model.params.dtype) * 0.1

    def once():
        if mode == "forward":
            with no_grad():
                model.separate_tensor(Tensor(x))
        else:
            y = model.separate_tensor(Tensor(x))
            (y * y).sum().backward()
            model.params.zero_grad()

    times = []
    with threadpool_limits(limits=1):
        for i in range(warmup + runs):
            start = time.perf_counter()
            once()
            if i >= warmup:
                times.append((time.perf_counter() - start) * 1e3)
    return Timing(float(np.mean(times)), float(np.std(times)), runs)


def peak_memory_bytes(model: TigerModel, seconds: float = 1.0) -> int:
    """Peak traced allocation during one forward pass (numpy reports to tracemalloc)."""
    length = int(round(seconds * model.config.sample_rate))
    x = np.zeros((1, length), dtype=model.params.dtype)
    tracemalloc.start()
    try:
        with no_grad():
            model.separate_tensor(Tensor(x))
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


# -- report ------------------------------------------------------------------------------------

REFERENCE_BUDGETS = {"small": (0.82e6, 7.65e9), "large": (0.82e6, 15.27e9), "tiny": (102.12e3, None)}


@dataclass
class CostReport:
    name: str
    params: int
    macs: int
    params_by_module: "OrderedDict[str, int]"
    macs_by_module: "OrderedDict[str, int]"
    seconds: float = 1.0
    forward: Optional[Timing] = None
    backward: Optional[Timing] = None
    peak_bytes: Optional[int] = None
    reference: tuple = field(default=(None, None))

    def to_text(self, per_layer: bool = False) -> str:
        lines = [f"model: {self.name}",
                 f"parameters: {self.params} ({self.params / 1e6:.4f} M)",
                 f"MACs per {self.seconds:g} s: {self.macs} ({self.macs / 1e9:.3f} G)"]
        ref_p, ref_m = self.reference
        if ref_p:
            lines.append(f"parameter gap vs reference {ref_p / 1e6:.4f} M: {100 * (self.params / ref_p - 1):+.1f}%")
        if ref_m:
            lines.append(f"MAC gap vs reference {ref_m / 1e9:.2f} G: {100 * (self.macs / ref_m - 1):+.1f}%")
        if self.forward:
            lines.append(f"forward: {self.forward.mean_ms:.2f} +/- {self.forward.std_ms:.2f} ms ({self.forward.runs} runs)")
        if self.backward:
            lines.append(f"forward+backward: {self.backward.mean_ms:.2f} +/- {self.backward.std_ms:.2f} ms "
                         f"({self.backward.runs} runs)")
        if self.peak_bytes is not None:
            lines.append(f"peak working set (forward): {self.peak_bytes / 2**20:.1f} MiB")
        lines.append("MACs by stage:")
        lines += [f"  {k}: {v}" for k, v in self.macs_by_module.items()]
        if per_layer:
            lines.append("parameters by module:")
            lines += [f"  {k}: {v}" for k, v in self.params_by_module.items()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["kind", "module", "value"])
        w.writerow(["params", "total", self.params])
        for k, v in self.params_by_module.items():
            w.writerow(["params", k, v])
        w.writerow(["macs", "total", self.macs])
        for k, v in self.macs_by_module.items():
            w.writerow(["macs", k, v])
        for label, t in (("forward_ms", self.forward), ("forward_backward_ms", self.backward)):
            if t:
                w.writerow([label, "mean", f"{t.mean_ms:.4f}"])
                w.writerow([label, "std", f"{t.std_ms:.4f}"])
        return buf.getvalue()


def profile(model: TigerModel, seconds: float = 1.0, runs: int = 0, warmup: int = 10,
            memory: bool = False) -> CostReport:
    name = model.config.preset
    report = CostReport(
        name=name,
        params=count_params(model),
        macs=count_macs(model, seconds),
        params_by_module=param_breakdown(model),
        macs_by_module=mac_breakdown(model.config, seconds),
        seconds=seconds,
        reference=REFERENCE_BUDGETS.get(name, (None, None)),
    )
    if runs:
        report.forward = benchmark(model, runs, "forward", warmup, seconds)
        report.backward = benchmark(model, runs, "forward+backward", warmup, seconds)
    if memory:
        report.peak_bytes = peak_memory_bytes(model, seconds)
    return report

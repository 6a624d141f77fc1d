"""Sub-band schemes, the learned band split and the mask-producing band restoration.

Bands of equal width are processed together: their per-band weights are
stacked and applied with one batched matmul.  Parameters stay separate per
band; only the arithmetic is batched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .dsp import ComplexSpectrogram
from .tensor import ParameterStore, Tensor, no_grad, ops

SPEECH_BINS = 321
DNR_BINS = 1025
DNR_BIN_HZ = 44100 / 2048
SCHEME_NAMES = ("NonSplit", "NormalSplit", "LowFreqNarrowSplit", "EvenSplit", "DnR44k")

# (width in Hz, number of bands) below 20 kHz; everything above is one band
_DNR_LAYOUT = ((50, 20), (100, 10), (250, 8), (500, 8), (1000, 8), (2000, 2))


@dataclass(frozen=True)
class BandScheme:
    name: str
    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise ValueError("band widths must be positive")

    @property
    def n_bands(self) -> int:
        return len(self.widths)

    @property
    def n_bins(self) -> int:
        return sum(self.widths)

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.widths)[:-1]]).astype(int)

    def band_of_bin(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_bands), self.widths)

    def width_groups(self) -> list[tuple[int, np.ndarray]]:
        """``(width, band indices)`` for each distinct width, in first-seen order."""
        groups: dict[int, list[int]] = {}
        for k, w in enumerate(self.widths):
            groups.setdefault(w, []).append(k)
        return [(w, np.array(ks)) for w, ks in groups.items()]

    def to_dict(self) -> dict:
        return {"name": self.name, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: dict) -> "BandScheme":
        return cls(d["name"], tuple(d["widths"]))


def _dnr_widths(n_bins: int, bin_hz: float) -> list[int]:
    edges_hz = []
    hz = 0.0
    for width, count in _DNR_LAYOUT:
        for _ in range(count):
            hz += width
            edges_hz.append(hz)
    edges = [0] + [int(round(h / bin_hz)) for h in edges_hz] + [n_bins]
    return [b - a for a, b in zip(edges[:-1], edges[1:])]


def make_scheme(name: str, n_bins: int, bin_hz: Optional[float] = None) -> BandScheme:
    """Tabulated band layouts.

    The 16 kHz schemes assume 321 bins at 25 Hz; ``DnR44k`` assumes 1025 bins
    (2048-point STFT at 44.1 kHz) with Hz edges snapped to the nearest bin.
    """
    if name not in SCHEME_NAMES:
        raise ValueError(f"unknown band scheme {name!r}; choose from {SCHEME_NAMES}")
    if name == "DnR44k":
        if n_bins != DNR_BINS:
            raise ValueError(f"DnR44k expects {DNR_BINS} bins, got {n_bins}")
        return BandScheme(name, tuple(_dnr_widths(n_bins, bin_hz or DNR_BIN_HZ)))
    if n_bins != SPEECH_BINS:
        raise ValueError(f"{name} expects {SPEECH_BINS} bins, got {n_bins}")
    if bin_hz is not None and not np.isclose(bin_hz, 25.0):
        raise ValueError(f"{name} is laid out on a 25 Hz grid, got {bin_hz} Hz")
    upper = [4] * 10 + [10] * 8 + [20] * 8 + [1]
    widths = {
        "NonSplit": [1] * 321,
        "NormalSplit": [2] * 20 + upper,
        "LowFreqNarrowSplit": [1] * 40 + upper,
        "EvenSplit": [4] * 66 + [57],
    }[name]
    return BandScheme(name, tuple(widths))


def _stacked(tensors: Sequence[Tensor], shape: tuple[int, ...]) -> Tensor:
    if len(tensors) == 1:
        return tensors[0].reshape(shape)
    return ops.stack(tensors, axis=0).reshape(shape)


class BandSplit:
    """Per band: concat(Re, Im) -> group norm (1 group) -> kernel-1 conv to N channels."""

    def __init__(self, store: ParameterStore, scheme: BandScheme, n_channels: int, prefix: str = "bandsplit"):
        self.scheme = scheme
        self.n_channels = n_channels
        self.scale, self.shift, self.weight, self.bias = [], [], [], []
        for k, g in enumerate(scheme.widths):
            p = f"{prefix}.band{k:03d}"
            self.scale.append(store.constant(f"{p}.norm.scale", (2 * g,), 1.0))
            self.shift.append(store.constant(f"{p}.norm.shift", (2 * g,), 0.0))
            self.weight.append(store.uniform(f"{p}.conv.weight", (n_channels, 2 * g, 1), 2 * g))
            self.bias.append(store.uniform(f"{p}.conv.bias", (n_channels,), 2 * g))

    def __call__(self, re: Tensor, im: Tensor) -> Tensor:
        """(B, F, T) real/imag -> (B, N, K, T)."""
        b, f, t = re.shape
        if f != self.scheme.n_bins:
            raise ValueError(f"spectrogram has {f} bins, scheme covers {self.scheme.n_bins}")
        n = self.n_channels
        starts = self.scheme.starts
        outs, order = [], []
        for g, ks in self.scheme.width_groups():
            nb = len(ks)
            bins = (starts[ks][:, None] + np.arange(g)).ravel()
            xr = ops.take(re, bins, axis=1).reshape(b, nb, g, t)
            xi = ops.take(im, bins, axis=1).reshape(b, nb, g, t)
            x = ops.concat([xr, xi], axis=2)
            x = ops.standardize(x, (2, 3))
            x = x * _stacked([self.scale[k] for k in ks], (1, nb, 2 * g, 1)) \
                + _stacked([self.shift[k] for k in ks], (1, nb, 2 * g, 1))
            w = _stacked([self.weight[k] for k in ks], (nb, n, 2 * g))
            z = ops.matmul(w, x) + _stacked([self.bias[k] for k in ks], (1, nb, n, 1))
            outs.append(z)
            order.extend(ks.tolist())
        z = ops.concat(outs, axis=1) if len(outs) > 1 else outs[0]
        z = ops.take(z, np.argsort(order), axis=1)
        return z.transpose(0, 2, 1, 3)


class BandRestore:
    """Per band: PReLU -> kernel-1 conv N -> 2*G*C -> ReLU, de-multiplexed to C complex masks."""

    def __init__(self, store: ParameterStore, scheme: BandScheme, n_channels: int, n_sources: int,
                 prefix: str = "restore"):
        self.scheme = scheme
        self.n_channels = n_channels
        self.n_sources = n_sources
        self.slope, self.weight, self.bias = [], [], []
        for k, g in enumerate(scheme.widths):
            p = f"{prefix}.band{k:03d}"
            self.slope.append(store.constant(f"{p}.prelu.slope", (1,), 0.25))
            self.weight.append(store.uniform(f"{p}.conv.weight", (2 * g * n_sources, n_channels, 1), n_channels))
            self.bias.append(store.uniform(f"{p}.conv.bias", (2 * g * n_sources,), n_channels))

    def __call__(self, feats: Tensor) -> Tensor:
        """(B, N, K, T) -> masks (B, C, 2, F, T), axis 2 holding (real, imag)."""
        b, n, k_total, t = feats.shape
        if k_total != self.scheme.n_bands:
            raise ValueError(f"features have {k_total} bands, scheme has {self.scheme.n_bands}")
        if n != self.n_channels:
            raise ValueError(f"features have {n} channels, expected {self.n_channels}")
        c = self.n_sources
        starts = self.scheme.starts
        per_band = feats.transpose(0, 2, 1, 3)
        outs, bin_order = [], []
        for g, ks in self.scheme.width_groups():
            nb = len(ks)
            x = ops.take(per_band, ks, axis=1)
            x = ops.prelu(x, _stacked([self.slope[k] for k in ks], (1, nb, 1, 1)))
            w = _stacked([self.weight[k] for k in ks], (nb, 2 * g * c, n))
            m = ops.matmul(w, x) + _stacked([self.bias[k] for k in ks], (1, nb, 2 * g * c, 1))
            m = ops.relu(m).reshape(b, nb, c, 2, g, t).transpose(0, 2, 3, 1, 4, 5)
            outs.append(m.reshape(b, c, 2, nb * g, t))
            bin_order.extend((starts[ks][:, None] + np.arange(g)).ravel().tolist())
        m = ops.concat(outs, axis=3) if len(outs) > 1 else outs[0]
        return ops.take(m, np.argsort(bin_order), axis=3)


SpecLike = Union[ComplexSpectrogram, np.ndarray]


def band_split(spec: SpecLike, scheme: BandScheme, params: BandSplit) -> np.ndarray:
    """Complex F x T spectrogram -> real N x K x T feature array."""
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    if params.scheme != scheme:
        raise ValueError("parameters were built for a different band scheme")
    dtype = params.weight[0].dtype
    with no_grad():
        z = params(Tensor(data.real[None].astype(dtype)), Tensor(data.imag[None].astype(dtype)))
    return z.data[0]


def band_restore(features: np.ndarray, scheme: BandScheme, params: BandRestore, n_sources: int) -> np.ndarray:
    """N x K x T features -> complex C x F x T masks."""
    if params.scheme != scheme:
        raise ValueError("parameters were built for a different band scheme")
    if params.n_sources != n_sources:
        raise ValueError(f"parameters produce {params.n_sources} masks, {n_sources} requested")
    with no_grad():
        m = params(Tensor(np.asarray(features, dtype=params.weight[0].dtype)[None])).data[0]
    return m[:, 0] + 1j * m[:, 1]

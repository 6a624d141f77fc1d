"""End-to-end separation model: STFT, band split, separator, restoration, masking, iSTFT."""

from __future__ import annotations

import configparser
import itertools
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import dsp
from .bandsplit import BandRestore, BandScheme, BandSplit, make_scheme
from .dsp import ComplexSpectrogram, StftConfig, Waveform
from .separator import Separator, SeparatorConfig
from .tensor import ParameterStore, Tensor, checkpoint, no_grad, ops

PRESETS = {
    "small": dict(stft=(640, 160), scheme="LowFreqNarrowSplit", n_sources=2, sample_rate=16000,
                  separator=dict(n_channels=128, hidden=256, depth=4, n_blocks=4, n_heads=4, head_dim=4)),
    "large": dict(stft=(640, 160), scheme="LowFreqNarrowSplit", n_sources=2, sample_rate=16000,
                  separator=dict(n_channels=128, hidden=256, depth=4, n_blocks=8, n_heads=4, head_dim=4)),
    "tiny": dict(stft=(640, 160), scheme="LowFreqNarrowSplit", n_sources=2, sample_rate=16000,
                 separator=dict(n_channels=24, hidden=64, depth=4, n_blocks=4, n_heads=4, head_dim=4)),
    "dnr": dict(stft=(2048, 512), scheme="DnR44k", n_sources=3, sample_rate=44100,
                separator=dict(n_channels=132, hidden=256, depth=4, n_blocks=8, n_heads=4, head_dim=4)),
}


@dataclass(frozen=True)
class TigerConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    scheme: str = "LowFreqNarrowSplit"
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    n_sources: int = 2
    sample_rate: float = 16000
    preset: str = "custom"
    widths: Optional[tuple[int, ...]] = None  # explicit band widths override the named scheme

    def __post_init__(self):
        if self.n_sources < 1:
            raise ValueError("n_sources must be >= 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.band_scheme()  # validates scheme against the STFT size

    @classmethod
    def from_preset(cls, name: str) -> "TigerConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        p = PRESETS[name]
        return cls(stft=StftConfig(*p["stft"]), scheme=p["scheme"], separator=SeparatorConfig(**p["separator"]),
                   n_sources=p["n_sources"], sample_rate=p["sample_rate"], preset=name)

    def band_scheme(self) -> BandScheme:
        if self.widths is not None:
            scheme = BandScheme(self.scheme, self.widths)
            if scheme.n_bins != self.stft.n_bins:
                raise ValueError(f"band widths sum to {scheme.n_bins}, STFT has {self.stft.n_bins} bins")
            return scheme
        return make_scheme(self.scheme, self.stft.n_bins, self.stft.bin_hz(self.sample_rate))

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "stft": {"window_size": self.stft.window_size, "hop": self.stft.hop},
            "scheme": self.scheme,
            "widths": list(self.widths) if self.widths is not None else None,
            "separator": asdict(self.separator),
            "n_sources": self.n_sources,
            "sample_rate": self.sample_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TigerConfig":
        return cls(stft=StftConfig(d["stft"]["window_size"], d["stft"]["hop"]), scheme=d["scheme"],
                   separator=SeparatorConfig(**d["separator"]), n_sources=int(d["n_sources"]),
                   sample_rate=d["sample_rate"], preset=d.get("preset", "custom"),
                   widths=tuple(d["widths"]) if d.get("widths") else None)

    def with_overrides(self, overrides: dict[str, str]) -> "TigerConfig":
        """Apply dotted ``key=value`` overrides, e.g. ``separator.n_blocks=8``."""
        d = self.to_dict()
        for key, raw in overrides.items():
            node, parts = d, key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise KeyError(f"unknown config key {key!r}")
                node = node[p]
            leaf = parts[-1]
            if leaf not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[leaf] = _parse_value(raw, node[leaf], leaf)
        if any(k != "preset" for k in overrides):
            d["preset"] = "custom" if "preset" not in overrides else d["preset"]
        return TigerConfig.from_dict(d)


def _parse_value(raw, current, key: str):
    if not isinstance(raw, str):
        return raw
    if key == "widths":
        return [int(v) for v in raw.replace(",", " ").split()]
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def load_config(path: Union[str, Path], overrides: Optional[dict[str, str]] = None) -> TigerConfig:
    """Read a sectioned ``key: value`` file.

    ``[model]`` may name a ``preset`` to start from; every other section/key
    pair is applied as a dotted override (``[separator] n_blocks: 8``).
    Keys in ``[model]`` address top-level fields.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    base = parser.get("model", "preset", fallback="small")
    cfg = TigerConfig.from_preset(base)
    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if section == "model":
                if key != "preset":
                    flat[key] = value
            else:
                flat[f"{section}.{key}"] = value
    flat.update(overrides or {})
    return cfg.with_overrides(flat) if flat else cfg


def apply_masks(spec: Union[ComplexSpectrogram, np.ndarray], masks: np.ndarray) -> list[ComplexSpectrogram]:
    """Elementwise complex product of each C x F x T mask with the mixture spectrogram."""
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    bin_hz = spec.bin_hz if isinstance(spec, ComplexSpectrogram) else 0.0
    masks = np.asarray(masks)
    if masks.ndim != 3 or masks.shape[1:] != data.shape:
        raise ValueError(f"masks {masks.shape} do not match spectrogram {data.shape}")
    return [ComplexSpectrogram(m * data, bin_hz) for m in masks]


class TigerModel:
    def __init__(self, config: TigerConfig, params: ParameterStore):
        self.config = config
        self.params = params
        self.scheme = config.band_scheme()
        n = config.separator.n_channels
        self.split = BandSplit(params, self.scheme, n)
        self.separator = Separator(params, config.separator)
        self.restore = BandRestore(params, self.scheme, n, config.n_sources)

    @classmethod
    def build(cls, config: TigerConfig, seed: int = 0, dtype=np.float32) -> "TigerModel":
        return cls(config, ParameterStore(seed, dtype))

    # -- tensor path used by training ---------------------------------------------
    def masks(self, re: Tensor, im: Tensor) -> Tensor:
        """(B, F, T) mixture spectrogram -> (B, C, 2, F, T) masks."""
        return self.restore(self.separator(self.split(re, im)))

    def separate_tensor(self, mixture: Tensor) -> Tensor:
        """(B, L) mixture -> (B, C, L) estimates, differentiable end to end."""
        length = mixture.shape[-1]
        spec = dsp.stft_tensor(mixture, self.config.stft)
        re, im = spec[0], spec[1]
        m = self.masks(re, im)
        mr, mi = m[:, :, 0], m[:, :, 1]
        xr = re.reshape(re.shape[0], 1, *re.shape[1:])
        xi = im.reshape(im.shape[0], 1, *im.shape[1:])
        return dsp.istft_tensor(mr * xr - mi * xi, mr * xi + mi * xr, self.config.stft, length)

    # -- waveform API ---------------------------------------------------------------
    def forward(self, mixture: Waveform) -> list[Waveform]:
        sr = self.config.sample_rate
        if not np.isclose(mixture.sample_rate, sr):
            raise ValueError(f"mixture is {mixture.sample_rate} Hz, model expects {sr} Hz")
        x = mixture.samples
        length = x.size
        n = self.config.stft.window_size
        if length < n:
            x = np.pad(x, (0, n - length))
        with no_grad():
            out = self.separate_tensor(Tensor(x[None].astype(self.params.dtype))).data[0]
        return [Waveform(y[:length].astype(np.float64), sr) for y in out]

    __call__ = forward

    def mask_set(self, spec: ComplexSpectrogram) -> np.ndarray:
        """Complex C x F x T masks for one spectrogram."""
        dt = self.params.dtype
        with no_grad():
            m = self.masks(Tensor(spec.data.real[None].astype(dt)), Tensor(spec.data.imag[None].astype(dt))).data[0]
        return m[:, 0] + 1j * m[:, 1]

    # -- persistence ------------------------------------------------------------------
    def save(self, path: Union[str, Path]) -> None:
        checkpoint.save(path, self.params, self.config.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TigerModel":
        cfg_dict, state = checkpoint.load(path)
        model = cls.build(TigerConfig.from_dict(cfg_dict))
        model.params.load_state(state)
        return model


def build(config: TigerConfig, seed: int = 0) -> TigerModel:
    return TigerModel.build(config, seed)


# -- long-form inference ----------------------------------------------------------------

def segment_starts(length: int, segment: int, overlap_fraction: float) -> list[int]:
    """Window starts covering ``[0, length)``; the last window is flush with the end."""
    if segment >= length:
        return [0]
    hop = max(1, segment - int(round(segment * overlap_fraction)))
    count = -(-(length - segment) // hop) + 1
    starts = [i * hop for i in range(count)]
    starts[-1] = length - segment
    return starts


def _align(prev: np.ndarray, cur: np.ndarray) -> tuple[int, ...]:
    """Permutation of ``cur`` rows maximising summed correlation with ``prev`` rows."""
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(len(cur))):
        score = sum(float(np.dot(prev[i], cur[p])) for i, p in enumerate(perm))
        if score > best_score:
            best, best_score = perm, score
    return best


def infer_long(model, wave: Waveform, segment_seconds: float, overlap_fraction: float = 0.5,
               on_segment: Optional[Callable[[int, int], None]] = None) -> list[Waveform]:
    """Sliding-window separation with permutation alignment and triangular crossfades.

    ``model`` is anything with a ``forward(Waveform) -> list[Waveform]``.
    """
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    sr = wave.sample_rate
    segment = int(round(segment_seconds * sr))
    window = getattr(getattr(getattr(model, "config", None), "stft", None), "window_size", 1)
    if segment < window:
        raise ValueError("segment is shorter than one STFT window")
    length = len(wave)
    if segment >= length:
        return model.forward(wave)

    starts = segment_starts(length, segment, overlap_fraction)
    out = None
    wsum = np.zeros(length)
    prev_out, prev_start = None, None
    for i, s in enumerate(starts):
        if on_segment:
            on_segment(i, len(starts))
        ys = np.stack([y.samples for y in model.forward(Waveform(wave.samples[s:s + segment], sr))])
        if out is None:
            out = np.zeros((len(ys), length))
        if prev_out is not None and len(ys) > 1:
            lo, hi = s, prev_start + segment
            if hi > lo:
                perm = _align(prev_out[:, lo - prev_start:hi - prev_start], ys[:, :hi - lo])
                ys = ys[list(perm)]
        w = np.ones(segment)
        if i > 0:
            ov = starts[i - 1] + segment - s
            w[:ov] = (np.arange(ov) + 0.5) / ov
        if i < len(starts) - 1:
            ov = s + segment - starts[i + 1]
            w[segment - ov:] = np.minimum(w[segment - ov:], (ov - np.arange(ov) - 0.5) / ov)
        out[:, s:s + segment] += ys * w
        wsum[s:s + segment] += w
        prev_out, prev_start = ys, s
    return [Waveform(y / wsum, sr) for y in out]

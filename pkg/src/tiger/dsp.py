"""STFT encoder / iSTFT decoder and spectrogram dumps.

Framing is centered: the signal is reflect-padded by ``window_size // 2`` on
both sides, so a signal of ``L`` samples yields ``L // hop + 1`` frames.  The
inverse divides the overlap-added synthesis by the per-sample sum of squared
windows, which makes ``istft(stft(x)) == x`` up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor.core import Tensor

WSUM_FLOOR = 1e-12


class DegenerateWindowError(ArithmeticError):
    """The synthesis window sum vanishes somewhere in the requested output."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 640
    hop: int = 160
    window_kind: str = "hann"

    def __post_init__(self):
        if not 1 <= self.hop <= self.window_size:
            raise ValueError("need 1 <= hop <= window_size")
        if self.window_kind != "hann":
            raise ValueError("only the periodic Hann window is supported")
        if self.window_size % (4 * self.hop):
            raise ValueError("window_size must be a multiple of 4*hop (constant overlap-add)")

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    def n_frames(self, length: int) -> int:
        return (length + 2 * (self.window_size // 2) - self.window_size) // self.hop + 1

    def bin_hz(self, sample_rate: float) -> float:
        return sample_rate / self.window_size


@dataclass(frozen=True)
class ComplexSpectrogram:
    data: np.ndarray  # (F, T) complex
    bin_hz: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window ``0.5 * (1 - cos(2*pi*i/n))``."""
    if n < 1:
        raise ValueError("window length must be >= 1")
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def _reflect_index(length: int, pad: int) -> np.ndarray:
    return np.pad(np.arange(length), pad, mode="reflect") if length > 1 else np.zeros(length + 2 * pad, dtype=int)


def stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """STFT over the last axis; returns complex (..., F, T)."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite samples")
    n, hop = cfg.window_size, cfg.hop
    xp = np.take(x, _reflect_index(x.shape[-1], n // 2), axis=-1)
    frames = sliding_window_view(xp, n, axis=-1)[..., ::hop, :]
    w = hann_window(n).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    spec = np.fft.rfft(frames * w, axis=-1)
    return np.swapaxes(spec, -1, -2)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Sum frames (..., T, n) placed ``hop`` apart."""
    t, n = frames.shape[-2:]
    total = n + hop * (t - 1)
    out = np.zeros(frames.shape[:-2] + (total,), dtype=frames.dtype)
    if n % hop == 0:
        for j in range(n // hop):
            chunk = frames[..., j * hop:(j + 1) * hop].reshape(frames.shape[:-2] + (t * hop,))
            out[..., j * hop:j * hop + t * hop] += chunk
    else:
        for i in range(t):
            out[..., i * hop:i * hop + n] += frames[..., i, :]
    return out


def _window_sum(cfg: StftConfig, n_frames: int, length: int, dtype) -> np.ndarray:
    n, hop = cfg.window_size, cfg.hop
    w2 = hann_window(n) ** 2
    wsum = _overlap_add(np.broadcast_to(w2, (n_frames, n)), hop)[n // 2:n // 2 + length]
    if wsum.size < length:
        raise ValueError("requested output length exceeds spectrogram coverage")
    if np.min(wsum) < WSUM_FLOOR:
        raise DegenerateWindowError("window sum vanishes inside the output range")
    return wsum.astype(dtype)


def istft_array(spec: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Inverse of :func:`stft_array`; ``spec`` is complex (..., F, T)."""
    n, hop = cfg.window_size, cfg.hop
    if spec.shape[-2] != cfg.n_bins:
        raise ValueError(f"spectrogram has {spec.shape[-2]} bins, config implies {cfg.n_bins}")
    t = spec.shape[-1]
    if length > hop * (t - 1) + n // 2:
        raise ValueError("out_length exceeds the span covered by the frames")
    real_dtype = np.float32 if spec.dtype == np.complex64 else np.float64
    w = hann_window(n).astype(real_dtype)
    frames = np.fft.irfft(np.swapaxes(spec, -1, -2), n=n, axis=-1).astype(real_dtype) * w
    wsum = _window_sum(cfg, t, length, real_dtype)
    return _overlap_add(frames, hop)[..., n // 2:n // 2 + length] / wsum


def stft(wave: Union[Waveform, np.ndarray], cfg: StftConfig, sample_rate: float = 16000.0) -> ComplexSpectrogram:
    if isinstance(wave, Waveform):
        sample_rate = wave.sample_rate
        wave = wave.samples
    return ComplexSpectrogram(stft_array(np.asarray(wave, dtype=np.float64), cfg), cfg.bin_hz(sample_rate))


def istft(spec: Union[ComplexSpectrogram, np.ndarray], cfg: StftConfig, out_length: int,
          sample_rate: float = 16000.0) -> Waveform:
    if isinstance(spec, ComplexSpectrogram):
        sample_rate = spec.bin_hz * cfg.window_size
        spec = spec.data
    if spec.ndim != 2:
        raise ValueError("expected an F x T spectrogram")
    return Waveform(istft_array(spec, cfg, out_length), sample_rate)


# -- differentiable variants ------------------------------------------------------

def _half_spectrum_weights(n: int, dtype) -> np.ndarray:
    """1 for DC (and Nyquist when n is even), 2 for bins mirrored in the full spectrum."""
    c = np.full(n // 2 + 1, 2.0)
    c[0] = 1.0
    if n % 2 == 0:
        c[-1] = 1.0
    return c.astype(dtype)


def istft_tensor(re: Tensor, im: Tensor, cfg: StftConfig, length: int) -> Tensor:
    """iSTFT of a spectrogram given as real/imag tensors (..., F, T)."""
    n, hop = cfg.window_size, cfg.hop
    dtype = re.dtype
    spec = re.data + 1j * im.data
    out = istft_array(spec.astype(np.complex64 if dtype == np.float32 else np.complex128), cfg, length)
    t = re.shape[-1]
    w = hann_window(n).astype(dtype)
    wsum = _window_sum(cfg, t, length, dtype)
    total = n + hop * (t - 1)
    scale = _half_spectrum_weights(n, dtype) / n

    def backward(g):
        gp = np.zeros(g.shape[:-1] + (total,), dtype=dtype)
        gp[..., n // 2:n // 2 + length] = g / wsum
        gf = sliding_window_view(gp, n, axis=-1)[..., ::hop, :][..., :t, :] * w
        gspec = np.swapaxes(np.fft.rfft(gf, axis=-1) * scale, -1, -2)
        return gspec.real.astype(dtype), gspec.imag.astype(dtype)

    return Tensor.make(out.astype(dtype), (re, im), backward)


def stft_tensor(x: Tensor, cfg: StftConfig) -> Tensor:
    """STFT of a real tensor (..., L) returned as (2, ..., F, T): real then imag."""
    n, hop = cfg.window_size, cfg.hop
    length = x.shape[-1]
    dtype = x.dtype
    spec = stft_array(x.data, cfg)
    t = spec.shape[-1]
    out = np.stack([spec.real, spec.imag]).astype(dtype)
    idx = _reflect_index(length, n // 2)
    w = hann_window(n).astype(dtype)
    inv_scale = n / _half_spectrum_weights(n, dtype)

    def backward(g):
        gspec = np.swapaxes((g[0] + 1j * g[1]) * inv_scale[:, None], -1, -2)
        gf = np.fft.irfft(gspec, n=n, axis=-1).astype(dtype) * w
        gp = _overlap_add(gf, hop)
        lead = gp.shape[:-1]
        gp2 = gp.reshape(-1, gp.shape[-1])
        gx = np.zeros((gp2.shape[0], length), dtype=dtype)
        np.add.at(gx.T, idx[:gp2.shape[1]], gp2.T)
        return (gx.reshape(lead + (length,)),)

    return Tensor.make(out, (x,), backward)


# -- dumps ---------------------------------------------------------------------------

def write_spectrogram_csv(path: Union[str, Path], spec: ComplexSpectrogram) -> None:
    """T rows, F magnitude columns, decimal with '.' radix."""
    mag = np.abs(spec.data).T
    np.savetxt(path, mag, delimiter=",", fmt="%.9g")


def write_spectrogram_pgm(path: Union[str, Path], spec: ComplexSpectrogram, dynamic_range_db: float = 80.0) -> None:
    """8-bit binary PGM of log magnitude; one row per bin, highest frequency first."""
    db = 20 * np.log10(np.abs(spec.data) + 1e-10)
    top = db.max()
    img = np.clip((db - (top - dynamic_range_db)) / dynamic_range_db, 0, 1)
    img = np.round(img[::-1] * 255).astype(np.uint8)
    height, width = img.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + img.tobytes())

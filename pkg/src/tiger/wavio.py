"""Mono WAV reading/writing (PCM 16-bit and IEEE float 32-bit)."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile

from .dsp import Waveform


class WavFormatError(ValueError):
    pass


def read_wav(path: Union[str, Path]) -> Waveform:
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise WavFormatError(f"{path}: {data.shape[1]} channels; only mono files are supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample format {data.dtype}; need PCM16 or float32")
    return Waveform(samples, float(rate))


def write_wav(path: Union[str, Path], wave: Waveform, fmt: str = "float32") -> None:
    """Write ``wave`` as ``fmt`` in {"float32", "pcm16"}."""
    x = np.asarray(wave.samples)
    if fmt == "float32":
        data = x.astype(np.float32)
    elif fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    rate = int(round(wave.sample_rate))
    if rate != wave.sample_rate:
        raise ValueError("WAV sample rates must be integral")
    wavfile.write(str(path), rate, data)

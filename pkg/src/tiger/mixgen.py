"""Synthetic mixtures: level-controlled speaker/noise mixing with a chosen overlap ratio.

Also provides a tone-burst source generator whose sources occupy disjoint
frequency regions, which makes small overfitting experiments meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .dsp import Waveform
from .wavio import write_wav

PEAK = 0.9


@dataclass(frozen=True)
class MixSpec:
    speaker_sdr_range: tuple[float, float] = (-5.0, 5.0)
    noise_sdr_range: tuple[float, float] = (-10.0, 10.0)
    overlap_ratio: Optional[float] = None   # None draws uniformly from [0, 1]
    duration: Optional[float] = None        # seconds; None keeps the natural length
    seed: int = 0
    with_noise: bool = True

    def __post_init__(self):
        for lo, hi in (self.speaker_sdr_range, self.noise_sdr_range):
            if lo > hi:
                raise ValueError("SDR ranges must be ordered (low, high)")
        if self.overlap_ratio is not None and not 0 <= self.overlap_ratio <= 1:
            raise ValueError("overlap_ratio must lie in [0, 1]")
        if self.duration is not None and self.duration <= 0:
            raise ValueError("duration must be positive")


@dataclass
class MixtureExample:
    mixture: Waveform
    references: list[Waveform]
    noise: Waveform
    metadata: dict = field(default_factory=dict)


def _energy(x: np.ndarray) -> float:
    return float(np.sum(np.square(x, dtype=np.float64)))


def gain_for_sdr(signal: Union[Waveform, np.ndarray], interferer: Union[Waveform, np.ndarray],
                 target_db: float) -> float:
    """Gain g on ``interferer`` so that 10 log10(|signal|^2 / |g interferer|^2) = target_db."""
    s = signal.samples if isinstance(signal, Waveform) else np.asarray(signal)
    n = interferer.samples if isinstance(interferer, Waveform) else np.asarray(interferer)
    es, en = _energy(s), _energy(n)
    if es == 0 or en == 0:
        raise ValueError("cannot set a level ratio against a silent signal")
    return float(np.sqrt(es / (en * 10 ** (target_db / 10))))


def level_db(signal: np.ndarray, interferer: np.ndarray) -> float:
    return 10 * np.log10(_energy(signal) / _energy(interferer))


def overlap_offset(len_a: int, len_b: int, ratio: float) -> int:
    """Start of b relative to a so that ``ratio`` of the shorter one is overlapped."""
    overlap = int(round(ratio * min(len_a, len_b)))
    return len_a - overlap


def make_mixture(sources: Sequence[Waveform], noise: Waveform, spec: MixSpec,
                 rng: np.random.Generator) -> MixtureExample:
    if len(sources) < 2:
        raise ValueError("need at least two sources")
    sr = sources[0].sample_rate
    if any(s.sample_rate != sr for s in sources) or noise.sample_rate != sr:
        raise ValueError("all signals must share one sample rate")

    first = sources[0].samples.astype(np.float64)
    offsets, ratios = [0], []
    for src in sources[1:]:
        ratio = spec.overlap_ratio if spec.overlap_ratio is not None else float(rng.uniform(0, 1))
        ratios.append(ratio)
        offsets.append(overlap_offset(first.size, len(src), ratio))
    natural = max(o + len(s) for o, s in zip(offsets, sources))
    length = natural
    if spec.duration is not None:
        length = int(round(spec.duration * sr))
        if natural > length:
            raise ValueError(f"placement needs {natural} samples, duration allows {length}")

    placed = np.zeros((len(sources), length))
    for i, (o, s) in enumerate(zip(offsets, sources)):
        placed[i, o:o + len(s)] = s.samples

    speaker_db, gains = [], [1.0]
    for i in range(1, len(sources)):
        db = float(rng.uniform(*spec.speaker_sdr_range))
        g = gain_for_sdr(placed[0], placed[i], db)
        placed[i] *= g
        speaker_db.append(db)
        gains.append(g)

    noise_db = None
    noise_track = np.zeros(length)
    if spec.with_noise:
        n = np.resize(noise.samples.astype(np.float64), length)  # tiles short noise
        noise_db = float(rng.uniform(*spec.noise_sdr_range))
        noise_gain = gain_for_sdr(placed.sum(axis=0), n, noise_db)
        noise_track = n * noise_gain
    else:
        noise_gain = 0.0

    mixture = placed.sum(axis=0) + noise_track
    peak = np.max(np.abs(mixture))
    rescale = 1.0
    if peak > 1:
        rescale = PEAK / peak
        placed *= rescale
        noise_track = noise_track * rescale
        mixture = placed.sum(axis=0) + noise_track

    meta = {
        "offsets": offsets,
        "overlap_ratios": ratios,
        "speaker_gains": gains,
        "speaker_sdr_targets": speaker_db,
        "speaker_sdr_realized": [level_db(placed[0], placed[i]) for i in range(1, len(sources))],
        "noise_gain": noise_gain,
        "noise_sdr_target": noise_db,
        "noise_sdr_realized": level_db(placed.sum(axis=0), noise_track) if spec.with_noise else None,
        "rescale": rescale,
    }
    return MixtureExample(Waveform(mixture, sr), [Waveform(p, sr) for p in placed],
                          Waveform(noise_track, sr) if spec.with_noise else Waveform(np.zeros(length), sr), meta)


# -- synthetic sources -------------------------------------------------------------------

def source_regions(count: int, sample_rate: float) -> list[tuple[float, float]]:
    """Disjoint frequency regions (Hz) on a log scale with guard gaps between them."""
    lo, hi = 150.0, min(6000.0, 0.4 * sample_rate)
    edges = np.geomspace(lo, hi, count + 1)
    return [(edges[i] * 1.08, edges[i + 1] / 1.08) for i in range(count)]


def synth_sources(rng: np.random.Generator, count: int, duration: float,
                  sample_rate: float = 16000) -> list[Waveform]:
    """Sums of 3-8 amplitude-modulated tone bursts, one frequency region per source."""
    if duration < 0.5:
        raise ValueError("duration must be at least 0.5 s")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    out = []
    for lo, hi in source_regions(count, sample_rate):
        x = np.zeros(n)
        for _ in range(int(rng.integers(3, 9))):
            f0 = rng.uniform(lo, hi)
            burst = int(rng.uniform(0.15, 0.5) * n)
            start = int(rng.integers(0, n - burst + 1))
            env = np.zeros(n)
            env[start:start + burst] = np.hanning(burst)
            fm = rng.uniform(2, 8)
            env *= 1 + 0.5 * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
            tone = np.zeros(n)
            for h in range(1, 4):  # harmonics that stay inside the region
                if f0 * h <= hi:
                    tone += np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
            x += rng.uniform(0.3, 1.0) * env * tone
        x *= PEAK * rng.uniform(0.5, 1.0) / np.max(np.abs(x))
        out.append(Waveform(x, sample_rate))
    return out


def synth_noise(rng: np.random.Generator, duration: float, sample_rate: float = 16000) -> Waveform:
    n = int(round(duration * sample_rate))
    return Waveform(rng.standard_normal(n) * 0.1, sample_rate)


def generate(seed: int, count: int, spec: MixSpec, n_sources: int = 2, source_seconds: float = 1.0,
             sample_rate: float = 16000) -> list[MixtureExample]:
    """Independent examples, each drawn from its own child of ``seed``."""
    examples = []
    for child in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.default_rng(child)
        sources = synth_sources(rng, n_sources, source_seconds, sample_rate)
        noise = synth_noise(rng, source_seconds, sample_rate)
        examples.append(make_mixture(sources, noise, spec, rng))
    return examples


def write_dataset(directory: Union[str, Path], examples: Sequence[MixtureExample]) -> Path:
    """One folder per example (mix.wav, s1.wav, ..., noise.wav, meta.json) plus ``manifest.txt``.

    Manifest lines list the mixture then the references, relative to the directory.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, ex in enumerate(examples):
        name = f"ex{i:05d}"
        d = root / name
        d.mkdir(exist_ok=True)
        write_wav(d / "mix.wav", ex.mixture)
        refs = []
        for k, ref in enumerate(ex.references, 1):
            write_wav(d / f"s{k}.wav", ref)
            refs.append(f"{name}/s{k}.wav")
        write_wav(d / "noise.wav", ex.noise)
        (d / "meta.json").write_text(json.dumps(ex.metadata, sort_keys=True, indent=1) + "\n")
        lines.append(" ".join([f"{name}/mix.wav"] + refs))
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest

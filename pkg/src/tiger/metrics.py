"""SDR / SI-SDR and their improvements over the unprocessed mixture."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .dsp import Waveform

EPS = 1e-8

Signal = Union[Waveform, np.ndarray]


def _pair(est: Signal, ref: Signal) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(est.samples if isinstance(est, Waveform) else est, dtype=np.float64)
    r = np.asarray(ref.samples if isinstance(ref, Waveform) else ref, dtype=np.float64)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch: {e.shape} vs {r.shape}")
    if not np.any(r):
        raise ValueError("reference is all zeros")
    return e, r


def si_sdr(est: Signal, ref: Signal) -> float:
    e, r = _pair(est, ref)
    # same operation order as the differentiable loss, so both agree bit for bit
    alpha = np.sum(e * r) / (np.sum(r * r) + EPS)
    target = alpha * r
    noise = target - e
    return float(np.log10((np.sum(target * target) + EPS) / (np.sum(noise * noise) + EPS)) * 10)


def sdr(est: Signal, ref: Signal) -> float:
    e, r = _pair(est, ref)
    d = r - e
    return float(10 * np.log10((np.sum(r * r) + EPS) / (np.sum(d * d) + EPS)))


METRICS = {"sdr": sdr, "si_sdr": si_sdr}


def improvement(metric: str, est: Signal, mixture: Signal, ref: Signal) -> float:
    fn = METRICS[metric]
    return fn(est, ref) - fn(mixture, ref)


@dataclass
class MetricRow:
    utterance_id: str
    speaker: int
    sdr: float
    si_sdr: float
    sdri: float
    si_sdri: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, utterance_id: str, estimates, mixture: Signal, references) -> None:
        for i, (est, ref) in enumerate(zip(estimates, references)):
            s, si = sdr(est, ref), si_sdr(est, ref)
            self.rows.append(MetricRow(utterance_id, i, s, si, s - sdr(mixture, ref), si - si_sdr(mixture, ref)))

    @property
    def count(self) -> int:
        return len({r.utterance_id for r in self.rows})

    def mean(self, name: str) -> float:
        """Mean over speakers within each utterance, then over utterances."""
        per_utt: dict[str, list[float]] = {}
        for r in self.rows:
            per_utt.setdefault(r.utterance_id, []).append(getattr(r, name))
        if not per_utt:
            return float("nan")
        return float(np.mean([np.mean(v) for v in per_utt.values()]))

    def summary(self) -> dict:
        return {"utterances": self.count, **{k: self.mean(k) for k in ("sdr", "si_sdr", "sdri", "si_sdri")}}

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["utterance_id", "speaker", "sdr", "si_sdr", "sdri", "si_sdri"])
            for r in self.rows:
                w.writerow([r.utterance_id, r.speaker] + [f"{v:.6f}" for v in (r.sdr, r.si_sdr, r.sdri, r.si_sdri)])

    def write_json(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")

"""Losses, Adam/AdamW, plateau scheduling and the training loop."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dsp import StftConfig, Waveform, stft_tensor
from .metrics import EPS
from .tensor import ParameterStore, Tensor, no_grad, ops


class TrainingDiverged(RuntimeError):
    pass


# -- losses ----------------------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _stack_signals(signals) -> np.ndarray:
    if isinstance(signals, (np.ndarray, Tensor)):
        return _as_array(signals)
    return np.stack([_as_array(s) for s in signals])


def si_sdr_tensor(est: Tensor, ref: np.ndarray) -> Tensor:
    """SI-SDR in dB over the last axis; ``ref`` is a constant broadcastable to ``est``."""
    ref = np.asarray(ref, dtype=est.dtype)
    alpha = (est * ref).sum(axis=-1, keepdims=True) / ((ref * ref).sum(axis=-1, keepdims=True) + EPS)
    target = alpha * ref
    noise = target - est
    ratio = ((target * target).sum(axis=-1) + EPS) / ((noise * noise).sum(axis=-1) + EPS)
    return ops.log10(ratio) * 10


def pit_loss(estimates, references) -> tuple[Tensor, list[tuple[int, ...]]]:
    """Negative SI-SDR under the best estimate-to-reference assignment.

    ``estimates``: (B, C, L) or (C, L) tensor, or a list of waveforms.
    Returns the batch-mean loss and, per item, the permutation ``p`` with
    estimate ``p[i]`` assigned to reference ``i``.
    """
    est = estimates if isinstance(estimates, Tensor) else Tensor(_stack_signals(estimates))
    ref = _stack_signals(references)
    single = est.ndim == 2
    if single:
        est = est.reshape(1, *est.shape)
        ref = ref[None]
    if est.shape != ref.shape:
        raise ValueError(f"estimate shape {est.shape} differs from reference shape {ref.shape}")
    if not np.all(np.any(ref != 0, axis=-1)):
        raise ValueError("a reference signal is all zeros")
    b, c, length = est.shape
    # pair[b, i, j] = si_sdr(est_i, ref_j)
    pair = si_sdr_tensor(est.reshape(b, c, 1, length), ref.reshape(b, 1, c, length))
    perms = list(itertools.permutations(range(c)))
    chosen, rows, cols, items = [], [], [], []
    for n in range(b):
        scores = [sum(pair.data[n, p[i], i] for i in range(c)) for p in perms]
        best = perms[int(np.argmax(scores))]
        chosen.append(best)
        items += [n] * c
        rows += list(best)
        cols += list(range(c))
    picked = pair[np.array(items), np.array(rows), np.array(cols)].reshape(b, c)
    loss = (picked.sum(axis=-1) / c * -1).mean()
    return loss, chosen


def dnr_loss(estimates, references, stft_cfg: StftConfig) -> Tensor:
    """Mean absolute error in time plus mean complex-difference modulus of the STFT."""
    est = estimates if isinstance(estimates, Tensor) else Tensor(_stack_signals(estimates))
    ref = _stack_signals(references).astype(est.dtype)
    if est.shape != ref.shape:
        raise ValueError(f"estimate shape {est.shape} differs from reference shape {ref.shape}")
    diff = est - ref
    time_term = ops.abs(diff).mean()
    spec = stft_tensor(diff, stft_cfg)
    spec_term = ops.magnitude(spec[0], spec[1]).mean()
    return time_term + spec_term


# -- optimiser ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled (AdamW) when > 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, Optional[np.ndarray]],
              state: OptimState, lr: float) -> None:
    """One bias-corrected Adam(W) update, in place on ``params``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay:
            w -= lr * state.weight_decay * w
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 1e-3, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.state = OptimState(weight_decay=weight_decay)

    def step(self) -> None:
        params = {n: t.data for n, t in self.store.items()}
        grads = {n: t.grad for n, t in self.store.items()}
        adam_step(params, grads, self.state, self.lr)

    def zero_grad(self) -> None:
        self.store.zero_grad()


def make_optimizer(kind: str, store: ParameterStore, lr: float) -> Adam:
    if kind == "adam":
        return Adam(store, lr)
    if kind == "adamw":
        return Adam(store, lr, weight_decay=0.01)
    raise ValueError(f"unknown optimizer {kind!r}")


class PlateauScheduler:
    """Halve the rate after ``patience`` epochs without improvement; stop after ``stop_patience``.

    The halving counter restarts after each reduction; the stop counter only
    restarts on a new best.
    """

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.5, stop_patience: int = 20):
        if patience < 1 or stop_patience < 1:
            raise ValueError("patience values must be positive")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.stop_patience = stop_patience
        self.best = math.inf
        self.since_best = 0
        self.since_change = 0
        self.epoch = 0

    def step(self, value: float) -> dict:
        self.epoch += 1
        improved = value < self.best
        if improved:
            self.best = value
            self.since_best = self.since_change = 0
        else:
            self.since_best += 1
            self.since_change += 1
        reduced = False
        if self.since_change >= self.patience:
            self.lr *= self.factor
            self.since_change = 0
            reduced = True
        return {"improved": improved, "reduced": reduced, "stop": self.since_best >= self.stop_patience}


# -- training loop -----------------------------------------------------------------------

@dataclass
class Example:
    mixture: np.ndarray      # (L,)
    references: np.ndarray   # (C, L)
    name: str = ""


@dataclass
class TrainConfig:
    loss: str = "neg_sisdr_pit"
    optimizer: str = "adam"
    lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    early_stop_patience: int = 20
    max_epochs: int = 500
    segment_seconds: float = 3.0
    batch_size: int = 1
    seed: int = 0
    max_steps: Optional[int] = None
    grad_clip: Optional[float] = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.loss not in ("neg_sisdr_pit", "dnr_mae"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if min(self.plateau_patience, self.early_stop_patience, self.max_epochs, self.batch_size) < 1:
            raise ValueError("patience, epochs and batch size must be positive")


@dataclass
class FitResult:
    history: list[dict]
    best_valid: float
    best_state: dict[str, np.ndarray]
    steps: int
    stop_reason: str


CROP_TRIES = 8
MIN_ACTIVE_FRACTION = 0.05


def _crop(ex: Example, length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random window; retried so every reference keeps some of its energy (SI-SDR needs it)."""
    total = ex.mixture.size
    if total <= length:
        return ex.mixture, ex.references
    energy = np.sum(ex.references ** 2, axis=1) + 1e-20
    cum = np.concatenate([np.zeros((len(energy), 1)), np.cumsum(ex.references ** 2, axis=1)], axis=1)
    best, best_frac = 0, -1.0
    for start in rng.integers(0, total - length + 1, size=CROP_TRIES):
        frac = float(np.min((cum[:, start + length] - cum[:, start]) / energy))
        if frac > best_frac:
            best, best_frac = int(start), frac
        if frac >= MIN_ACTIVE_FRACTION:
            break
    return ex.mixture[best:best + length], ex.references[:, best:best + length]


def _loss(model, cfg: TrainConfig, mix: np.ndarray, refs: np.ndarray) -> Tensor:
    dtype = model.params.dtype
    est = model.separate_tensor(Tensor(mix.astype(dtype)))
    if cfg.loss == "neg_sisdr_pit":
        return pit_loss(est, refs.astype(dtype))[0]
    return dnr_loss(est, refs.astype(dtype), model.config.stft)


def _clip(store: ParameterStore, limit: Optional[float]) -> None:
    if not limit:
        return
    total = math.sqrt(sum(float(np.sum(t.grad.astype(np.float64) ** 2)) for t in store.tensors() if t.grad is not None))
    if total > limit:
        for t in store.tensors():
            if t.grad is not None:
                t.grad *= limit / total


def evaluate_loss(model, examples: Sequence[Example], cfg: TrainConfig) -> float:
    with no_grad():
        return float(np.mean([_loss(model, cfg, ex.mixture[None], ex.references[None]).item() for ex in examples]))


def fit(model, train_set: Sequence[Example], valid_set: Sequence[Example], cfg: TrainConfig,
        checkpoint_path: Optional[Union[str, Path]] = None, history_path: Optional[Union[str, Path]] = None,
        log: Optional[Callable[[dict], None]] = None) -> FitResult:
    if not train_set or not valid_set:
        raise ValueError("training and validation sets must be nonempty")
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.params, cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.early_stop_patience)
    seg = int(round(cfg.segment_seconds * model.config.sample_rate))
    history: list[dict] = []
    best_state = model.params.state()
    steps, reason = 0, "max_epochs"

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            length = min(seg, min(ex.mixture.size for ex in batch))
            crops = [_crop(ex, length, rng) for ex in batch]
            mix = np.stack([c[0] for c in crops])
            refs = np.stack([c[1] for c in crops])
            loss = _loss(model, cfg, mix, refs)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, step {steps + 1}")
            opt.zero_grad()
            loss.backward()
            _clip(model.params, cfg.grad_clip)
            opt.lr = sched.lr
            opt.step()
            steps += 1
            losses.append(loss.item())
            if cfg.max_steps and steps >= cfg.max_steps:
                break

        valid = evaluate_loss(model, valid_set, cfg)
        if not np.isfinite(valid):
            raise TrainingDiverged(f"validation loss became {valid} at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "valid_loss": valid, "lr": sched.lr}
        events = sched.step(valid)
        history.append(row)
        if log:
            log(row)
        if events["improved"]:
            best_state = model.params.state()
            if checkpoint_path:
                model.save(checkpoint_path)
        if history_path:
            write_history(history_path, history)
        if cfg.max_steps and steps >= cfg.max_steps:
            reason = "max_steps"
            break
        if events["stop"]:
            reason = "early_stop"
            break

    return FitResult(history, sched.best, best_state, steps, reason)


def write_history(path: Union[str, Path], history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "valid_loss", "lr"])
        w.writeheader()
        w.writerows(history)


def schedule_trace(valid_losses: Sequence[float], cfg: TrainConfig) -> tuple[list[float], Optional[int]]:
    """Learning rate in force at each epoch and the epoch training stops (or None)."""
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.early_stop_patience)
    lrs = []
    for epoch, v in enumerate(valid_losses[:cfg.max_epochs], start=1):
        ev = sched.step(v)
        lrs.append(sched.lr)
        if ev["stop"]:
            return lrs, epoch
    return lrs, None


# -- manifests ----------------------------------------------------------------------------

def read_manifest(path: Union[str, Path]) -> list[tuple[Path, list[Path]]]:
    """Lines of whitespace-separated paths: mixture first, then references.

    Relative paths resolve against the manifest's directory; ``#`` starts a comment.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [path.parent / p for p in line.split()]
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: need a mixture and at least one reference")
        entries.append((parts[0], parts[1:]))
    return entries


def load_examples(path: Union[str, Path]) -> list[Example]:
    from .wavio import read_wav

    examples = []
    for mix_path, ref_paths in read_manifest(path):
        mix = read_wav(mix_path)
        refs = [read_wav(p) for p in ref_paths]
        if any(len(r) != len(mix) for r in refs):
            raise ValueError(f"{mix_path}: references differ in length from the mixture")
        examples.append(Example(mix.samples, np.stack([r.samples for r in refs]), mix_path.parent.name))
    return examples

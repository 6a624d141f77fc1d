"""Acceptance criteria, one test each.

Every criterion prints a single ``PASS``/``FAIL`` line (collected and shown in
the terminal summary, or printed directly with ``python tests/test_acceptance.py``).
"""

import itertools
import sys
import time

import numpy as np
import pytest

from tiger.bandsplit import make_scheme
from tiger.dsp import StftConfig, Waveform, istft_array, stft_array
from tiger.metrics import improvement, si_sdr
from tiger.mixgen import MixSpec, generate, make_mixture, synth_noise, synth_sources
from tiger.model import TigerConfig, TigerModel, infer_long, segment_starts
from tiger.profiler import count_macs, count_params, separator_macs, traced_macs
from tiger.separator import SeparatorConfig
from tiger.tensor import Tensor, grad_check
from tiger.training import Example, TrainConfig, fit, pit_loss

RESULTS: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def within(value: float, target: float, rel: float) -> bool:
    return abs(value / target - 1) <= rel


def gap(value: float, target: float) -> str:
    return f"{100 * (value / target - 1):+.1f}%"


MICRO = TigerConfig(stft=StftConfig(32, 8), scheme="micro", widths=(1, 1, 2, 2, 2, 3, 3, 3),
                    separator=SeparatorConfig(8, 16, 2, 2, 2, 2), n_sources=2, sample_rate=8000)


class IdentityMasks(TigerModel):
    def masks(self, re, im):
        b, f, t = re.shape
        m = np.zeros((b, self.config.n_sources, 2, f, t), dtype=re.dtype)
        m[:, :, 0] = 1
        return Tensor(m)


def test_01_band_schemes():
    expected = {
        "LowFreqNarrowSplit": [1] * 40 + [4] * 10 + [10] * 8 + [20] * 8 + [1],
        "NormalSplit": [2] * 20 + [4] * 10 + [10] * 8 + [20] * 8 + [1],
        "EvenSplit": [4] * 66 + [57],
        "NonSplit": [1] * 321,
    }
    got = {name: list(make_scheme(name, 321).widths) for name in expected}
    ok = got == expected and all(sum(w) == 321 for w in got.values())
    counts = ", ".join(f"{n} K={len(w)}" for n, w in got.items())
    report(1, "band schemes", ok, counts)


def test_02_stft_fidelity():
    cfg = StftConfig(640, 160)
    rng = np.random.default_rng(2)
    worst, bins = 0.0, set()
    for _ in range(100):
        x = rng.standard_normal(48000)
        spec = stft_array(x, cfg)
        bins.add(spec.shape[0])
        y = istft_array(spec, cfg, x.size)
        worst = max(worst, np.linalg.norm(y - x) / np.linalg.norm(x))
    report(2, "STFT round trip", worst < 1e-6 and bins == {321}, f"max rel L2 {worst:.2e}, F={sorted(bins)}")


def test_03_parameter_sharing():
    small = count_params(TigerModel.build(TigerConfig.from_preset("small")))
    large = count_params(TigerModel.build(TigerConfig.from_preset("large")))
    orders = {o: count_params(TigerModel.build(TigerConfig.from_preset("small")
                                               .with_overrides({"separator.path_order": o})))
              for o in ("F-T", "T-T", "F-F")}
    ok = small == large and set(orders.values()) == {small}
    report(3, "parameter sharing", ok, f"small {small}, large {large}, path orders {orders}")


def test_04_parameter_budget():
    small = count_params(TigerModel.build(TigerConfig.from_preset("small")))
    tiny = count_params(TigerModel.build(TigerConfig.from_preset("tiny")))
    ok = within(small, 0.82e6, 0.3) and within(tiny, 102.12e3, 0.3)
    report(4, "parameter budget", ok,
           f"small {small} ({gap(small, 0.82e6)} vs 0.82 M), tiny {tiny} ({gap(tiny, 102.12e3)} vs 102.12 K)")


def test_05_mac_accounting():
    base = TigerConfig.from_preset("small").separator
    four = separator_macs(base, 67, 101)
    eight = separator_macs(SeparatorConfig(**{**base.__dict__, "n_blocks": 8}), 67, 101)
    small = count_macs(TigerConfig.from_preset("small"))
    large = count_macs(TigerConfig.from_preset("large"))
    tiny = TigerConfig.from_preset("tiny")
    traced = [traced_macs(TigerModel.build(tiny, seed=s)) for s in (1, 2)]
    ok = (eight == 2 * four and within(small, 7.65e9, 0.3) and within(large, 15.27e9, 0.3)
          and traced[0] == traced[1] == count_macs(tiny))
    report(5, "MAC accounting", ok,
           f"B=8/B=4 = {eight / four:g}, small {small / 1e9:.3f} G ({gap(small, 7.65e9)}), "
           f"large {large / 1e9:.3f} G ({gap(large, 15.27e9)}), two inits traced {traced[0]} == {traced[1]}")


def test_06_gradient_correctness():
    model = TigerModel.build(MICRO, seed=1, dtype=np.float64)
    rng = np.random.default_rng(6)
    refs = rng.standard_normal((1, 2, 88)) * 0.3  # 88 samples at hop 8 -> T = 12
    mix = Tensor(refs.sum(1))

    def loss():
        return pit_loss(model.separate_tensor(mix), refs)[0]

    # key biases add a per-query constant to every score; softmax cancels it, so their
    # true gradient is exactly zero and a relative error is undefined there
    keys = [t for t in model.params.tensors() if t.name.endswith("key.bias")]
    params = [t for t in model.params.tensors() if not t.name.endswith("key.bias")]
    err = grad_check(loss, params, eps=1e-5, samples=250)
    for t in model.params.tensors():
        t.grad = None
    loss().backward()
    key_grad = max(float(np.abs(t.grad).max()) for t in keys)
    report(6, "end-to-end gradient", err < 1e-4 and key_grad < 1e-10,
           f"max rel error {err:.2e} over 250 coordinates, key-bias grad {key_grad:.1e}")


def pit_si_sdri(model, examples) -> float:
    scores = []
    for ex in examples:
        outs = model(ex.mixture)
        scores.append(max(
            np.mean([improvement("si_sdr", outs[p[i]], ex.mixture, ex.references[i]) for i in range(2)])
            for p in itertools.permutations(range(2))))
    return float(np.mean(scores))


def test_07_learning_sanity():
    mixtures = generate(7, 20, MixSpec(), source_seconds=0.5)
    data = [Example(m.mixture.samples, np.stack([r.samples for r in m.references]), f"ex{i}")
            for i, m in enumerate(mixtures)]
    model = TigerModel.build(TigerConfig.from_preset("tiny"), seed=0)
    before = pit_si_sdri(model, mixtures)
    start = time.time()
    result = fit(model, data, data, TrainConfig(lr=1e-3, segment_seconds=0.5, max_steps=400, seed=0))
    after = pit_si_sdri(model, mixtures)
    report(7, "learning sanity", after >= 5.0 and result.steps <= 2000,
           f"train SI-SDRi {before:.2f} -> {after:.2f} dB after {result.steps} steps "
           f"({time.time() - start:.0f} s)")


def test_08_metric_properties():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        ref = rng.standard_normal(16000)
        est = ref + rng.standard_normal(16000)
        c = rng.uniform(0.1, 100) * rng.choice([-1, 1])
        worst = max(worst, abs(si_sdr(c * est, ref) - si_sdr(est, ref)))
    ref, mix = rng.standard_normal((2, 800))
    zero_gain = improvement("si_sdr", mix, mix, ref) == 0.0 and improvement("sdr", mix, mix, ref) == 0.0
    hand = si_sdr(np.array([1.0, 1.0]), np.array([1.0, 0.0]))

    def brute(est, refs):
        c = len(refs)
        return min(-sum(si_sdr(est[p[i]], refs[i]) for i in range(c)) / c
                   for p in itertools.permutations(range(c)))

    pit_exact = all(pit_loss(Tensor(e), r)[0].item() == brute(e, r)
                    for c in (2, 3) for e, r in [rng.standard_normal((2, c, 400)) for _ in range(10)])
    ok = worst < 1e-9 and zero_gain and abs(hand) < 1e-6 and pit_exact
    report(8, "metric properties", ok,
           f"scale deviation {worst:.1e} dB, improvement(mixture)=0 {zero_gain}, "
           f"si_sdr([1,1],[1,0]) = {hand:.1e} dB, PIT == brute force {pit_exact}")


def test_09_mixer_fidelity():
    rng = np.random.default_rng(9)
    worst, exact = 0.0, True
    for _ in range(1000):
        ex = make_mixture(synth_sources(rng, 2, 0.5), synth_noise(rng, 0.5), MixSpec(), rng)
        m = ex.metadata
        worst = max(worst, abs(m["speaker_sdr_realized"][0] - m["speaker_sdr_targets"][0]),
                    abs(m["noise_sdr_realized"] - m["noise_sdr_target"]))
        total = np.sum([r.samples for r in ex.references], axis=0) + ex.noise.samples
        exact &= bool(np.array_equal(ex.mixture.samples, total))
    report(9, "mixer fidelity", worst < 0.01 and exact,
           f"max |realized - target| {worst:.2e} dB over 1000 examples, exact sum {exact}")


def test_10_long_form_stitching():
    sr = 16000
    identity = IdentityMasks.build(TigerConfig.from_preset("tiny"), dtype=np.float64)
    x = np.random.default_rng(10).standard_normal(60 * sr) * 0.3
    n_seg = len(segment_starts(x.size, 3 * sr, 0.5))
    outs = infer_long(identity, Waveform(x, sr), 3.0, 0.5)
    err = max(float(np.max(np.abs(y.samples - x))) for y in outs)
    real = TigerModel.build(TigerConfig.from_preset("small"))
    y = np.random.default_rng(11).standard_normal(7 * sr + 123) * 0.1
    lengths = {len(o) for o in infer_long(real, Waveform(y, sr), 3.0, 0.5)}
    ok = n_seg == 39 and err < 1e-6 and lengths == {y.size}
    report(10, "long-form stitching", ok,
           f"{n_seg} segments, identity max error {err:.1e}, real model lengths {sorted(lengths)} for {y.size}")


def test_11_determinism_and_checkpoint(tmp_path):
    cfg = TigerConfig.from_preset("small")
    TigerModel.build(cfg, seed=11).save(tmp_path / "a.ckpt")
    TigerModel.build(cfg, seed=11).save(tmp_path / "b.ckpt")
    same = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    model = TigerModel.build(cfg, seed=12)
    x = Waveform(np.random.default_rng(12).standard_normal(16000) * 0.1, 16000)
    before = model(x)
    model.save(tmp_path / "m.ckpt")
    after = TigerModel.load(tmp_path / "m.ckpt")(x)
    equal = all(np.array_equal(a.samples, b.samples) for a, b in zip(before, after))
    report(11, "determinism and checkpoint", same and equal,
           f"same-seed checkpoints identical {same}, reloaded forward bit-equal {equal}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

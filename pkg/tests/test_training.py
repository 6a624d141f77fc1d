import itertools

import numpy as np
import pytest

from tiger.dsp import StftConfig, stft_array
from tiger.metrics import si_sdr
from tiger.model import TigerConfig, TigerModel
from tiger.separator import SeparatorConfig
from tiger.tensor import ParameterStore, Tensor, grad_check
from tiger.training import (Adam, Example, OptimState, PlateauScheduler, TrainConfig, TrainingDiverged,
                            adam_step, dnr_loss, fit, load_examples, pit_loss, read_manifest,
                            schedule_trace)


def brute_force_pit(est, ref):
    c = len(ref)
    return min(-sum(si_sdr(est[p[i]], ref[i]) for i in range(c)) / c for p in itertools.permutations(range(c)))


@pytest.mark.parametrize("c", [2, 3, 4])
def test_pit_matches_brute_force_exactly(c):
    rng = np.random.default_rng(c)
    for _ in range(5):
        est, ref = rng.standard_normal((2, c, 64))
        loss, _ = pit_loss(Tensor(est), ref)
        assert loss.item() == brute_force_pit(est, ref)


def test_pit_identity_and_swap():
    ref = np.random.default_rng(0).standard_normal((2, 1000))
    loss, perm = pit_loss(Tensor(ref.copy()), ref)
    assert perm == [(0, 1)] and loss.item() < -100
    loss_s, perm_s = pit_loss(Tensor(ref[::-1].copy()), ref)
    assert perm_s == [(1, 0)] and loss_s.item() == loss.item()


def test_pit_invariant_under_joint_permutation():
    rng = np.random.default_rng(1)
    est, ref = rng.standard_normal((2, 3, 50))
    p = [2, 0, 1]
    a = pit_loss(Tensor(est), ref)[0].item()
    b = pit_loss(Tensor(est[p]), ref[p])[0].item()
    assert a == pytest.approx(b, abs=1e-12)


def test_pit_batch_is_mean_of_items():
    rng = np.random.default_rng(2)
    est, ref = rng.standard_normal((2, 3, 2, 40))
    batch = pit_loss(Tensor(est), ref)[0].item()
    items = [pit_loss(Tensor(est[i]), ref[i])[0].item() for i in range(3)]
    assert batch == pytest.approx(np.mean(items), abs=1e-12)


def test_pit_rejects_silent_reference():
    with pytest.raises(ValueError):
        pit_loss(Tensor(np.ones((2, 5))), np.stack([np.ones(5), np.zeros(5)]))


def test_pit_gradient():
    rng = np.random.default_rng(3)
    ref = rng.standard_normal((2, 30))
    est = Tensor(ref[::-1] + 0.3 * rng.standard_normal((2, 30)), requires_grad=True)
    assert grad_check(lambda: pit_loss(est, ref)[0], [est], eps=1e-6) < 1e-4


def test_dnr_loss_cases():
    cfg = StftConfig(64, 16)
    rng = np.random.default_rng(4)
    ref = rng.standard_normal((3, 400))
    assert dnr_loss(Tensor(ref.copy()), ref, cfg).item() == 0.0
    c = 0.25
    got = dnr_loss(Tensor(ref + c), ref, cfg).item()
    spec_term = np.mean(np.abs(stft_array(np.full(400, c), cfg)))
    assert got == pytest.approx(c + spec_term, rel=1e-10)
    err = rng.standard_normal((3, 400))
    t1 = np.mean(np.abs(err))
    t2 = np.mean(np.abs(2 * err))
    assert t2 == 2 * t1
    d1 = dnr_loss(Tensor(ref + err), ref, cfg).item()
    d2 = dnr_loss(Tensor(ref + 2 * err), ref, cfg).item()
    assert d2 == pytest.approx(2 * d1, rel=1e-10)  # both terms are homogeneous
    with pytest.raises(ValueError):
        dnr_loss(Tensor(ref[:, :10]), ref, cfg)


def test_dnr_loss_gradient():
    cfg = StftConfig(32, 8)
    rng = np.random.default_rng(5)
    ref = rng.standard_normal((3, 90))
    est = Tensor(ref + rng.standard_normal((3, 90)), requires_grad=True)
    assert grad_check(lambda: dnr_loss(est, ref, cfg), [est], eps=1e-6) < 1e-4


def test_first_adam_step_by_hand():
    w = {"w": np.array([1.0])}
    state = OptimState()
    adam_step(w, {"w": 2 * w["w"]}, state, lr=0.1)
    assert w["w"][0] == pytest.approx(1 - 0.1 * 2 / (2 + 1e-8), abs=1e-15)
    assert w["w"][0] == pytest.approx(0.9)


def test_zero_gradient_leaves_parameters():
    w = {"w": np.array([0.3, -0.2])}
    state = OptimState()
    adam_step(w, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(w["w"], [0.3, -0.2])
    assert state.step == 1


def test_mirrored_parameters_stay_mirrored():
    rng = np.random.default_rng(6)
    w = {"a": np.array([0.7]), "b": np.array([-0.7])}
    state = OptimState(weight_decay=0.01)
    for _ in range(50):
        g = rng.standard_normal()
        adam_step(w, {"a": np.array([g]), "b": np.array([-g])}, state, lr=0.01)
        assert w["a"][0] == -w["b"][0]


def test_adamw_decays_decoupled():
    w = {"w": np.array([2.0])}
    adam_step(w, {"w": np.zeros(1)}, OptimState(weight_decay=0.01), lr=0.1)
    assert w["w"][0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(FloatingPointError, match="layer.w"):
        adam_step({"layer.w": np.ones(2)}, {"layer.w": np.array([1.0, np.nan])}, OptimState(), lr=0.1)


def test_adam_on_store():
    store = ParameterStore(0, dtype=np.float64)
    w = store.constant("w", (1,), 1.0)
    opt = Adam(store, lr=0.1)
    (w * w).sum().backward()
    opt.step()
    assert w.data[0] == pytest.approx(0.9)


def test_flat_validation_schedule():
    lrs, stop = schedule_trace([5.0] * 100, TrainConfig())
    assert lrs[9] == 1e-3 and lrs[10] == 5e-4  # halved at epoch 11
    assert stop == 21
    assert lrs[20] == 2.5e-4


def test_improving_validation_never_halves():
    cfg = TrainConfig(max_epochs=50)
    lrs, stop = schedule_trace(list(np.linspace(10, 1, 50)), cfg)
    assert stop is None and len(lrs) == 50 and set(lrs) == {1e-3}


def test_scheduler_rejects_bad_patience():
    with pytest.raises(ValueError):
        PlateauScheduler(1e-3, patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def _micro_model(seed=0):
    cfg = TigerConfig(stft=StftConfig(32, 8), scheme="micro", widths=(1, 1, 2, 2, 2, 3, 3, 3),
                      separator=SeparatorConfig(8, 16, 2, 2, 2, 2), n_sources=2, sample_rate=8000)
    return TigerModel.build(cfg, seed)


def _micro_data(n, seed=0, length=160):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        refs = rng.standard_normal((2, length)) * 0.1
        out.append(Example(refs.sum(0), refs, f"u{i}"))
    return out


def test_fit_runs_and_is_reproducible(tmp_path):
    data = _micro_data(3)
    cfg = TrainConfig(max_epochs=2, segment_seconds=0.015, seed=3)
    a, b = _micro_model(), _micro_model()
    ra = fit(a, data, data, cfg, checkpoint_path=tmp_path / "a.ckpt", history_path=tmp_path / "h.csv")
    rb = fit(b, data, data, cfg)
    assert ra.history == rb.history
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    assert (tmp_path / "a.ckpt").is_file()
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,valid_loss,lr" and len(lines) == 3
    assert ra.steps == 6 and ra.stop_reason == "max_epochs"


def test_fit_max_steps_and_divergence():
    data = _micro_data(4)
    r = fit(_micro_model(), data, data[:1], TrainConfig(max_epochs=5, max_steps=3, segment_seconds=0.02))
    assert r.steps == 3 and r.stop_reason == "max_steps"
    bad = [Example(np.full(160, np.nan), np.ones((2, 160)))]
    with pytest.raises((TrainingDiverged, ValueError, FloatingPointError)):
        fit(_micro_model(), bad, bad, TrainConfig(max_epochs=1))


def test_fit_requires_data():
    with pytest.raises(ValueError):
        fit(_micro_model(), [], _micro_data(1), TrainConfig())


def test_manifest_reading(tmp_path):
    from tiger.dsp import Waveform
    from tiger.wavio import write_wav

    d = tmp_path / "ex0"
    d.mkdir()
    rng = np.random.default_rng(7)
    refs = rng.standard_normal((2, 100)).astype(np.float32) * 0.1
    for name, x in (("s1", refs[0]), ("s2", refs[1]), ("mix", refs.sum(0))):
        write_wav(d / f"{name}.wav", Waveform(x.astype(np.float64), 8000))
    (tmp_path / "m.txt").write_text("# comment\nex0/mix.wav ex0/s1.wav ex0/s2.wav\n\n")
    entries = read_manifest(tmp_path / "m.txt")
    assert entries == [(tmp_path / "ex0/mix.wav", [tmp_path / "ex0/s1.wav", tmp_path / "ex0/s2.wav"])]
    ex = load_examples(tmp_path / "m.txt")[0]
    assert ex.references.shape == (2, 100) and ex.name == "ex0"
    (tmp_path / "bad.txt").write_text("only_one.wav\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.txt")

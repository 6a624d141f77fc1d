import numpy as np
import pytest
from scipy.io import wavfile

from tiger.dsp import Waveform
from tiger.wavio import WavFormatError, read_wav, write_wav


def test_float_round_trip_is_exact_at_float32(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 1234).astype(np.float32).astype(np.float64)
    write_wav(tmp_path / "a.wav", Waveform(x, 16000))
    w = read_wav(tmp_path / "a.wav")
    assert w.sample_rate == 16000
    np.testing.assert_array_equal(w.samples, x)


def test_pcm16_round_trip_within_one_step(tmp_path):
    x = np.sin(np.linspace(0, 20, 800)) * 0.8
    write_wav(tmp_path / "p.wav", Waveform(x, 8000), fmt="pcm16")
    w = read_wav(tmp_path / "p.wav")
    assert np.max(np.abs(w.samples - x)) <= 1 / 32768


def test_pcm16_clips(tmp_path):
    write_wav(tmp_path / "c.wav", Waveform(np.array([2.0, -2.0, 0.0]), 8000), fmt="pcm16")
    _, data = wavfile.read(tmp_path / "c.wav")
    assert list(data) == [32767, -32768, 0]


def test_rejects_stereo_and_odd_formats(tmp_path):
    wavfile.write(tmp_path / "s.wav", 8000, np.zeros((10, 2), np.int16))
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "s.wav")
    wavfile.write(tmp_path / "i.wav", 8000, np.zeros(10, np.int32))
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "i.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(WavFormatError):
        read_wav(tmp_path / "junk.wav")
    with pytest.raises(ValueError):
        write_wav(tmp_path / "x.wav", Waveform(np.zeros(4), 8000), fmt="pcm24")

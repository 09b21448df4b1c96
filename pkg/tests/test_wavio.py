import numpy as np
import pytest

from gmmsep.dsp import AudioClip
from gmmsep.wavio import read_wav, resample, wav_info, write_wav


@pytest.mark.parametrize("subtype,tol", [("float32", 1e-7), ("pcm16", 1 / 2**15),
                                         ("pcm24", 1 / 2**23)])
def test_round_trip(tmp_path, rng, subtype, tol):
    clip = AudioClip(rng.uniform(-0.9, 0.9, size=(2, 1000)), 22050)
    write_wav(tmp_path / "x.wav", clip, subtype)
    back = read_wav(tmp_path / "x.wav")
    assert back.sample_rate == 22050 and back.samples.shape == (2, 1000)
    np.testing.assert_allclose(back.samples, clip.samples, atol=tol)
    assert wav_info(tmp_path / "x.wav") == (22050, 1000)


def test_resample_on_read(tmp_path):
    t = np.arange(48000) / 48000
    write_wav(tmp_path / "x.wav", AudioClip(np.sin(2 * np.pi * 440 * t), 48000))
    clip = read_wav(tmp_path / "x.wav", sample_rate=16000)
    assert clip.sample_rate == 16000 and clip.num_samples == 16000
    spectrum = np.abs(np.fft.rfft(clip.samples[0]))
    assert np.argmax(spectrum) == 440


def test_resample_identity(rng):
    clip = AudioClip(rng.standard_normal(100), 8000)
    assert resample(clip, 8000) is clip


def test_bad_subtype(tmp_path):
    with pytest.raises(ValueError):
        write_wav(tmp_path / "x.wav", AudioClip(np.zeros(10), 8000), "pcm8")

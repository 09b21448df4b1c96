"""WAV reading and writing (16/24-bit PCM, 32-bit float; mono or stereo)."""

from __future__ import annotations

import math
import os
import wave

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .dsp import AudioClip

SUBTYPES = ("pcm16", "pcm24", "float32")


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data / 32768.0
    if data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        return data / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def resample(clip: AudioClip, sample_rate: int) -> AudioClip:
    if clip.sample_rate == sample_rate:
        return clip
    g = math.gcd(int(clip.sample_rate), int(sample_rate))
    y = resample_poly(clip.samples, sample_rate // g, clip.sample_rate // g, axis=1)
    return AudioClip(y, sample_rate)


def read_wav(path: str | os.PathLike, sample_rate: int | None = None) -> AudioClip:
    """Load a WAV file as float64 in [-1, 1], resampling if ``sample_rate`` is given."""
    rate, data = wavfile.read(os.fspath(path))
    x = _to_float(data)
    x = x[None, :] if x.ndim == 1 else x.T
    if x.shape[0] > 2:
        raise ValueError(f"{path}: {x.shape[0]} channels, only mono/stereo supported")
    clip = AudioClip(x, int(rate))
    if sample_rate is not None:
        clip = resample(clip, sample_rate)
    return clip


def wav_info(path: str | os.PathLike) -> tuple[int, int]:
    """``(sample_rate, num_samples)`` without decoding the whole file."""
    try:
        rate, data = wavfile.read(os.fspath(path), mmap=True)
    except ValueError:
        # 24-bit PCM cannot be memory-mapped
        rate, data = wavfile.read(os.fspath(path))
    return int(rate), int(data.shape[0])


def write_wav(path: str | os.PathLike, clip: AudioClip, subtype: str = "float32") -> None:
    x = clip.samples.T
    if subtype == "float32":
        wavfile.write(os.fspath(path), clip.sample_rate, x.astype(np.float32))
        return
    if subtype not in SUBTYPES:
        raise ValueError(f"unknown subtype {subtype!r}, expected one of {SUBTYPES}")
    bits = 16 if subtype == "pcm16" else 24
    scale = 2 ** (bits - 1)
    ints = np.ascontiguousarray(np.clip(np.round(x * scale), -scale, scale - 1).astype("<i4"))
    if bits == 16:
        raw = ints.astype("<i2").tobytes()
    else:
        raw = ints.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(clip.channels)
        w.setsampwidth(bits // 8)
        w.setframerate(clip.sample_rate)
        w.writeframes(raw)

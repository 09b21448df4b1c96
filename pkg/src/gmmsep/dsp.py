"""Signal front end: STFT analysis/synthesis, log magnitude and mel projection.

Spectrograms are stored frequency-major (``F x T``). The STFT uses a
centered frame convention: the signal is zero padded by ``window_size // 2``
on the left and frame ``t`` is centered on sample ``t * hop_size``, giving
``T = ceil(n / hop_size)`` frames. Synthesis is weighted overlap-add divided
by the accumulated squared window, so reconstruction is exact wherever at
least one frame covers a sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WINDOWS = ("sqrt_hann", "hann", "rect")


def _window(name: str, size: int) -> np.ndarray:
    if name == "rect":
        return np.ones(size)
    # periodic hann
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(size) / size)
    if name == "hann":
        return hann
    if name == "sqrt_hann":
        return np.sqrt(hann)
    raise ValueError(f"unknown window {name!r}, expected one of {WINDOWS}")


@dataclass(frozen=True)
class AudioClip:
    """Multichannel audio, stored as a ``(channels, n)`` float64 array."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] not in (1, 2):
            raise ValueError(f"expected 1 or 2 channels, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    def channel(self, i: int) -> "AudioClip":
        return AudioClip(self.samples[i], self.sample_rate)

    def to_mono(self) -> "AudioClip":
        return AudioClip(self.samples.mean(axis=0), self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 2048
    hop_size: int = 512
    window: str = "sqrt_hann"

    def __post_init__(self):
        if not 0 < self.hop_size <= self.window_size:
            raise ValueError("need 0 < hop_size <= window_size")
        # weighted overlap-add needs sum_k w^2[n + k hop] constant
        w2 = _window(self.window, self.window_size) ** 2
        if self.window_size % self.hop_size:
            raise ValueError("hop_size must divide window_size")
        acc = w2.reshape(-1, self.hop_size).sum(axis=0)
        if np.ptp(acc) > 1e-9 * acc.max():
            raise ValueError(
                f"{self.window} window is not overlap-add constant at hop {self.hop_size}"
            )

    @property
    def num_bins(self) -> int:
        return self.window_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        return _window(self.window, self.window_size)


@dataclass(frozen=True)
class ComplexSpectrogram:
    values: np.ndarray
    config: StftConfig
    sample_rate: int
    length: int = field(default=0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.complex128)
        if v.ndim != 2 or v.shape[0] != self.config.num_bins:
            raise ValueError(
                f"spectrogram must be {self.config.num_bins} x T, got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", v)
        if not self.length:
            object.__setattr__(self, "length", v.shape[1] * self.config.hop_size)

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "ComplexSpectrogram":
        return ComplexSpectrogram(values, self.config, self.sample_rate, self.length)


def num_frames(n: int, hop_size: int, window_size: int | None = None) -> int:
    """Centred frames needed for ``n`` samples: ``ceil(n / hop)`` whenever hop <= window / 2."""
    T = max(1, math.ceil(n / hop_size))
    if window_size is not None:
        T = max(T, math.ceil((n + window_size // 2 - window_size) / hop_size) + 1)
    return T


def stft(clip: AudioClip | np.ndarray, cfg: StftConfig, sample_rate: int | None = None) -> ComplexSpectrogram:
    """Short-time Fourier transform of a single-channel clip.

    Inputs shorter than one window are zero padded to a single frame.
    """
    if isinstance(clip, AudioClip):
        if clip.channels != 1:
            raise ValueError("stft expects a mono clip; process channels separately")
        x = clip.samples[0]
        sample_rate = clip.sample_rate
    else:
        x = np.asarray(clip, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("stft expects a 1-D signal")
        if sample_rate is None:
            raise ValueError("sample_rate required for raw arrays")
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot analyse an empty signal")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal contains non-finite samples")

    N, hop = cfg.window_size, cfg.hop_size
    T = num_frames(n, hop, N)
    half = N // 2
    padded = np.zeros(max((T - 1) * hop + N, half + n))
    padded[half : half + n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, N)[::hop][:T]
    values = np.fft.rfft(frames * cfg.analysis_window(), axis=1).T
    return ComplexSpectrogram(values, cfg, sample_rate, n)


def istft(spec: ComplexSpectrogram, length: int | None = None) -> AudioClip:
    """Inverse STFT by weighted overlap-add; returns ``length`` samples."""
    cfg = spec.config
    T = spec.num_frames
    if T == 0:
        raise ValueError("cannot invert an empty spectrogram")
    N, hop, half = cfg.window_size, cfg.hop_size, cfg.window_size // 2
    w = cfg.analysis_window()
    frames = np.fft.irfft(spec.values.T, n=N, axis=1) * w

    total = (T - 1) * hop + N
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for t in range(T):
        out[t * hop : t * hop + N] += frames[t]
        norm[t * hop : t * hop + N] += w2
    covered = norm > 1e-10
    out[covered] /= norm[covered]
    out[~covered] = 0.0

    n = spec.length if length is None else length
    y = np.zeros(n)
    seg = out[half : half + n]
    y[: len(seg)] = seg
    return AudioClip(y, spec.sample_rate)


def log_magnitude(spec: ComplexSpectrogram | np.ndarray, floor_db: float = -80.0) -> np.ndarray:
    """``20 log10 |X|`` clamped below at ``floor_db`` relative to the maximum.

    A spectrogram whose peak magnitude is 1 therefore has its floor at exactly
    ``floor_db``. An all-zero input returns ``floor_db`` everywhere.
    """
    if not np.isfinite(floor_db):
        raise ValueError("floor_db must be finite")
    values = spec.values if isinstance(spec, ComplexSpectrogram) else spec
    mag = np.abs(np.asarray(values))
    peak = mag.max(initial=0.0)
    if peak <= 0.0:
        return np.full(mag.shape, float(floor_db))
    ref_db = 20.0 * np.log10(peak)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return np.maximum(db, ref_db + floor_db)


# --- mel filterbank ---------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * _F_SP
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    sample_rate: int

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("filterbank weights must be a 2-D M x F matrix")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("filterbank weights must be finite and nonnegative")
        if np.any(w.max(axis=1) <= 0):
            raise ValueError("every mel filter needs at least one positive weight")
        object.__setattr__(self, "weights", w)

    @property
    def mel_bins(self) -> int:
        return self.weights.shape[0]

    @property
    def num_bins(self) -> int:
        return self.weights.shape[1]


def mel_filterbank(sample_rate: int, window_size: int, mel_bins: int,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular Slaney-scale filters with unit-area (Slaney) normalization.

    When a filter is narrower than the FFT bin spacing none of its triangle
    lands on a bin; such a filter falls back to a single weight at the bin
    nearest its center so every mel row stays non-empty.
    """
    fmax = sample_rate / 2.0 if fmax is None else fmax
    n_bins = window_size // 2 + 1
    fft_hz = np.linspace(0.0, sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_hz - lo) / (center - lo)
    down = (hi - fft_hz) / (hi - center)
    weights = np.maximum(0.0, np.minimum(up, down))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]

    empty = weights.max(axis=1) <= 0
    for m in np.flatnonzero(empty):
        k = int(np.argmin(np.abs(fft_hz - edges[m + 1])))
        weights[m, k] = 2.0 / (edges[m + 2] - edges[m])
    return MelFilterbank(weights, sample_rate)


def _check_rows(mat: np.ndarray, expected: int, what: str):
    if mat.ndim != 2 or mat.shape[0] != expected:
        raise ValueError(f"{what}: expected {expected} rows, got shape {mat.shape}")


def mel_project(mat: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Apply the filterbank: ``(M x F) @ (F x T)``."""
    mat = np.asarray(mat, dtype=np.float64)
    _check_rows(mat, fb.num_bins, "mel_project")
    return fb.weights @ mat


def mel_average(mat: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Filterbank projection with each mel row rescaled to sum to one.

    Keeps the units of the input (dB stays dB, masks stay in [0, 1]).
    """
    w = fb.weights / fb.weights.sum(axis=1, keepdims=True)
    mat = np.asarray(mat, dtype=np.float64)
    _check_rows(mat, fb.num_bins, "mel_average")
    return w @ mat


def unprojection_matrix(fb: MelFilterbank) -> np.ndarray:
    """``F x M`` lifting matrix: the filterbank transpose with rows summing to one.

    Frequency bins not covered by any filter get an all-zero row.
    """
    lift = fb.weights.T.copy()
    s = lift.sum(axis=1, keepdims=True)
    np.divide(lift, s, out=lift, where=s > 0)
    return lift


def mel_unproject_mask(mel_mask: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Lift an ``M x T`` mel-domain mask to ``F x T`` and clamp to [0, 1]."""
    mel_mask = np.asarray(mel_mask, dtype=np.float64)
    _check_rows(mel_mask, fb.mel_bins, "mel_unproject_mask")
    if not np.all(np.isfinite(mel_mask)):
        raise ValueError("mask contains non-finite values")
    return np.clip(unprojection_matrix(fb) @ mel_mask, 0.0, 1.0)

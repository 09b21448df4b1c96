"""Incoherent mixture synthesis from a bank of isolated stems.

A mixture takes one random excerpt per class, each from a different song
whenever the bank allows it, and sums them sample by sample. Mixtures are
described by a :class:`MixtureSpec`; a dataset is a JSON-lines manifest of
specs, so rendering is reproducible from the manifest alone.

For experiments without real multitrack audio, :func:`synth_stem` produces
band-separated class-like signals:

========  ==========================================================
vocals    harmonics 2-3 of a vibrato tone, 600-1200 Hz
drums     exponentially decaying noise bursts, 3-7 kHz "burst band"
bass      sine with a weak second harmonic, 60-240 Hz
other     three-note major chord pad, 1.5-2.5 kHz
========  ==========================================================
"""

from __future__ import annotations

import json
import logging
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .classgmm import DEFAULT_CLASSES
from .dsp import AudioClip
from .wavio import read_wav, wav_info, write_wav

log = logging.getLogger(__name__)

SYNTH_BANDS = {
    "vocals": (600.0, 1200.0),
    "drums": (3000.0, 7000.0),
    "bass": (60.0, 240.0),
    "other": (1500.0, 2500.0),
}

SILENCE_LEVEL = 1e-4


def _seed_for(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode())


def drum_band(sample_rate: int) -> tuple[float, float]:
    """Burst band for ``sample_rate``, clipped below Nyquist."""
    lo, hi = SYNTH_BANDS["drums"]
    hi = min(hi, 0.45 * sample_rate)
    return min(lo, 0.6 * hi), hi


def synth_stem(class_name: str, duration: float, sample_rate: int, seed: int) -> AudioClip:
    """Seeded synthetic stem for one of the four classes (see module docstring)."""
    if class_name not in SYNTH_BANDS:
        raise ValueError(f"no synthesizer for class {class_name!r}")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    level = 0.1 * 10 ** (rng.uniform(-3, 3) / 20)

    if class_name == "vocals":
        f0 = rng.uniform(310.0, 390.0)
        rate = rng.uniform(4.0, 6.0)
        inst = f0 * (1 + 0.015 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(inst) / sample_rate
        x = np.sin(2 * phase) + 0.6 * np.sin(3 * phase)
        # syllable-like amplitude envelope
        x *= 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.5, 3.0) * t) ** 2
    elif class_name == "bass":
        f0 = rng.uniform(60.0, 120.0)
        phase = 2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi)
        x = np.sin(phase) + 0.3 * np.sin(2 * phase)
    elif class_name == "other":
        root = rng.uniform(1500.0, 1650.0)
        x = sum(np.sin(2 * np.pi * root * r * t + rng.uniform(0, 2 * np.pi))
                for r in (1.0, 1.25, 1.5))
        x *= 0.8 + 0.2 * np.sin(2 * np.pi * rng.uniform(0.3, 1.0) * t)
    else:
        lo, hi = drum_band(sample_rate)
        sos = butter(6, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        noise = sosfilt(sos, rng.standard_normal(n))
        env = np.zeros(n)
        period = rng.uniform(0.2, 0.3)
        onset = rng.uniform(0.0, period)
        decay = rng.uniform(0.02, 0.04)
        while onset < duration:
            k = int(onset * sample_rate)
            env[k:] += rng.uniform(0.7, 1.0) * np.exp(-(t[k:] - t[k]) / decay)
            onset += period * rng.uniform(0.9, 1.1)
        x = noise * env

    rms = np.sqrt(np.mean(x ** 2)) if n else 0.0
    if rms > 0:
        x = x * (level / rms)
    return AudioClip(x, sample_rate)


@dataclass(frozen=True)
class StemEntry:
    class_name: str
    path: str
    duration: float
    song: str = ""

    def __post_init__(self):
        if not self.song:
            object.__setattr__(self, "song", Path(self.path).parent.name)


@dataclass
class StemBank:
    entries: list[StemEntry]
    split: str = "train"
    classes: tuple = DEFAULT_CLASSES

    def for_class(self, name: str) -> list[StemEntry]:
        return [e for e in self.entries if e.class_name == name]

    def validate(self, min_duration: float = 0.0) -> None:
        for c in self.classes:
            usable = [e for e in self.for_class(c) if e.duration >= min_duration]
            if not usable:
                raise ValueError(f"stem bank ({self.split}) has no usable entries for class {c!r}")

    @property
    def songs(self) -> set[str]:
        return {e.song for e in self.entries}

    @classmethod
    def from_directory(cls, root, split: str = "train", classes=DEFAULT_CLASSES) -> "StemBank":
        """Bank from a ``<root>/<song>/<class>.wav`` tree (MUSDB-style layout).

        A ``<root>/<split>/`` subdirectory is used when present.
        """
        root = Path(root)
        if (root / split).is_dir():
            root = root / split
        if not root.is_dir():
            raise FileNotFoundError(f"stem bank directory {root} not found")
        entries = []
        for song in sorted(p for p in root.iterdir() if p.is_dir()):
            for c in classes:
                f = song / f"{c}.wav"
                if f.is_file():
                    rate, n = wav_info(f)
                    entries.append(StemEntry(c, str(f), n / rate, song.name))
        return cls(entries, split, tuple(classes))


def synthetic_bank(out_dir, split: str = "train", num_songs: int = 8, duration: float = 4.0,
                   sample_rate: int = 16000, seed: int = 0, classes=DEFAULT_CLASSES) -> StemBank:
    """Write ``num_songs`` synthetic multitrack songs as WAV files and return their bank.

    Songs from different ``split`` names or seeds never share synthesis seeds.
    """
    out = Path(out_dir) / split
    entries = []
    for i in range(num_songs):
        song = f"synth-{split}-{seed}-{i:03d}"
        (out / song).mkdir(parents=True, exist_ok=True)
        for c in classes:
            path = out / song / f"{c}.wav"
            if not path.exists():
                write_wav(path, synth_stem(c, duration, sample_rate, _seed_for(song, c)))
            entries.append(StemEntry(c, str(path), duration, song))
    return StemBank(entries, split, tuple(classes))


@dataclass(frozen=True)
class SourceExcerpt:
    path: str
    offset: float
    gain_db: float = 0.0
    active: bool = True


@dataclass(frozen=True)
class MixtureSpec:
    id: str
    sources: dict = field(hash=False)  # class name -> SourceExcerpt
    duration: float = 3.2
    sample_rate: int = 48000
    seed: int = 0

    def __post_init__(self):
        for name, src in self.sources.items():
            if src.offset < 0:
                raise ValueError(f"negative offset for {name}")

    def to_json(self) -> str:
        d = {
            "id": self.id,
            "duration": self.duration,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "sources": {k: {"path": v.path, "offset": v.offset, "gain_db": v.gain_db,
                            "active": v.active}
                        for k, v in self.sources.items()},
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MixtureSpec":
        d = json.loads(line)
        sources = {k: SourceExcerpt(v["path"], float(v["offset"]), float(v.get("gain_db", 0.0)),
                                    bool(v.get("active", True)))
                   for k, v in d["sources"].items()}
        return cls(d["id"], sources, float(d["duration"]), int(d["sample_rate"]), int(d["seed"]))


class _StemCache:
    def __init__(self, sample_rate: int, maxsize: int = 64):
        self.sample_rate = sample_rate
        self.maxsize = maxsize
        self._data: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._data:
            if len(self._data) >= self.maxsize:
                self._data.pop(next(iter(self._data)))
            self._data[path] = read_wav(path, self.sample_rate).samples.sum(axis=0)
        return self._data[path]


def _excerpt(x: np.ndarray, offset: float, n: int, sample_rate: int) -> np.ndarray:
    start = int(round(offset * sample_rate))
    seg = x[start : start + n]
    if len(seg) < n:
        raise ValueError(f"stem too short for a {n}-sample excerpt at {offset:.3f} s")
    return seg


def _mostly_silent(seg: np.ndarray) -> bool:
    return np.mean(np.abs(seg) < SILENCE_LEVEL) > 0.99


def sample_mixture_spec(bank: StemBank, duration: float = 3.2, seed: int = 0,
                        sample_rate: int = 48000, gain_jitter_db: float = 0.0,
                        mixture_id: str | None = None, check_silence: bool = True,
                        partial_prob: float = 0.0,
                        _cache: _StemCache | None = None) -> MixtureSpec:
    """Draw one excerpt per class, preferring distinct songs.

    Excerpts that are more than 99% silent are redrawn up to 10 times. With
    probability ``partial_prob`` the mixture keeps only a random non-empty
    subset of its sources; the others stay in the MixtureSpec but render as silence.
    """
    rng = np.random.default_rng(seed)
    cache = _cache or _StemCache(sample_rate)
    n = int(round(duration * sample_rate))
    used_songs: set[str] = set()
    distinct = len(bank.songs) >= len(bank.classes)
    if not distinct:
        warnings.warn("bank has fewer songs than classes; mixtures may reuse songs")
    sources = {}
    for c in bank.classes:
        entries = [e for e in bank.for_class(c) if e.duration >= duration]
        if not entries:
            raise ValueError(f"no stems for class {c!r} of at least {duration} s")
        fresh = [e for e in entries if e.song not in used_songs] if distinct else entries
        pool = fresh or entries
        for attempt in range(11):
            entry = pool[rng.integers(len(pool))]
            offset = float(rng.uniform(0.0, entry.duration - duration))
            offset = round(offset * sample_rate) / sample_rate
            if not check_silence:
                break
            if not _mostly_silent(_excerpt(cache.get(entry.path), offset, n, sample_rate)):
                break
        else:
            log.warning("accepting a mostly silent %s excerpt from %s", c, entry.path)
        gain = float(rng.uniform(-gain_jitter_db, gain_jitter_db)) if gain_jitter_db else 0.0
        used_songs.add(entry.song)
        sources[c] = SourceExcerpt(entry.path, offset, gain)
    if partial_prob and rng.random() < partial_prob:
        keep = rng.random(len(sources)) < 0.5
        keep[rng.integers(len(sources))] = True
        sources = {c: replace(src, active=bool(k)) for (c, src), k in zip(sources.items(), keep)}
    return MixtureSpec(mixture_id or f"mix-{seed}", sources, duration, sample_rate, seed)


def render_mixture(spec: MixtureSpec, _cache: _StemCache | None = None):
    """Render ``(mixture, {class: stem})``; the mixture is the exact sum of the stems."""
    cache = _cache or _StemCache(spec.sample_rate)
    n = int(round(spec.duration * spec.sample_rate))
    stems = {}
    for c, src in spec.sources.items():
        seg = _excerpt(cache.get(src.path), src.offset, n, spec.sample_rate)
        if not src.active:
            seg = np.zeros(n)
        stems[c] = seg * 10 ** (src.gain_db / 20) if src.gain_db else seg.copy()
    mix = np.zeros(n)
    for seg in stems.values():
        mix += seg
    return (AudioClip(mix, spec.sample_rate),
            {c: AudioClip(s, spec.sample_rate) for c, s in stems.items()})


def generate_manifest(bank: StemBank, count: int, duration: float = 3.2, seed: int = 0,
                      sample_rate: int = 48000, gain_jitter_db: float = 0.0,
                      partial_prob: float = 0.0) -> list[MixtureSpec]:
    bank.validate(duration)
    cache = _StemCache(sample_rate)
    root = np.random.default_rng(seed)
    seeds = root.integers(0, 2**31 - 1, size=count)
    return [sample_mixture_spec(bank, duration, int(s), sample_rate, gain_jitter_db,
                                mixture_id=f"{bank.split}-{i:05d}", partial_prob=partial_prob,
                                _cache=cache)
            for i, s in enumerate(seeds)]


def write_manifest(path, specs) -> None:
    with open(path, "w") as f:
        for s in specs:
            f.write(s.to_json() + "\n")


def read_manifest(path) -> list[MixtureSpec]:
    with open(path) as f:
        specs = [MixtureSpec.from_json(line) for line in f if line.strip()]
    return specs


def render_dataset(specs, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write ``<out>/<id>/mixture.wav`` plus one WAV per class, and the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    caches: dict[int, _StemCache] = {}
    for spec in specs:
        cache = caches.setdefault(spec.sample_rate, _StemCache(spec.sample_rate))
        mix, stems = render_mixture(spec, cache)
        d = out / spec.id
        d.mkdir(exist_ok=True)
        write_wav(d / "mixture.wav", mix)
        for c, clip in stems.items():
            write_wav(d / f"{c}.wav", clip)
    manifest = out / manifest_name
    write_manifest(manifest, specs)
    return manifest

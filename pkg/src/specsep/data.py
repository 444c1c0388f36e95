"""Audio I/O, stem datasets on disk, synthetic stems and training patches.

On-disk layout (one directory per track)::

    root/manifest.json
    root/train/track000/mixture.wav, vocals.wav, drums.wav, ...
    root/test/track000/...

Tracks in the manifest carry a split label: ``train``, ``valid`` or ``test``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.io import wavfile

from .dsp import StftConfig, stft

log = logging.getLogger(__name__)

SOURCE_NAMES = ("vocals", "drums", "bass", "other")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class DataError(Exception):
    """Bad or missing audio / dataset files."""


class WavFormatError(DataError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # (channels, n)
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 2 or self.samples.shape[0] not in (1, 2):
            raise DataError(f"expected 1 or 2 channels, got array of shape {self.samples.shape}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate


def load_wav(path) -> AudioClip:
    """Read 16-bit PCM or 32-bit float WAV; PCM is scaled by 1/32768."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    except Exception as exc:  # scipy surfaces malformed headers as assorted types
        raise WavFormatError(f"cannot parse WAV file {path}: {exc}") from None
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(
            f"{path}: unsupported sample format {data.dtype} (need 16-bit PCM or 32-bit float)"
        )
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[1] not in (1, 2):
        raise WavFormatError(f"{path}: unsupported channel count {samples.shape[1]} (need 1 or 2)")
    return AudioClip(np.ascontiguousarray(samples.T), int(rate))


def save_wav(clip: AudioClip, path, pcm16: bool = False) -> None:
    """Write ``clip`` as 32-bit float (default) or 16-bit PCM WAV."""
    data = clip.samples.T
    if pcm16:
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = data.astype(np.float32)
    if data.shape[1] == 1:
        data = data[:, 0]
    wavfile.write(path, clip.sample_rate, np.ascontiguousarray(data))


def downmix_mono(clip: AudioClip) -> AudioClip:
    if clip.channels == 1:
        return clip
    return AudioClip(clip.samples.mean(axis=0, keepdims=True), clip.sample_rate)


@dataclass
class StemSet:
    mixture: AudioClip
    stems: dict[str, AudioClip]

    def __post_init__(self):
        for name, clip in self.stems.items():
            if name not in SOURCE_NAMES:
                raise DataError(f"unknown stem {name!r}; expected one of {SOURCE_NAMES}")
            if (clip.sample_rate, clip.channels, clip.length) != (
                self.mixture.sample_rate,
                self.mixture.channels,
                self.mixture.length,
            ):
                raise DataError(f"stem {name!r} does not match the mixture's rate/channels/length")

    def mixture_error(self) -> float:
        """Relative L2 distance between the mixture and the sum of stems."""
        total = sum(c.samples for c in self.stems.values())
        ref = np.linalg.norm(self.mixture.samples)
        return float(np.linalg.norm(self.mixture.samples - total) / max(ref, 1e-12))

    def check_consistency(self, tolerance: float = 1e-3) -> bool:
        ok = self.mixture_error() <= tolerance
        if not ok and set(self.stems) == set(SOURCE_NAMES):
            warnings.warn(f"mixture differs from the sum of stems by {self.mixture_error():.2e} (relative)")
        return ok

    def downmixed(self) -> "StemSet":
        return StemSet(downmix_mono(self.mixture), {k: downmix_mono(v) for k, v in self.stems.items()})


@dataclass
class TrackEntry:
    name: str
    path: str
    split: str
    duration: float
    stems: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "path": self.path,
            "split": self.split,
            "duration": self.duration,
            "stems": list(self.stems),
        }


@dataclass
class DatasetManifest:
    root: Path
    tracks: list[TrackEntry] = field(default_factory=list)
    sample_rate: int = 44100

    def split(self, name: str) -> list[TrackEntry]:
        return [t for t in self.tracks if t.split == name]

    def track_dir(self, entry: TrackEntry) -> Path:
        return self.root / entry.path

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for t in self.tracks:
            if t.split not in ("train", "valid", "test"):
                raise DataError(f"track {t.name!r} has unknown split {t.split!r}")
            if t.path in seen:
                raise DataError(f"track {t.path!r} listed in splits {seen[t.path]!r} and {t.split!r}")
            seen[t.path] = t.split
            for stem in ("mixture", *t.stems):
                f = self.track_dir(t) / f"{stem}.wav"
                if not f.is_file():
                    raise DataError(f"missing file {f}")

    def load_track(self, entry: TrackEntry) -> StemSet:
        d = self.track_dir(entry)
        mixture = load_wav(d / "mixture.wav")
        stems = {s: load_wav(d / f"{s}.wav") for s in entry.stems}
        stemset = StemSet(mixture, stems)
        stemset.check_consistency()
        return stemset

    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "sample_rate": self.sample_rate,
            "tracks": [t.to_json() for t in self.tracks],
        }
        return json.dumps(doc, indent=2) + "\n"

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"no dataset manifest at {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt manifest {path}: {exc}") from None
        if doc.get("version") != MANIFEST_VERSION:
            raise DataError(f"manifest version {doc.get('version')} unsupported (expected {MANIFEST_VERSION})")
        tracks = [
            TrackEntry(t["name"], t["path"], t["split"], float(t["duration"]), tuple(t["stems"]))
            for t in doc["tracks"]
        ]
        manifest = cls(path.parent, tracks, int(doc.get("sample_rate", 44100)))
        manifest.validate()
        return manifest


# -- synthetic stems ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    train_tracks: int = 3
    test_tracks: int = 1
    duration: float = 30.0
    sample_rate: int = 44100
    channels: int = 2
    stems: tuple[str, ...] = ("vocals", "drums", "bass")
    seed: int = 0
    valid_fraction: float = 0.1


def _envelope(n: int, rate: int, attack: float = 0.02, release: float = 0.05) -> np.ndarray:
    env = np.ones(n)
    a = min(n, max(1, int(attack * rate)))
    r = min(n - a, max(1, int(release * rate))) if n > a else 0
    env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    if r:
        env[n - r:] = np.linspace(1.0, 0.0, r)
    return env


def _synth_vocals(rng, n, rate):
    out = np.zeros(n)
    t0 = 0
    while t0 < n:
        dur = int(rng.uniform(0.3, 1.0) * rate)
        gap = int(rng.uniform(0.0, 0.25) * rate)
        seg = min(dur, n - t0)
        t = np.arange(seg) / rate
        f0 = 110.0 * 2 ** (rng.integers(12, 40) / 12.0)
        vib = 1.0 + 0.012 * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * t + rng.uniform(0, 2 * np.pi))
        phase = 2 * np.pi * np.cumsum(f0 * vib) / rate
        tone = sum(np.sin(h * phase) / h for h in range(1, 9) if h * f0 < rate / 2.2)
        out[t0:t0 + seg] += 0.3 * tone * _envelope(seg, rate)
        t0 += dur + gap
    out += 0.002 * rng.standard_normal(n)
    return out


def _synth_drums(rng, n, rate):
    out = np.zeros(n)
    period = int(rate * 60.0 / rng.uniform(100, 140) / 2)
    start = int(rng.integers(0, period))
    decay = rng.uniform(0.004, 0.012)
    click_len = int(8 * decay * rate)
    shape = np.exp(-np.arange(click_len) / (decay * rate))
    for k, pos in enumerate(range(start, n, period)):
        seg = min(click_len, n - pos)
        amp = 1.0 if k % 2 == 0 else 0.6
        out[pos:pos + seg] += amp * rng.standard_normal(seg) * shape[:seg]
    return 0.5 * out


def _synth_bass(rng, n, rate):
    out = np.zeros(n)
    note = int(rate * rng.uniform(0.4, 0.8))
    for t0 in range(0, n, note):
        seg = min(note, n - t0)
        t = np.arange(seg) / rate
        f0 = 41.2 * 2 ** (rng.integers(0, 14) / 12.0)
        tone = sum(np.sin(2 * np.pi * h * f0 * t) / h ** 2 for h in range(1, 5))
        out[t0:t0 + seg] += 0.4 * tone * _envelope(seg, rate, 0.01, 0.05)
    return out


def _synth_other(rng, n, rate):
    t = np.arange(n) / rate
    root = 220.0 * 2 ** (rng.integers(0, 12) / 12.0)
    chord = sum(np.sin(2 * np.pi * root * r * t + rng.uniform(0, 2 * np.pi)) for r in (1.0, 1.26, 1.5))
    return 0.1 * chord * (0.6 + 0.4 * np.sin(2 * np.pi * 0.25 * t))


_GENERATORS = {"vocals": _synth_vocals, "drums": _synth_drums, "bass": _synth_bass, "other": _synth_other}


def synth_stems(spec: SynthSpec, index: int) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Deterministic stems for one track; returns ``(mixture, stems)`` peak-normalized to 0.9.

    All stems share the normalization gain, so the mixture stays their exact sum.
    """
    n = int(round(spec.duration * spec.sample_rate))
    stems = {}
    for k, name in enumerate(spec.stems):
        rng = np.random.default_rng([spec.seed, index, k])
        mono = _GENERATORS[name](rng, n, spec.sample_rate)
        if spec.channels == 2:
            pan = rng.uniform(0.3, 0.7)
            stems[name] = np.stack([mono * (1 - pan) * 2, mono * pan * 2])
        else:
            stems[name] = mono[None, :]
    mixture = sum(stems.values())
    gain = 0.9 / max(float(np.max(np.abs(mixture))), 1e-12)
    return mixture * gain, {k: v * gain for k, v in stems.items()}


def _validation_count(n_train: int, fraction: float) -> int:
    if n_train < 2 or fraction <= 0:
        return 0
    return min(n_train - 1, max(1, int(round(fraction * n_train))))


def make_synthetic_dataset(root, spec: SynthSpec = SynthSpec()) -> DatasetManifest:
    """Write a synthetic stem dataset under ``root`` and return its manifest.

    The last ``valid_fraction`` of the training tracks (at least one when
    there are two or more) are labelled ``valid``.
    """
    root = Path(root)
    min_len = 2 * StftConfig().fft_size
    if spec.duration * spec.sample_rate < min_len:
        raise DataError(f"duration must cover at least {min_len} samples")
    n_valid = _validation_count(spec.train_tracks, spec.valid_fraction)
    tracks = []
    plan = [("train", i) for i in range(spec.train_tracks)] + [("test", i) for i in range(spec.test_tracks)]
    for k, (folder, i) in enumerate(plan):
        split = folder
        if folder == "train" and i >= spec.train_tracks - n_valid:
            split = "valid"
        rel = f"{folder}/track{i:03d}"
        d = root / rel
        d.mkdir(parents=True, exist_ok=True)
        mixture, stems = synth_stems(spec, k)
        save_wav(AudioClip(mixture, spec.sample_rate), d / "mixture.wav")
        for name, audio in stems.items():
            save_wav(AudioClip(audio, spec.sample_rate), d / f"{name}.wav")
        tracks.append(TrackEntry(f"track{i:03d}", rel, split, spec.duration, tuple(spec.stems)))
    manifest = DatasetManifest(root, tracks, spec.sample_rate)
    manifest.save()
    return manifest


# -- training patches --------------------------------------------------------

@dataclass
class PatchBatch:
    mixture: np.ndarray  # (B, ch, bins, frames)
    target: np.ndarray
    offsets: list[tuple[str, int]]


class PatchSampler:
    """Random aligned (mixture, source) magnitude patches from one split.

    Spectrograms of every usable track are computed once up front. Tracks
    shorter than one patch are skipped with a warning.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        source: str,
        config: StftConfig = StftConfig(),
        split: str = "train",
        mono: bool = False,
        dtype=np.float64,
    ):
        self.config = config
        self.source = source
        self.dtype = dtype
        self.tracks: list[tuple[str, np.ndarray, np.ndarray]] = []
        entries = manifest.split(split)
        if not entries:
            raise DataError(f"split {split!r} of the dataset is empty")
        for entry in entries:
            if source not in entry.stems:
                raise DataError(f"track {entry.name!r} has no {source!r} stem")
            stemset = manifest.load_track(entry)
            if mono:
                stemset = stemset.downmixed()
            if stemset.mixture.length < config.fft_size or config.n_frames(stemset.mixture.length) < config.patch_frames:
                warnings.warn(f"track {entry.name!r} is shorter than one patch; skipped")
                continue
            mix = stft(stemset.mixture.samples, config).magnitude.astype(dtype)
            tgt = stft(stemset.stems[source].samples, config).magnitude.astype(dtype)
            self.tracks.append((entry.name, mix, tgt))
        if not self.tracks:
            raise DataError(f"no track in split {split!r} is long enough for one patch")

    def batches(self, batch_size: int, n_batches: int, seed: int) -> Iterator[PatchBatch]:
        rng = np.random.default_rng(seed)
        T = self.config.patch_frames
        for _ in range(n_batches):
            mix, tgt, offsets = [], [], []
            for _ in range(batch_size):
                k = int(rng.integers(len(self.tracks)))
                name, m, t = self.tracks[k]
                start = int(rng.integers(m.shape[2] - T + 1))
                mix.append(m[:, :, start:start + T])
                tgt.append(t[:, :, start:start + T])
                offsets.append((name, start))
            yield PatchBatch(np.stack(mix), np.stack(tgt), offsets)


def sample_training_patches(
    manifest: DatasetManifest,
    source: str,
    config: StftConfig,
    batch_size: int,
    seed: int,
    n_batches: int,
    split: str = "train",
) -> Iterator[PatchBatch]:
    return PatchSampler(manifest, source, config, split).batches(batch_size, n_batches, seed)

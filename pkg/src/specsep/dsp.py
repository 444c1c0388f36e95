"""STFT analysis/synthesis and fixed-width patching of magnitude spectrograms."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "StftConfig",
    "ComplexSpectrogram",
    "PatchCoverage",
    "hann_periodic",
    "cola_profile",
    "stft",
    "istft",
    "apply_mixture_phase",
    "spectrogram_energy",
    "extract_patches",
    "merge_patches",
]


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_WINDOWS = {"hann": hann_periodic}


def cola_profile(window: np.ndarray, hop: int) -> np.ndarray:
    """Overlap-added window over one hop period, sampled in steady state."""
    n = len(window)
    total = np.zeros(hop)
    for start in range(0, n, hop):
        seg = window[start:start + hop]
        total[: len(seg)] += seg
    return total


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 2048
    hop: int = 1024
    window: str = "hann"
    patch_frames: int = 128
    sample_rate: int = 44100
    keep_nyquist: bool = True

    def __post_init__(self):
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}; available: {sorted(_WINDOWS)}")
        if self.fft_size < 2 or self.fft_size % 2:
            raise ValueError(f"fft_size must be a positive even number, got {self.fft_size}")
        if not 1 <= self.hop <= self.fft_size:
            raise ValueError(f"hop must lie in [1, fft_size], got {self.hop}")
        if self.patch_frames < 1:
            raise ValueError("patch_frames must be >= 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        profile = cola_profile(self.analysis_window(), self.hop)
        if np.ptp(profile) > 1e-12 * max(1.0, profile.mean()):
            raise ValueError(
                f"window {self.window!r} with hop {self.hop} is not constant-overlap-add"
            )

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1 if self.keep_nyquist else self.fft_size // 2

    def analysis_window(self) -> np.ndarray:
        return _WINDOWS[self.window](self.fft_size)

    def n_frames(self, length: int) -> int:
        if length < self.fft_size:
            raise ValueError(f"signal of {length} samples is shorter than one frame ({self.fft_size})")
        return 1 + (length - self.fft_size) // self.hop


@dataclass
class ComplexSpectrogram:
    """Magnitude and phase planes of shape ``(channels, bins, frames)``."""

    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    original_length: int = 0

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError(
                f"magnitude {self.magnitude.shape} and phase {self.phase.shape} shapes differ"
            )
        if self.magnitude.ndim != 3 or self.magnitude.shape[1] != self.config.bins:
            raise ValueError(
                f"expected (channels, {self.config.bins}, frames), got {self.magnitude.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.magnitude.shape

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[2]

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


def _as_channels(audio) -> np.ndarray:
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"audio must be (samples,) or (channels, samples), got {x.shape}")
    return x


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Frame view of shape ``(channels, frames, fft_size)``."""
    n = cfg.n_frames(x.shape[-1])
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size, axis=-1)
    return view[:, : (n - 1) * cfg.hop + 1 : cfg.hop]


def stft(audio, config: StftConfig | None = None) -> ComplexSpectrogram:
    """Short-time Fourier transform of per-channel audio.

    Frames start at multiples of ``hop`` with no padding, so the frame count
    is ``1 + (len - fft_size) // hop``.
    """
    cfg = config or StftConfig()
    x = _as_channels(audio)
    frames = _frames(x, cfg) * cfg.analysis_window()
    spec = np.fft.rfft(frames, axis=-1)[..., : cfg.bins]
    spec = np.swapaxes(spec, 1, 2)
    phase = np.angle(spec)
    phase[phase <= -np.pi] += 2.0 * np.pi
    return ComplexSpectrogram(np.abs(spec), phase, cfg, x.shape[-1])


def istft(spec: ComplexSpectrogram) -> np.ndarray:
    """Weighted overlap-add resynthesis, shape ``(channels, original_length)``.

    Each frame is windowed again and the sum is divided by the overlapped
    squared window, floored at its smallest fully overlapped value so that
    the first and last partial frames fade in and out. Samples that no frame
    covers with nonzero weight are returned as zeros.
    """
    cfg = spec.config
    channels, bins, n_frames = spec.shape
    full = np.zeros((channels, n_frames, cfg.fft_size // 2 + 1), dtype=complex)
    full[..., :bins] = np.swapaxes(spec.complex(), 1, 2)
    frames = np.fft.irfft(full, n=cfg.fft_size, axis=-1)
    win = cfg.analysis_window()
    span = (n_frames - 1) * cfg.hop + cfg.fft_size
    out = np.zeros((channels, span))
    norm = np.zeros(span)
    for t in range(n_frames):
        start = t * cfg.hop
        out[:, start:start + cfg.fft_size] += frames[:, t] * win
        norm[start:start + cfg.fft_size] += win * win
    # Edge samples reached by fewer frames have a tiny squared-window sum;
    # dividing by it would blow up any modification of the spectrum there.
    # The floor is the smallest sum over the fully overlapped region, so
    # those samples are still reconstructed exactly.
    full_lo, full_hi = cfg.fft_size - cfg.hop, span - cfg.fft_size + cfg.hop
    floor = norm[full_lo:full_hi].min() if full_hi > full_lo else 1e-10 * norm.max()
    covered = norm > 1e-10 * norm.max()
    out[:, covered] /= np.maximum(norm[covered], floor)
    out[:, ~covered] = 0.0
    length = spec.original_length or span
    if span >= length:
        return out[:, :length]
    return np.pad(out, ((0, 0), (0, length - span)))


def apply_mixture_phase(est_magnitude: np.ndarray, mixture: ComplexSpectrogram) -> ComplexSpectrogram:
    est = np.asarray(est_magnitude)
    if est.shape != mixture.shape:
        raise ValueError(f"estimate shape {est.shape} does not match mixture shape {mixture.shape}")
    return replace(mixture, magnitude=est, phase=mixture.phase)


def spectrogram_energy(spec: ComplexSpectrogram) -> float:
    """Time-domain energy of the windowed frames implied by the spectrogram (Parseval)."""
    n = spec.config.fft_size
    power = spec.magnitude ** 2
    weights = np.full(spec.config.fft_size // 2 + 1, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    weights = weights[: spec.config.bins]
    return float(np.einsum("cbt,b->", power, weights) / n)


@dataclass(frozen=True)
class PatchCoverage:
    total_frames: int
    patch_frames: int
    n_patches: int
    padding: int

    def validate(self) -> None:
        if self.total_frames < 1 or self.patch_frames < 1:
            raise ValueError("coverage map needs positive frame counts")
        expected = -(-self.total_frames // self.patch_frames)
        if self.n_patches != expected or self.padding != expected * self.patch_frames - self.total_frames:
            raise ValueError(f"inconsistent coverage map {self}")


def extract_patches(magnitude: np.ndarray, patch_frames: int) -> tuple[list[np.ndarray], PatchCoverage]:
    """Cut ``(channels, bins, frames)`` into non-overlapping patches.

    The last patch is zero-padded on the right when the frame count is not a
    multiple of ``patch_frames``.
    """
    mag = np.asarray(magnitude)
    total = mag.shape[-1]
    if total < 1:
        raise ValueError("need at least one frame")
    n = -(-total // patch_frames)
    pad = n * patch_frames - total
    padded = np.pad(mag, ((0, 0), (0, 0), (0, pad))) if pad else mag
    patches = [padded[..., i * patch_frames:(i + 1) * patch_frames].copy() for i in range(n)]
    return patches, PatchCoverage(total, patch_frames, n, pad)


def merge_patches(patches, coverage: PatchCoverage) -> np.ndarray:
    coverage.validate()
    if len(patches) != coverage.n_patches:
        raise ValueError(f"expected {coverage.n_patches} patches, got {len(patches)}")
    for p in patches:
        if p.shape[-1] != coverage.patch_frames:
            raise ValueError(f"patch width {p.shape[-1]} does not match coverage {coverage.patch_frames}")
    return np.concatenate(list(patches), axis=-1)[..., : coverage.total_frames]

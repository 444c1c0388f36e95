"""Inference: mixture waveform to per-source waveforms.

Pipeline per source: STFT, fixed-width patches, model forward, merge. The
source magnitudes are then rescaled per bin so they add up to the mixture
magnitude, combined with the mixture phase and resynthesized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import SOURCE_NAMES, AudioClip
from .dsp import ComplexSpectrogram, StftConfig, apply_mixture_phase, extract_patches, istft, merge_patches, stft
from .mmdense import ModelConfig, ModelParams, forward, load_model
from .tensor import Tensor, no_grad

Estimator = Callable[[np.ndarray], np.ndarray]

DEGENERATE_FLOOR = 1e-12


class SeparationError(ValueError):
    pass


def wiener_scale(est_mags: Sequence, mixture_mag, exponent: float = 1.0) -> list[np.ndarray]:
    """Rescale source magnitudes so that they sum to the mixture in every bin.

    ``out_i = est_i**p * mix / sum_j est_j**p``. Bins where the weights sum
    below 1e-12 split the mixture equally among the sources.
    """
    mix = np.asarray(getattr(mixture_mag, "data", mixture_mag), dtype=np.float64)
    ests = [np.asarray(getattr(e, "data", e), dtype=np.float64) for e in est_mags]
    if not ests:
        raise SeparationError("wiener_scale needs at least one source estimate")
    for e in ests:
        if e.shape != mix.shape:
            raise SeparationError(f"estimate shape {e.shape} does not match mixture shape {mix.shape}")
        if np.any(e < 0):
            raise SeparationError("source magnitude estimates must be nonnegative")
    weights = [e if exponent == 1.0 else e ** exponent for e in ests]
    total = np.sum(weights, axis=0)
    degenerate = total < DEGENERATE_FLOOR
    safe = np.where(degenerate, 1.0, total)
    share = mix / len(ests)
    return [np.where(degenerate, share, w * (mix / safe)) for w in weights]


def model_estimator(params: ModelParams, config: ModelConfig) -> Estimator:
    """Wrap a trained model as a patch estimator running in inference mode."""
    dtype = params.dtype

    def estimate(patch: np.ndarray) -> np.ndarray:
        with no_grad():
            y = forward(Tensor(patch.astype(dtype, copy=False)), config, params, training=False)
        return y.data.astype(np.float64)

    return estimate


def estimate_magnitude(mixture: ComplexSpectrogram, estimator: Estimator) -> np.ndarray:
    patches, coverage = extract_patches(mixture.magnitude, mixture.config.patch_frames)
    out = [np.asarray(estimator(p)) for p in patches]
    for p, o in zip(patches, out):
        if o.shape != p.shape:
            raise SeparationError(f"estimator returned shape {o.shape} for a patch of shape {p.shape}")
    return np.maximum(merge_patches(out, coverage), 0.0)


@dataclass
class SeparationResult:
    waveforms: dict[str, np.ndarray]
    magnitudes: dict[str, np.ndarray]
    mixture: ComplexSpectrogram


def separate_audio(
    audio: np.ndarray,
    estimators: Mapping[str, Estimator],
    config: StftConfig = StftConfig(),
    exponent: float = 1.0,
) -> SeparationResult:
    """Separate ``(channels, n)`` audio with one estimator per source.

    With more than one source the estimates are rescaled to add up to the
    mixture; a single source keeps its raw estimate.
    """
    x = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    if x.shape[-1] < config.fft_size:
        raise SeparationError(f"mixture of {x.shape[-1]} samples is shorter than one frame ({config.fft_size})")
    if not estimators:
        raise SeparationError("no sources requested")
    spec = stft(x, config)
    names = list(estimators)
    raw = [estimate_magnitude(spec, estimators[n]) for n in names]
    scaled = wiener_scale(raw, spec.magnitude, exponent) if len(names) > 1 else raw
    mags = dict(zip(names, scaled))
    waves = {n: istft(apply_mixture_phase(m, spec)) for n, m in mags.items()}
    return SeparationResult(waves, mags, spec)


@dataclass
class SeparationJob:
    mixture: AudioClip
    checkpoints: dict[str, Path]
    model_configs: dict[str, ModelConfig] = field(default_factory=dict)
    stft_config: StftConfig = field(default_factory=StftConfig)
    exponent: float = 1.0

    @property
    def sources(self) -> list[str]:
        return list(self.checkpoints)

    def load_estimators(self) -> dict[str, Estimator]:
        """Validate and load every checkpoint before any audio is touched."""
        if not self.checkpoints:
            raise SeparationError("a separation job needs at least one source")
        loaded = {}
        for source, path in self.checkpoints.items():
            if source not in SOURCE_NAMES:
                raise SeparationError(f"unknown source {source!r}; expected one of {SOURCE_NAMES}")
            path = Path(path)
            if not path.is_file():
                raise SeparationError(f"checkpoint for {source!r} not found: {path}")
            config = self.model_configs.get(source, ModelConfig())
            if config.input_channels != self.mixture.channels:
                raise SeparationError(
                    f"model for {source!r} expects {config.input_channels} channel(s) "
                    f"but the mixture has {self.mixture.channels}"
                )
            if config.bins != self.stft_config.bins:
                raise SeparationError(
                    f"model for {source!r} expects {config.bins} bins, STFT gives {self.stft_config.bins}"
                )
            try:
                params = load_model(path, config)
            except ValueError as exc:
                raise SeparationError(f"checkpoint {path} does not match its model config: {exc}") from None
            loaded[source] = model_estimator(params, config)
        return loaded


def separate(job: SeparationJob) -> SeparationResult:
    if job.mixture.sample_rate != job.stft_config.sample_rate:
        raise SeparationError(
            f"mixture sample rate {job.mixture.sample_rate} differs from the configured {job.stft_config.sample_rate}"
        )
    estimators = job.load_estimators()
    return separate_audio(job.mixture.samples, estimators, job.stft_config, job.exponent)

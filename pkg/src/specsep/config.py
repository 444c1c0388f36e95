"""Run configuration as flat ``dotted.key = value`` text.

Example::

    # vocals baseline
    loss.pixel = 1.0
    loss.feature = 0
    loss.style = 0
    train.source = vocals

Every key has a default; unknown keys and unparsable values raise
:class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Mapping

import numpy as np

from .data import SOURCE_NAMES
from .dsp import StftConfig
from .featloss import FeatureExtractorConfig, LossWeights
from .mmdense import BandLayout, DenseBlockConfig, ModelConfig
from .optim import PlateauSchedule


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _str_tuple(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Field:
    key: str
    parse: Callable[[str], Any]
    default: Any
    doc: str


FIELDS: tuple[Field, ...] = (
    Field("stft.fft_size", int, 2048, "FFT length in samples"),
    Field("stft.hop", int, 1024, "hop between frames in samples"),
    Field("stft.window", str, "hann", "analysis window"),
    Field("stft.patch_frames", int, 128, "frames per training/inference patch"),
    Field("stft.sample_rate", int, 44100, "expected audio sample rate"),
    Field("stft.keep_nyquist", _bool, True, "keep the Nyquist bin (fft_size/2 + 1 bins, else fft_size/2)"),
    Field("model.channels", int, 2, "audio channels seen by the model (1 = mono downmix)"),
    Field("model.scales", int, 3, "down/up-sampling levels per branch"),
    Field("model.band_layers", int, 3, "dense layers per block in sub-band branches"),
    Field("model.band_growth", int, 4, "growth rate in sub-band branches"),
    Field("model.full_layers", int, 3, "dense layers per block in the full-band branch"),
    Field("model.full_growth", int, 3, "growth rate in the full-band branch"),
    Field("model.final_layers", int, 2, "dense layers in the merging block"),
    Field("model.final_growth", int, 4, "growth rate in the merging block"),
    Field("model.bottleneck_factor", int, 4, "1x1 bottleneck width as a multiple of growth"),
    Field("model.compression", float, 0.2, "transition channel compression"),
    Field("model.split_bins", _int_tuple, (512,), "sub-band boundaries in bins"),
    Field("model.full_band", _bool, True, "add a full-band branch"),
    Field("model.seed", int, 0, "weight initialization seed"),
    Field("features.width_multiplier", float, 0.25, "extractor channel width relative to VGG-16"),
    Field("features.weight_source", str, "seeded", "'seeded' or a checkpoint file of extractor weights"),
    Field("features.feature_tap", str, "relu3_3", "layer for the feature term"),
    Field("features.style_taps", _str_tuple, ("relu1_2", "relu2_2", "relu3_3", "relu4_3"), "layers for the style term"),
    Field("features.seed", int, 1234, "seed for seeded extractor weights"),
    Field("loss.pixel", float, 0.5, "pixel L2 weight"),
    Field("loss.feature", float, 0.25, "feature reconstruction weight"),
    Field("loss.style", float, 0.25, "style reconstruction weight"),
    Field("optim.lr_initial", float, 1e-3, "RMSProp learning rate before the drop"),
    Field("optim.lr_dropped", float, 1e-4, "learning rate after validation loss plateaus"),
    Field("optim.patience", int, 3, "epochs without improvement before the drop"),
    Field("optim.rho", float, 0.9, "RMSProp decay"),
    Field("optim.eps", float, 1e-8, "RMSProp epsilon"),
    Field("train.max_epochs", int, 24, "number of epochs"),
    Field("train.batches_per_epoch", int, 3, "training batches per epoch"),
    Field("train.batch_size", int, 2, "patches per batch"),
    Field("train.valid_batches", int, 1, "validation batches per epoch (fixed patches)"),
    Field("train.dtype", str, "float32", "training precision: float32 or float64"),
    Field("train.source", str, "vocals", "source the model learns"),
    Field("train.dataset", str, "", "dataset directory or manifest path"),
    Field("train.seed", int, 0, "seed for patch sampling"),
    Field("train.output_dir", str, "", "run directory"),
    Field("eval.window", int, 44100, "evaluation window in samples"),
    Field("eval.hop", int, 44100, "evaluation hop in samples"),
    Field("eval.filter_len", int, 512, "distortion filter taps"),
)

_BY_KEY = {f.key: f for f in FIELDS}


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({f.key: f.default for f in FIELDS}).validated()

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, overrides: Mapping[str, str]) -> "RunConfig":
        values = dict(self.values)
        for key, text in overrides.items():
            values[key] = _parse_value(key, text)
        return RunConfig(values).validated()

    # -- text form -------------------------------------------------------
    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        values = {f.key: f.default for f in FIELDS}
        seen: set[str] = set()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key in seen:
                raise ConfigError(key, f"set twice (line {lineno})")
            seen.add(key)
            values[key] = _parse_value(key, value)
        return cls(values).validated()

    @classmethod
    def load(cls, path) -> "RunConfig":
        from pathlib import Path

        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        return cls.parse(text)

    def serialize(self) -> str:
        lines = []
        section = None
        for f in FIELDS:
            head = f.key.split(".", 1)[0]
            if head != section:
                if section is not None:
                    lines.append("")
                section = head
            lines.append(f"{f.key} = {_fmt(self.values[f.key])}")
        return "\n".join(lines) + "\n"

    # -- validation and typed views ----------------------------------------
    def validated(self) -> "RunConfig":
        for key in self.values:
            if key not in _BY_KEY:
                raise ConfigError(key, "unknown configuration key")
        builders = (
            ("stft", self.stft),
            ("model", self.model),
            ("features", self.features),
            ("loss", self.loss_weights),
            ("optim", self.schedule),
        )
        for prefix, build in builders:
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(prefix, str(exc)) from None
        v = self.values
        for key in ("train.max_epochs", "train.batches_per_epoch", "train.batch_size", "train.valid_batches"):
            if v[key] < 1:
                raise ConfigError(key, "must be >= 1")
        if v["train.dtype"] not in ("float32", "float64"):
            raise ConfigError("train.dtype", f"must be float32 or float64, got {v['train.dtype']!r}")
        if v["train.source"] not in SOURCE_NAMES:
            raise ConfigError("train.source", f"must be one of {SOURCE_NAMES}, got {v['train.source']!r}")
        if v["model.channels"] not in (1, 2):
            raise ConfigError("model.channels", "must be 1 or 2")
        for key in ("eval.window", "eval.hop", "eval.filter_len", "optim.patience"):
            if v[key] < 1:
                raise ConfigError(key, "must be >= 1")
        if v["eval.filter_len"] > v["eval.window"]:
            raise ConfigError("eval.filter_len", "must not exceed eval.window")
        return self

    def stft(self) -> StftConfig:
        v = self.values
        return StftConfig(
            v["stft.fft_size"],
            v["stft.hop"],
            v["stft.window"],
            v["stft.patch_frames"],
            v["stft.sample_rate"],
            v["stft.keep_nyquist"],
        )

    def model(self) -> ModelConfig:
        v = self.values

        def block(layers, growth):
            return DenseBlockConfig(v[layers], v[growth], v["model.bottleneck_factor"], v["model.compression"])

        return ModelConfig(
            input_channels=v["model.channels"],
            bins=self.stft().bins,
            scales=v["model.scales"],
            band_block=block("model.band_layers", "model.band_growth"),
            full_band_block=block("model.full_layers", "model.full_growth"),
            final_block=block("model.final_layers", "model.final_growth"),
            layout=BandLayout(v["model.split_bins"], v["model.full_band"]),
            seed=v["model.seed"],
        )

    def features(self) -> FeatureExtractorConfig:
        v = self.values
        return FeatureExtractorConfig(
            v["features.width_multiplier"],
            v["features.weight_source"],
            v["features.feature_tap"],
            v["features.style_taps"],
            v["features.seed"],
        )

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(v["loss.pixel"], v["loss.feature"], v["loss.style"])

    def schedule(self) -> PlateauSchedule:
        v = self.values
        if v["optim.lr_initial"] <= 0 or v["optim.lr_dropped"] <= 0:
            raise ValueError("learning rates must be positive")
        return PlateauSchedule(v["optim.lr_initial"], v["optim.lr_dropped"], v["optim.patience"])

    @property
    def dtype(self):
        return np.dtype(self.values["train.dtype"])


def _parse_value(key: str, text: str):
    field = _BY_KEY.get(key)
    if field is None:
        raise ConfigError(key, "unknown configuration key")
    try:
        return field.parse(text.strip())
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text.strip()!r}: {exc}") from None


def parse_overrides(items) -> dict[str, str]:
    """``["a.b=1", ...]`` to a dict; malformed items raise :class:`ConfigError`."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value
    return out


def describe() -> str:
    """Every key with its default and meaning, one per line."""
    width = max(len(f.key) for f in FIELDS)
    return "\n".join(f"{f.key.ljust(width)}  {_fmt(f.default):<12}  {f.doc}" for f in FIELDS)

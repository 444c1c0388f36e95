"""Multi-scale multi-band DenseNet mapping mixture magnitudes to one source.

The input spectrogram patch ``(B, channels, bins, frames)`` is split along
frequency into sub-bands. Each sub-band, and optionally the whole band, runs
through its own dense encoder/decoder. Sub-band outputs are joined along
frequency, stacked with the full-band output along channels, and a last
dense block plus 1x1 conv maps back to ``channels`` nonnegative maps.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import checkpoint
from .tensor import (
    Tensor,
    bn_relu_conv,
    concat,
    concat_channels,
    conv2d,
    pad_reflect_end,
    pool2d,
    relu,
    upsample2d,
)

BUFFER_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class DenseBlockConfig:
    layers: int
    growth_rate: int
    bottleneck_factor: int = 4
    compression: float = 0.2

    def __post_init__(self):
        if self.layers < 0 or self.growth_rate < 1 or self.bottleneck_factor < 1:
            raise ValueError(f"invalid dense block config {self}")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError("compression must lie in (0, 1]")

    @property
    def bottleneck_width(self) -> int:
        return self.bottleneck_factor * self.growth_rate

    def out_channels(self, in_channels: int) -> int:
        return in_channels + self.layers * self.growth_rate

    def transition_channels(self, in_channels: int) -> int:
        # round before ceil so that e.g. 0.2 * 10 does not become 3
        return max(1, math.ceil(round(self.compression * in_channels, 9)))


@dataclass(frozen=True)
class BandLayout:
    split_bins: tuple[int, ...] = (512,)
    includes_full_band: bool = True

    def bands(self, bins: int) -> list[tuple[int, int]]:
        edges = [0, *self.split_bins, bins]
        for lo, hi in zip(edges[:-1], edges[1:]):
            if hi <= lo:
                raise ValueError(
                    f"band boundaries {self.split_bins} must be strictly increasing within (0, {bins})"
                )
        return list(zip(edges[:-1], edges[1:]))


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 2
    bins: int = 1025
    scales: int = 3
    # desk-scale widths; the larger (4, 12) / (4, 6) blocks are too slow for CPU numpy training
    band_block: DenseBlockConfig = DenseBlockConfig(3, 4)
    full_band_block: DenseBlockConfig = DenseBlockConfig(3, 3)
    final_block: DenseBlockConfig = DenseBlockConfig(2, 4)
    layout: BandLayout = field(default_factory=BandLayout)
    seed: int = 0

    def __post_init__(self):
        if self.input_channels not in (1, 2):
            raise ValueError(f"input_channels must be 1 or 2, got {self.input_channels}")
        if self.scales < 0:
            raise ValueError("scales must be >= 0")
        self.layout.bands(self.bins)

    def branches(self) -> list[tuple[str, DenseBlockConfig, tuple[int, int]]]:
        """``(name, block config, (lo, hi) bin range)`` for every branch."""
        out = [(f"band{i}", self.band_block, rng) for i, rng in enumerate(self.layout.bands(self.bins))]
        if self.layout.includes_full_band:
            out.append(("full", self.full_band_block, (0, self.bins)))
        return out

    def with_updates(self, **kw) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, **kw)


# -- parameter layout ------------------------------------------------------

def _conv_entry(name: str, c_out: int, c_in: int, k: int):
    yield f"{name}.weight", (c_out, c_in, k, k)
    yield f"{name}.bias", (c_out,)


def _bn_entry(name: str, c: int):
    for suffix in (".gamma", ".beta", ".running_mean", ".running_var"):
        yield f"{name}{suffix}", (c,)


def _block_entries(prefix: str, cfg: DenseBlockConfig, c_in: int):
    c = c_in
    for layer in range(cfg.layers):
        p = f"{prefix}/layer{layer}"
        yield from _bn_entry(f"{p}/bn1", c)
        yield from _conv_entry(f"{p}/conv1", cfg.bottleneck_width, c, 1)
        yield from _bn_entry(f"{p}/bn2", cfg.bottleneck_width)
        yield from _conv_entry(f"{p}/conv2", cfg.growth_rate, cfg.bottleneck_width, 3)
        c += cfg.growth_rate


def branch_out_channels(config: ModelConfig, cfg: DenseBlockConfig) -> int:
    return _branch_channels(config, cfg)[-1]


def _branch_channels(config: ModelConfig, cfg: DenseBlockConfig) -> list[int]:
    """Channel bookkeeping of one branch: returns [.., output channels]."""
    c = 2 * cfg.growth_rate
    skips = []
    for _ in range(config.scales):
        c = cfg.out_channels(c)
        skips.append(c)
        c = cfg.transition_channels(c)
    c = cfg.out_channels(c)
    for s in reversed(range(config.scales)):
        c = cfg.transition_channels(c) + skips[s]
        c = cfg.out_channels(c)
    return [*skips, c]


def _branch_entries(config: ModelConfig, name: str, cfg: DenseBlockConfig):
    c = 2 * cfg.growth_rate
    yield from _conv_entry(f"{name}/conv0", c, config.input_channels, 3)
    skips = []
    for s in range(config.scales):
        yield from _block_entries(f"{name}/enc{s}/block", cfg, c)
        c = cfg.out_channels(c)
        skips.append(c)
        t = cfg.transition_channels(c)
        yield from _conv_entry(f"{name}/enc{s}/down/conv", t, c, 1)
        c = t
    yield from _block_entries(f"{name}/bottom/block", cfg, c)
    c = cfg.out_channels(c)
    for s in reversed(range(config.scales)):
        t = cfg.transition_channels(c)
        yield from _conv_entry(f"{name}/dec{s}/up/conv", t, c, 3)
        c = t + skips[s]
        yield from _block_entries(f"{name}/dec{s}/block", cfg, c)
        c = cfg.out_channels(c)


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every parameter and buffer name with its shape, in creation order."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    band_channels = None
    merged = 0
    for name, cfg, _ in config.branches():
        for key, shape in _branch_entries(config, name, cfg):
            shapes[key] = shape
        out_c = branch_out_channels(config, cfg)
        if name == "full":
            merged += out_c
        else:
            if band_channels is None:
                band_channels = out_c
                merged += out_c
    for key, shape in _block_entries("merge/block", config.final_block, merged):
        shapes[key] = shape
    final_c = config.final_block.out_channels(merged)
    for key, shape in _conv_entry("merge/out/conv", config.input_channels, final_c, 1):
        shapes[key] = shape
    return shapes


class ModelParams:
    """Named tensors of one network. Running BN statistics are buffers."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if not n.endswith(BUFFER_SUFFIXES)]

    def count(self, trainable_only: bool = True) -> int:
        items = self.trainable() if trainable_only else self.tensors.values()
        return sum(t.size for t in items)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self.tensors.items())

    def checksum(self) -> str:
        return hashlib.sha256(checkpoint.encode_params(self.arrays())).hexdigest()

    def astype(self, dtype) -> "ModelParams":
        out = OrderedDict()
        for n, t in self.tensors.items():
            out[n] = Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
        return ModelParams(out)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], trainable: bool = True) -> "ModelParams":
        return cls(
            OrderedDict(
                (n, Tensor(np.array(a), requires_grad=trainable and not n.endswith(BUFFER_SUFFIXES)))
                for n, a in arrays.items()
            )
        )

    def check_against(self, config: ModelConfig) -> None:
        expected = param_shapes(config)
        missing = [n for n in expected if n not in self.tensors]
        extra = [n for n in self.tensors if n not in expected]
        if missing or extra:
            raise ValueError(
                f"parameters do not match model config: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for n, shape in expected.items():
            if self.tensors[n].shape != shape:
                raise ValueError(f"parameter {n!r} has shape {self.tensors[n].shape}, expected {shape}")


def init_params(config: ModelConfig, dtype=np.float64) -> ModelParams:
    """He-uniform conv weights, zero biases, identity batch norm; seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith((".gamma", ".running_var")):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        trainable = not name.endswith(BUFFER_SUFFIXES)
        tensors[name] = Tensor(value.astype(dtype), requires_grad=trainable)
    return ModelParams(tensors)


def save_model(params: ModelParams, path) -> None:
    checkpoint.save_params(params.arrays(), path)


def load_model(path, config: ModelConfig | None = None) -> ModelParams:
    params = ModelParams.from_arrays(checkpoint.load_params(path))
    if config is not None:
        params.check_against(config)
    return params


# -- building blocks -------------------------------------------------------

def _conv(x: Tensor, params: ModelParams, name: str, padding: int = 0) -> Tensor:
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=padding)


def _bn_relu_conv(x: Tensor, params: ModelParams, bn: str, conv: str, training: bool, padding: int = 0) -> Tensor:
    return bn_relu_conv(
        x,
        params[f"{bn}.gamma"],
        params[f"{bn}.beta"],
        params[f"{bn}.running_mean"].data,
        params[f"{bn}.running_var"].data,
        params[f"{conv}.weight"],
        params[f"{conv}.bias"],
        training,
        padding=padding,
    )


def dense_block(x: Tensor, cfg: DenseBlockConfig, params: ModelParams, prefix: str, training: bool) -> Tensor:
    """Each layer: BN-ReLU-1x1 conv (bottleneck) - BN-ReLU-3x3 conv, concatenated onto the stack."""
    for layer in range(cfg.layers):
        p = f"{prefix}/layer{layer}"
        h = _bn_relu_conv(x, params, f"{p}/bn1", f"{p}/conv1", training)
        h = _bn_relu_conv(h, params, f"{p}/bn2", f"{p}/conv2", training, padding=1)
        x = concat_channels(x, h)
    return x


def down_transition(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """1x1 conv compression then 2x2 average pooling; odd extents are reflect-padded first."""
    x = _conv(x, params, f"{prefix}/conv")
    for axis in (2, 3):
        if x.shape[axis] < 2:
            raise ValueError(f"cannot downsample extent {x.shape[axis]} at {prefix}; use fewer scales")
        if x.shape[axis] % 2:
            x = pad_reflect_end(x, axis)
    return pool2d(x, "average", 2)


def up_transition(
    x: Tensor, skip: Tensor, cfg: DenseBlockConfig, params: ModelParams, prefix: str, training: bool
) -> Tensor:
    """Nearest x2 upsample + 3x3 conv, crop to the skip's extent, concat skip, dense block."""
    H, W = skip.shape[2], skip.shape[3]
    up = upsample2d(x, 2)
    if up.shape[2] < H or up.shape[3] < W or up.shape[2] > H + 1 or up.shape[3] > W + 1:
        raise ValueError(f"scale mismatch at {prefix}: upsampled {up.shape} vs skip {skip.shape}")
    if up.shape[2:] != (H, W):
        up = up[:, :, :H, :W]
    up = _conv(up, params, f"{prefix}/up/conv", padding=1)
    return dense_block(concat_channels(up, skip), cfg, params, f"{prefix}/block", training)


def _branch(x: Tensor, config: ModelConfig, cfg: DenseBlockConfig, params: ModelParams, name: str, training: bool) -> Tensor:
    x = _conv(x, params, f"{name}/conv0", padding=1)
    skips = []
    for s in range(config.scales):
        x = dense_block(x, cfg, params, f"{name}/enc{s}/block", training)
        skips.append(x)
        x = down_transition(x, params, f"{name}/enc{s}/down")
    x = dense_block(x, cfg, params, f"{name}/bottom/block", training)
    for s in reversed(range(config.scales)):
        x = up_transition(x, skips[s], cfg, params, f"{name}/dec{s}", training)
    return x


def band_split(mag: Tensor, layout: BandLayout) -> list[Tensor]:
    """Slice ``(B, C, bins, T)`` into frequency bands; the full band is appended if enabled."""
    bins = mag.shape[2]
    parts = [mag[:, :, lo:hi] for lo, hi in layout.bands(bins)]
    if layout.includes_full_band:
        parts.append(mag)
    return parts


def band_merge(
    band_outputs: list[Tensor],
    full_band_output: Tensor | None,
    config: ModelConfig,
    params: ModelParams,
    training: bool,
) -> Tensor:
    """Join bands along frequency, stack the full band on channels, then map to magnitudes."""
    merged = concat(band_outputs, axis=2)
    if merged.shape[2] != config.bins:
        raise ValueError(f"band outputs cover {merged.shape[2]} bins, expected {config.bins}")
    if full_band_output is not None:
        merged = concat_channels(merged, full_band_output)
    x = dense_block(merged, config.final_block, params, "merge/block", training)
    return relu(_conv(x, params, "merge/out/conv"))


def forward(mag_patch, config: ModelConfig, params: ModelParams, training: bool = False) -> Tensor:
    """Estimate one source's magnitude from mixture magnitude.

    Accepts ``(channels, bins, frames)`` or a batch ``(B, channels, bins, frames)``
    and returns the same shape.
    """
    x = mag_patch if isinstance(mag_patch, Tensor) else Tensor(mag_patch)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1] != config.input_channels or x.shape[2] != config.bins:
        raise ValueError(
            f"input shape {x.shape} does not match model (B, {config.input_channels}, {config.bins}, frames)"
        )
    parts = band_split(x, config.layout)
    outputs = []
    for (name, cfg, _), part in zip(config.branches(), parts):
        outputs.append(_branch(part, config, cfg, params, name, training))
    full = outputs.pop() if config.layout.includes_full_band else None
    y = band_merge(outputs, full, config, params, training).check_finite("model forward")
    return y.reshape(*y.shape[1:]) if squeeze else y

"""Composite spectrogram loss: pixel L2 plus VGG feature and Gram (style) terms.

Magnitude patches are mapped to 3-channel images and pushed through a frozen
VGG-16-style conv stack. The feature term compares activations at one tap;
the style term compares channel Gram matrices at several taps.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .tensor import Tensor, concat, conv2d, matmul, no_grad, pool2d, relu

# (stage, convs per stage, base width) of VGG-16 up to its fourth stage
VGG16_STAGES = ((1, 2, 64), (2, 2, 128), (3, 3, 256), (4, 3, 512))


@dataclass(frozen=True)
class FeatureExtractorConfig:
    width_multiplier: float = 0.25
    weight_source: str = "seeded"
    feature_tap: str = "relu3_3"
    style_taps: tuple[str, ...] = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
    seed: int = 1234

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        known = set(self.layer_names())
        for tap in (self.feature_tap, *self.style_taps):
            if tap not in known:
                raise ValueError(f"unknown tap {tap!r}; known layers: {sorted(known)}")

    def layer_names(self) -> list[str]:
        return [f"relu{s}_{i}" for s, n, _ in VGG16_STAGES for i in range(1, n + 1)]

    def stage_widths(self) -> list[int]:
        return [max(1, int(round(w * self.width_multiplier))) for _, _, w in VGG16_STAGES]

    def deepest_stage(self) -> int:
        return max(int(t[4]) for t in (self.feature_tap, *self.style_taps))

    def min_extent(self) -> int:
        """Smallest H, W for which every tap still has at least one pixel."""
        return 2 ** (self.deepest_stage() - 1)


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 0.5
    feature: float = 0.25
    style: float = 0.25

    def __post_init__(self):
        values = (self.pixel, self.feature, self.style)
        if any(v < 0 or not math.isfinite(v) for v in values) or not any(v > 0 for v in values):
            raise ValueError(f"loss weights must be nonnegative with at least one positive: {values}")

    @property
    def needs_extractor(self) -> bool:
        return self.feature > 0 or self.style > 0


@dataclass
class LossBreakdown:
    pixel_term: float
    feature_term: float
    style_term: float
    weights: LossWeights = field(default_factory=LossWeights)
    epoch: int | None = None
    step: int | None = None

    @property
    def composite(self) -> float:
        w = self.weights
        return self.pixel_term * w.pixel + self.feature_term * w.feature + self.style_term * w.style


class FeatureExtractor:
    """Frozen VGG-16-topology conv/relu/max-pool stack."""

    def __init__(self, config: FeatureExtractorConfig | None = None, weights=None, dtype=np.float64):
        self.config = config or FeatureExtractorConfig()
        expected = self.param_shapes()
        if weights is None:
            if self.config.weight_source not in ("seeded", ""):
                weights = checkpoint.load_params(self.config.weight_source)
            else:
                weights = self._seeded_weights(expected)
        for name, shape in expected.items():
            if name not in weights:
                raise ValueError(f"extractor weights missing {name!r}")
            if tuple(weights[name].shape) != shape:
                raise ValueError(f"extractor weight {name!r} has shape {weights[name].shape}, expected {shape}")
        self.params = OrderedDict(
            (n, Tensor(np.asarray(weights[n], dtype=dtype), requires_grad=False)) for n in expected
        )

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        shapes = OrderedDict()
        c_in = 3
        deepest = self.config.deepest_stage()
        for (stage, n_convs, _), width in zip(VGG16_STAGES, self.config.stage_widths()):
            if stage > deepest:
                break
            for i in range(1, n_convs + 1):
                shapes[f"conv{stage}_{i}.weight"] = (width, c_in, 3, 3)
                shapes[f"conv{stage}_{i}.bias"] = (width,)
                c_in = width
        return shapes

    def _seeded_weights(self, shapes):
        rng = np.random.default_rng(self.config.seed)
        out = OrderedDict()
        for name, shape in shapes.items():
            if name.endswith(".weight"):
                bound = math.sqrt(6.0 / (shape[1] * shape[2] * shape[3]))
                out[name] = rng.uniform(-bound, bound, size=shape)
            else:
                out[name] = np.zeros(shape)
        return out

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self.params.items())

    def astype(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor(self.config, self.arrays(), dtype=dtype)

    def __call__(self, image: Tensor) -> dict[str, Tensor]:
        return self.extract(image)

    def extract(self, image: Tensor) -> dict[str, Tensor]:
        """Activations at the configured taps for a ``(B, 3, H, W)`` or ``(3, H, W)`` image."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"extractor expects 3-channel images, got shape {x.shape}")
        need = self.config.min_extent()
        if min(x.shape[2:]) < need:
            raise ValueError(
                f"image extent {x.shape[2:]} too small: taps need at least {need} pixels per axis"
            )
        wanted = {self.config.feature_tap, *self.config.style_taps}
        taps: dict[str, Tensor] = {}
        deepest = self.config.deepest_stage()
        for stage, n_convs, _ in VGG16_STAGES:
            if stage > deepest:
                break
            if stage > 1:
                x = pool2d(x, "max", 2)
            for i in range(1, n_convs + 1):
                x = relu(conv2d(x, self.params[f"conv{stage}_{i}.weight"], self.params[f"conv{stage}_{i}.bias"], padding=1))
                name = f"relu{stage}_{i}"
                if name in wanted:
                    taps[name] = x
        return taps


def extract_features(image, extractor: FeatureExtractor) -> dict[str, Tensor]:
    return extractor.extract(image)


def pixel_l2_loss(est: Tensor, target) -> Tensor:
    """Mean squared difference over every element."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if est.shape != target.shape:
        raise ValueError(f"pixel loss shape mismatch: {est.shape} vs {target.shape}")
    return (est - target).square().mean()


def spectrogram_to_image(mag: Tensor, normalizer: float) -> Tensor:
    """Map ``(B, ch, bins, frames)`` magnitudes to ``(B, 3, bins, frames)`` images.

    Mono is replicated three times; stereo becomes ``[left, right, mean]``.
    Everything is divided by ``normalizer``.
    """
    x = mag if isinstance(mag, Tensor) else Tensor(mag)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    ch = x.shape[1]
    if ch == 1:
        img = concat([x, x, x], axis=1)
    elif ch == 2:
        left, right = x[:, 0:1], x[:, 1:2]
        img = concat([left, right, (left + right) * 0.5], axis=1)
    else:
        raise ValueError(f"spectrogram_to_image supports 1 or 2 channels, got {ch}")
    img = img * (1.0 / normalizer)
    return img.reshape(*img.shape[1:]) if squeeze else img


def image_normalizer(target) -> float:
    """Max absolute value of the target batch, floored at 1e-8."""
    data = target.data if isinstance(target, Tensor) else np.asarray(target)
    return max(float(np.max(np.abs(data))) if data.size else 0.0, 1e-8)


def gram_matrix(features: Tensor) -> Tensor:
    """``psi psi^T / (C H W)`` for ``(C, H, W)`` or batched ``(B, C, H, W)`` features."""
    squeeze = features.ndim == 3
    f = features.reshape(1, *features.shape) if squeeze else features
    B, C, H, W = f.shape
    psi = f.reshape(B, C, H * W)
    g = matmul(psi, psi.transpose(0, 2, 1)) * (1.0 / (C * H * W))
    return g.reshape(C, C) if squeeze else g


def feature_recon_loss(est_feats: Tensor, target_feats: Tensor) -> Tensor:
    """Squared L2 distance of feature maps over ``C*H*W``, averaged over the batch."""
    if est_feats.shape != target_feats.shape:
        raise ValueError(f"feature shape mismatch: {est_feats.shape} vs {target_feats.shape}")
    # mean over all elements == per-sample sum / (C*H*W), averaged over the batch
    return (est_feats - target_feats).square().mean()


def style_recon_loss(est_feats: dict[str, Tensor], target_feats: dict[str, Tensor], style_taps) -> Tensor:
    """Sum over taps of squared Frobenius norm of the Gram difference, averaged over the batch."""
    total = None
    for tap in style_taps:
        a, b = est_feats[tap], target_feats[tap]
        if a.shape != b.shape:
            raise ValueError(f"style tap {tap} shape mismatch: {a.shape} vs {b.shape}")
        diff = gram_matrix(a) - gram_matrix(b)
        batch = diff.shape[0] if diff.ndim == 3 else 1
        term = diff.square().sum() * (1.0 / batch)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("style loss needs at least one tap")
    return total


def composite_loss(
    est_mag: Tensor,
    target_mag,
    weights: LossWeights,
    extractor: FeatureExtractor | None = None,
    all_terms: bool = False,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted pixel + feature + style loss; differentiable with respect to ``est_mag``.

    Terms with zero weight are skipped (reported as 0.0) unless ``all_terms``
    is set, in which case they are evaluated without recording a graph.
    """
    target = target_mag.detach() if isinstance(target_mag, Tensor) else Tensor(target_mag)
    if est_mag.shape != target.shape:
        raise ValueError(f"estimate shape {est_mag.shape} does not match target {target.shape}")
    pixel = pixel_l2_loss(est_mag, target)
    total = pixel * weights.pixel if weights.pixel != 1.0 else pixel
    feature_value = style_value = 0.0

    want_features = weights.needs_extractor or all_terms
    if want_features:
        if extractor is None:
            raise ValueError("feature/style terms need a FeatureExtractor")
        cfg = extractor.config
        norm = image_normalizer(target)
        with no_grad():
            target_taps = extractor.extract(spectrogram_to_image(target, norm))
        if weights.needs_extractor:
            est_taps = extractor.extract(spectrogram_to_image(est_mag, norm))
        else:
            with no_grad():
                est_taps = extractor.extract(spectrogram_to_image(est_mag.detach(), norm))
        tap = cfg.feature_tap
        feature = feature_recon_loss(est_taps[tap], target_taps[tap])
        style = style_recon_loss(est_taps, target_taps, cfg.style_taps)
        feature_value, style_value = feature.item(), style.item()
        if weights.feature > 0:
            total = total + feature * weights.feature
        if weights.style > 0:
            total = total + style * weights.style
    elif weights.pixel == 0:
        raise ValueError("at least one loss weight must be positive")

    breakdown = LossBreakdown(pixel.item(), feature_value, style_value, weights)
    return total.check_finite("composite loss"), breakdown

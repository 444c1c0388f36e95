import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specsep.dsp import (
    ComplexSpectrogram,
    PatchCoverage,
    StftConfig,
    apply_mixture_phase,
    cola_profile,
    extract_patches,
    hann_periodic,
    istft,
    merge_patches,
    spectrogram_energy,
    stft,
)

CFG = StftConfig()


def interior(cfg, n):
    span = (cfg.n_frames(n) - 1) * cfg.hop + cfg.fft_size
    return slice(cfg.hop, span - cfg.hop)


def test_defaults():
    assert (CFG.fft_size, CFG.hop, CFG.patch_frames, CFG.sample_rate, CFG.bins) == (2048, 1024, 128, 44100, 1025)


def test_cola_constant():
    profile = cola_profile(hann_periodic(2048), 1024)
    assert np.ptp(profile) < 1e-12
    assert abs(profile.mean() - 1.0) < 1e-12


def test_squared_hann_is_not_constant_at_half_overlap():
    # why synthesis divides by the overlapped squared window instead of assuming it is flat
    sq = cola_profile(hann_periodic(2048) ** 2, 1024)
    assert np.ptp(sq) > 0.4


def test_non_cola_hop_rejected():
    with pytest.raises(ValueError, match="constant-overlap-add"):
        StftConfig(fft_size=2048, hop=700)
    with pytest.raises(ValueError):
        StftConfig(window="kaiser")


def test_frame_count():
    for n in (2048, 2049, 3071, 3072, 10000):
        assert stft(np.zeros(n)).n_frames == 1 + (n - 2048) // 1024
    with pytest.raises(ValueError, match="shorter than one frame"):
        stft(np.zeros(2047))


def test_zero_signal():
    spec = stft(np.zeros((2, 5000)))
    assert not spec.magnitude.any()
    assert not istft(spec).any()


def test_sinusoid_matches_direct_dft():
    cfg = StftConfig(fft_size=256, hop=128)
    k = 9
    n = np.arange(1024)
    x = np.cos(2 * np.pi * k * n / cfg.fft_size)
    spec = stft(x, cfg)
    w = hann_periodic(cfg.fft_size)
    m = np.arange(cfg.fft_size)
    for t in (0, 3, spec.n_frames - 1):
        frame = x[t * cfg.hop:t * cfg.hop + cfg.fft_size] * w
        oracle = np.array([np.sum(frame * np.exp(-2j * np.pi * b * m / cfg.fft_size)) for b in range(cfg.bins)])
        np.testing.assert_allclose(spec.complex()[0, :, t], oracle, rtol=0, atol=1e-10)
    assert np.all(spec.phase > -np.pi) and np.all(spec.phase <= np.pi)


def test_round_trip_random_stereo_3s():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (2, 3 * 44100))
    y = istft(stft(x))
    assert y.shape == x.shape
    sl = interior(CFG, x.shape[1])
    err = np.linalg.norm(y[:, sl] - x[:, sl]) / np.linalg.norm(x[:, sl])
    assert err < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(256, 3000), st.integers(0, 2**31 - 1))
def test_round_trip_property(n, seed):
    cfg = StftConfig(fft_size=256, hop=128)
    x = np.random.default_rng(seed).standard_normal(n) * 10.0
    y = istft(stft(x, cfg))
    assert y.shape == (1, n)
    sl = interior(cfg, n)
    if sl.stop > sl.start:
        assert np.linalg.norm(y[0, sl] - x[sl]) <= 1e-10 * np.linalg.norm(x[sl])


def test_parseval():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 20000))
    spec = stft(x)
    w = hann_periodic(2048)
    direct = sum(
        np.sum((x[:, t * 1024:t * 1024 + 2048] * w) ** 2) for t in range(spec.n_frames)
    )
    assert abs(spectrogram_energy(spec) - direct) < 1e-8 * direct


def test_apply_mixture_phase():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 8000))
    spec = stft(x)
    same = apply_mixture_phase(spec.magnitude, spec)
    np.testing.assert_array_equal(same.complex(), spec.complex())
    zero = apply_mixture_phase(np.zeros_like(spec.magnitude), spec)
    assert not istft(zero).any()
    est = rng.uniform(0, 1, spec.shape)
    assert apply_mixture_phase(est, spec).magnitude.tobytes() == est.tobytes()
    with pytest.raises(ValueError):
        apply_mixture_phase(est[:, :, :-1], spec)


def test_spectrogram_shape_validation():
    with pytest.raises(ValueError):
        ComplexSpectrogram(np.zeros((1, 10, 3)), np.zeros((1, 10, 3)), CFG)
    with pytest.raises(ValueError):
        ComplexSpectrogram(np.zeros((1, 1025, 3)), np.zeros((1, 1025, 4)), CFG)


def test_patch_examples():
    mag = np.ones((2, 5, 256))
    patches, cov = extract_patches(mag, 128)
    assert len(patches) == 2 and cov.padding == 0
    patches, cov = extract_patches(np.ones((2, 5, 130)), 128)
    assert len(patches) == 2 and cov.padding == 126
    assert not patches[1][..., 2:].any()


def test_patches_lossless_for_all_frame_counts():
    rng = np.random.default_rng(3)
    for frames in range(1, 301):
        mag = rng.uniform(0, 1, (2, 3, frames))
        patches, cov = extract_patches(mag, 128)
        assert all(p.shape == (2, 3, 128) for p in patches)
        assert merge_patches(patches, cov).tobytes() == mag.tobytes()


def test_inconsistent_coverage_rejected():
    patches, cov = extract_patches(np.ones((1, 2, 130)), 128)
    with pytest.raises(ValueError):
        merge_patches(patches, PatchCoverage(130, 128, 3, 254))
    with pytest.raises(ValueError):
        merge_patches(patches[:1], cov)


def test_modified_spectrum_edges_stay_bounded():
    # a spectrum that no signal produces exactly (random phase) must not blow up
    # in the partially overlapped first and last frames
    rng = np.random.default_rng(4)
    cfg = StftConfig(fft_size=256, hop=128)
    spec = stft(rng.standard_normal((1, 4000)), cfg)
    spec.phase = rng.uniform(-np.pi, np.pi, spec.shape)
    y = istft(spec)[0]
    sl = interior(cfg, 4000)
    inner = np.sqrt(np.mean(y[sl] ** 2))
    assert np.max(np.abs(y[: sl.start])) < 5 * inner
    assert np.max(np.abs(y[sl.stop:])) < 5 * inner

import pytest

from specsep.config import FIELDS, ConfigError, RunConfig, describe, parse_overrides


def test_defaults_round_trip():
    cfg = RunConfig.defaults()
    text = cfg.serialize()
    again = RunConfig.parse(text)
    assert again.values == cfg.values and again.serialize() == text
    assert cfg.stft().fft_size == 2048 and cfg.stft().hop == 1024 and cfg.stft().patch_frames == 128
    w = cfg.loss_weights()
    assert (w.pixel, w.feature, w.style) == (0.5, 0.25, 0.25)
    s = cfg.schedule()
    assert (s.initial, s.dropped) == (1e-3, 1e-4)


def test_every_key_documented():
    text = describe()
    for f in FIELDS:
        assert f.key in text and f.doc


def test_overrides_and_comments():
    cfg = RunConfig.parse("# run\nloss.pixel = 1  # pixel only\nloss.feature = 0\nloss.style = 0\nmodel.split_bins = 256, 512\n")
    assert cfg["loss.pixel"] == 1.0 and cfg["model.split_bins"] == (256, 512)
    cfg2 = cfg.with_overrides(parse_overrides(["train.source=drums", "model.channels=1"]))
    assert cfg2["train.source"] == "drums" and cfg2.model().input_channels == 1
    assert cfg["train.source"] == "vocals"


@pytest.mark.parametrize(
    "text,key",
    [
        ("bogus.key = 1", "bogus.key"),
        ("loss.pixel = 1\nloss.pixel = 2", "loss.pixel"),
        ("loss.pixel = abc", "loss.pixel"),
        ("loss.pixel = 0\nloss.feature = 0\nloss.style = 0", "loss"),
        ("train.dtype = float16", "train.dtype"),
        ("train.source = piano", "train.source"),
        ("stft.hop = 700", "stft"),
        ("eval.filter_len = 50000", "eval.filter_len"),
        ("just words", "line 1"),
    ],
)
def test_invalid_configs_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        RunConfig.parse(text)
    assert info.value.key == key


def test_bad_override_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_overrides(["noequals"])
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.cfg")


def test_nyquist_switch():
    cfg = RunConfig.defaults().with_overrides({"stft.keep_nyquist": "false"})
    assert cfg.stft().bins == 1024 and cfg.model().bins == 1024
    assert RunConfig.parse(cfg.serialize()).stft().bins == 1024

import json

import pytest

from specsep.cli import main
from specsep.data import AudioClip, load_wav, save_wav

TINY = [
    "stft.fft_size=256", "stft.hop=128", "stft.patch_frames=16", "stft.sample_rate=8000",
    "model.scales=1", "model.band_layers=1", "model.band_growth=2", "model.full_layers=1",
    "model.full_growth=2", "model.final_layers=1", "model.final_growth=2", "model.split_bins=64",
    "train.max_epochs=2", "train.batches_per_epoch=1", "train.batch_size=2",
    "eval.window=4000", "eval.hop=4000", "eval.filter_len=16",
]


def sets(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth-data", "--out", str(root), "--train-tracks", "2", "--test-tracks", "1",
                 "--duration", "1.0", "--sample-rate", "8000", "--stems", "vocals,drums"]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(dataset):
    out = dataset.parent / "run"
    assert main(["train", "--dataset", str(dataset), "--out", str(out)] + sets(TINY)) == 0
    return out


def test_synth_data_refuses_non_empty(dataset, capsys):
    assert main(["synth-data", "--out", str(dataset), "--duration", "1.0", "--sample-rate", "8000"]) == 3
    assert "--force" in capsys.readouterr().err


def test_train_writes_run_directory(run_dir):
    for name in ("config.cfg", "epochs.csv", "loss_trajectory.csv", "best.ckpt", "last.ckpt", "run.json",
                 "eval/report.json", "eval/report.csv"):
        assert (run_dir / name).is_file(), name
    summary = json.loads((run_dir / "run.json").read_text())
    assert summary["epochs"] == 2 and summary["source"] == "vocals"
    assert "vocals" in summary["test_median_sdr"]
    assert len((run_dir / "epochs.csv").read_text().splitlines()) == 3


def test_separate_and_evaluate(run_dir, dataset, tmp_path):
    mix = dataset / "test/track000/mixture.wav"
    out = tmp_path / "est/track000"
    assert main(["separate", "--model", f"vocals={run_dir}", "--model", f"drums={run_dir / 'last.ckpt'}",
                 "--input", str(mix), "--out", str(out)]) == 0
    clip = load_wav(mix)
    for source in ("vocals", "drums"):
        est = load_wav(out / f"{source}.wav")
        assert est.samples.shape == clip.samples.shape
    report = tmp_path / "report.json"
    assert main(["evaluate", "--estimates", str(tmp_path / "est"), "--references", str(dataset / "test"),
                 "--report", str(report), "--window", "4000", "--hop", "4000", "--filter-len", "16"]) == 0
    doc = json.loads(report.read_text())
    assert set(doc["dataset_medians"]) == {"vocals", "drums"}
    assert report.with_suffix(".csv").is_file()


def test_separate_errors(run_dir, dataset, tmp_path):
    mix = dataset / "test/track000/mixture.wav"
    assert main(["separate", "--model", f"vocals={tmp_path / 'none.ckpt'}", "--input", str(mix),
                 "--out", str(tmp_path / "o")]) == 3
    mono = tmp_path / "mono.wav"
    save_wav(AudioClip(load_wav(mix).samples[:1], 8000), mono)
    assert main(["separate", "--model", f"vocals={run_dir}", "--input", str(mono), "--out", str(tmp_path / "o")]) == 3
    assert main(["separate", "--model", "vocals", "--input", str(mix), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_compare_values(tmp_path, capsys):
    path = tmp_path / "cmp.json"
    code = main(["compare", "--values-a", "4.70,4.53,4.52,4.64", "--values-b", "4.88,4.65,4.71,4.88",
                 "--source", "drums", "--json", str(path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "-2.49" in out and "5.53" in out and "0.051" in out
    assert json.loads(path.read_text())["sources"] == ["drums"]
    assert main(["compare", "--values-a", "1,2"]) == 2
    assert main(["compare", "--values-a", "1", "--values-b", "1,2"]) == 2


def test_compare_run_directories(run_dir, capsys):
    assert main(["compare", "--a", str(run_dir), str(run_dir / "eval/report.json"),
                 "--b", str(run_dir), str(run_dir)]) == 0
    assert "Source: vocals" in capsys.readouterr().out
    assert main(["compare", "--a", str(run_dir.parent), str(run_dir), "--b", str(run_dir), str(run_dir)]) == 3


def test_config_errors(dataset, tmp_path):
    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "r"), "--set", "bogus=1"]) == 2
    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "r"), "--set", "loss.pixel=x"]) == 2
    assert main(["train", "--out", str(tmp_path / "r")] + sets(TINY)) == 3
    assert main(["train", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")] + sets(TINY)) == 3


def test_numeric_failure_exit_code(dataset, tmp_path):
    bad = TINY + ["optim.lr_initial=1e30", "train.max_epochs=3", "train.batches_per_epoch=2"]
    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path / "r"), "--no-eval"] + sets(bad)) == 4


def test_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("SPECSEP_THREADS", "x")
    assert main(["config"]) == 2
    monkeypatch.setenv("SPECSEP_THREADS", "0")
    assert main(["config", "--describe"]) == 0
    assert "loss.pixel" in capsys.readouterr().out

"""Test-split evaluation of a finished training run."""

from __future__ import annotations

from pathlib import Path

from .config import RunConfig
from .bsseval import EvalReport
from .data import DatasetManifest
from .evaluate import score_track
from .mmdense import load_model
from .separation import model_estimator, separate_audio


def evaluate_run(run_dir, config: RunConfig, manifest: DatasetManifest, summary: dict) -> EvalReport:
    """Separate every test track with the run's best model and score it.

    The model's raw estimate is used as is (a single source has nothing to
    be rescaled against).
    """
    run_dir = Path(run_dir)
    v = config.values
    model_cfg, stft_cfg = config.model(), config.stft()
    params = load_model(run_dir / "best.ckpt", model_cfg)
    estimator = model_estimator(params, model_cfg)
    source = v["train.source"]
    metadata = {
        "run_name": run_dir.name,
        "source": source,
        "seed": v["train.seed"],
        "loss_weights": summary["loss_weights"],
        "epochs": summary["epochs"],
        "best_epoch": summary["best_epoch"],
        "min_valid_pixel_loss": summary["min_valid_pixel_loss"],
    }
    report = EvalReport(metadata=metadata)
    for entry in manifest.split("test"):
        stems = manifest.load_track(entry)
        if model_cfg.input_channels == 1:
            stems = stems.downmixed()
        sep = separate_audio(stems.mixture.samples, {source: estimator}, stft_cfg)
        refs = {name: clip.samples for name, clip in stems.stems.items()}
        window = min(v["eval.window"], stems.mixture.length)
        report.songs[entry.name] = score_track(
            {source: sep.waveforms[source]}, refs, window, v["eval.hop"], min(v["eval.filter_len"], window)
        )
    out = run_dir / "eval"
    out.mkdir(exist_ok=True)
    report.save(out / "report.json", out / "report.csv")
    return report

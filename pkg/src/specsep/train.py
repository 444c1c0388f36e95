"""Per-source training loop with logs, checkpoints and an optional test evaluation.

A run directory holds::

    config.cfg            full configuration used
    epochs.csv            per-epoch training and validation loss terms
    loss_trajectory.csv   validation pixel loss and its best-so-far value
    best.ckpt, last.ckpt  model weights (best = lowest validation composite)
    run.json              summary
    eval/report.json      test-split scores, when the dataset has a test split
    eval/report.csv

Nothing time-dependent is written, so reruns with the same configuration
produce identical files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .bsseval import _enc
from .config import RunConfig
from .data import DataError, DatasetManifest, PatchSampler
from .featloss import FeatureExtractor, LossBreakdown, composite_loss
from .mmdense import ModelParams, forward, init_params, save_model
from .optim import RMSProp
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

EPOCH_COLUMNS = (
    "epoch",
    "learning_rate",
    "train_pixel",
    "train_feature",
    "train_style",
    "train_composite",
    "valid_pixel",
    "valid_feature",
    "valid_style",
    "valid_composite",
    "best_valid_composite",
)
VALID_SEED_OFFSET = 7919


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train: LossBreakdown
    valid: LossBreakdown
    best_valid_composite: float

    def row(self) -> list[str]:
        values = [
            self.learning_rate,
            self.train.pixel_term,
            self.train.feature_term,
            self.train.style_term,
            self.train.composite,
            self.valid.pixel_term,
            self.valid.feature_term,
            self.valid.style_term,
            self.valid.composite,
            self.best_valid_composite,
        ]
        return [str(self.epoch)] + [repr(float(v)) for v in values]


@dataclass
class TrainResult:
    run_dir: Path
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    params: ModelParams | None = None

    @property
    def min_valid_pixel_loss(self) -> float:
        """Validation pixel term at the epoch with the lowest validation composite."""
        return self.epochs[self.best_epoch - 1].valid.pixel_term


def _mean_breakdown(parts: list[LossBreakdown], weights, epoch: int) -> LossBreakdown:
    return LossBreakdown(
        float(np.mean([p.pixel_term for p in parts])),
        float(np.mean([p.feature_term for p in parts])),
        float(np.mean([p.style_term for p in parts])),
        weights,
        epoch=epoch,
    )


def _csv(rows, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def load_manifest(path) -> DatasetManifest:
    if not str(path):
        raise DataError("no dataset given (set train.dataset)")
    return DatasetManifest.load(path)


def train(
    config: RunConfig,
    run_dir,
    evaluate_test: bool = True,
    progress: Callable[[str], None] | None = None,
) -> TrainResult:
    """Train one source model as described by ``config`` and write the run directory."""
    say = progress or log.info
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(config.serialize())

    v = config.values
    stft_cfg, model_cfg = config.stft(), config.model()
    weights, dtype = config.loss_weights(), config.dtype
    source = v["train.source"]
    manifest = load_manifest(v["train.dataset"])
    mono = model_cfg.input_channels == 1
    train_sampler = PatchSampler(manifest, source, stft_cfg, "train", mono=mono, dtype=dtype)
    valid_split = "valid" if manifest.split("valid") else "train"
    if valid_split == "train":
        say("dataset has no validation tracks; validating on fixed training patches")
    valid_sampler = PatchSampler(manifest, source, stft_cfg, valid_split, mono=mono, dtype=dtype)
    valid_batches = list(
        valid_sampler.batches(v["train.batch_size"], v["train.valid_batches"], seed=[v["train.seed"], VALID_SEED_OFFSET])
    )

    params = init_params(model_cfg, dtype)
    extractor = FeatureExtractor(config.features(), dtype=dtype) if weights.needs_extractor else None
    optimizer = RMSProp(params.trainable(), config.schedule(), v["optim.rho"], v["optim.eps"])
    result = TrainResult(run_dir, params=params)
    best = float("inf")
    trajectory = []

    for epoch in range(1, v["train.max_epochs"] + 1):
        lr = optimizer.learning_rate
        parts = []
        batches = train_sampler.batches(v["train.batch_size"], v["train.batches_per_epoch"], seed=[v["train.seed"], epoch])
        for step, batch in enumerate(batches):
            optimizer.zero_grad()
            try:
                est = forward(Tensor(batch.mixture), model_cfg, params, training=True)
                loss, breakdown = composite_loss(est, batch.target, weights, extractor)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, step {step}: {exc}") from exc
            optimizer.step()
            breakdown.epoch, breakdown.step = epoch, step
            parts.append(breakdown)
        train_bd = _mean_breakdown(parts, weights, epoch)

        vparts = []
        with no_grad():
            for batch in valid_batches:
                est = forward(Tensor(batch.mixture), model_cfg, params, training=False)
                vparts.append(composite_loss(est, batch.target, weights, extractor)[1])
        valid_bd = _mean_breakdown(vparts, weights, epoch)
        if not np.isfinite(valid_bd.composite):
            raise TrainingError(f"validation loss is not finite at epoch {epoch}")

        optimizer.schedule.update(valid_bd.composite)
        if valid_bd.composite < best:
            best = valid_bd.composite
            result.best_epoch = epoch
            save_model(params, run_dir / "best.ckpt")
        save_model(params, run_dir / "last.ckpt")
        record = EpochRecord(epoch, lr, train_bd, valid_bd, best)
        result.epochs.append(record)
        best_pixel = min(r.valid.pixel_term for r in result.epochs)
        trajectory.append([str(epoch), repr(valid_bd.pixel_term), repr(best_pixel)])
        (run_dir / "epochs.csv").write_text(_csv([r.row() for r in result.epochs], EPOCH_COLUMNS))
        (run_dir / "loss_trajectory.csv").write_text(
            _csv(trajectory, ["epoch", "valid_pixel", "best_valid_pixel"])
        )
        say(
            f"epoch {epoch:3d}  lr {lr:.0e}  train pixel {train_bd.pixel_term:.5g}  "
            f"composite {train_bd.composite:.5g}  valid pixel {valid_bd.pixel_term:.5g}  "
            f"composite {valid_bd.composite:.5g}"
        )

    summary = {
        "source": source,
        "epochs": len(result.epochs),
        "best_epoch": result.best_epoch,
        "min_valid_pixel_loss": result.min_valid_pixel_loss,
        "best_valid_composite": best,
        "first_train_pixel": result.epochs[0].train.pixel_term,
        "last_train_pixel": result.epochs[-1].train.pixel_term,
        "lr_drop_epoch": optimizer.schedule.drop_epoch,
        "loss_weights": [weights.pixel, weights.feature, weights.style],
        "seed": v["train.seed"],
        "model_seed": v["model.seed"],
        "parameters": params.count(),
        "checksum_last": params.checksum(),
    }
    if evaluate_test and manifest.split("test"):
        from .evaluate_run import evaluate_run

        report = evaluate_run(run_dir, config, manifest, summary)
        summary["test_median_sdr"] = {k: _enc(m) for k, m in report.dataset_medians().items()}
    (run_dir / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result

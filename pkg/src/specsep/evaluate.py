"""Scoring separated stems against reference stems, track by track."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .bsseval import DEFAULT_FILTER_LEN, DEFAULT_HOP, DEFAULT_WINDOW, EvalReport, framewise_scores
from .data import SOURCE_NAMES, DataError, load_wav


def score_track(
    estimates: Mapping[str, np.ndarray],
    references: Mapping[str, np.ndarray],
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    filter_len: int = DEFAULT_FILTER_LEN,
):
    """Framewise scores for every estimated source of one track.

    Every reference stem of the track takes part in the decomposition, so
    leakage from the other stems counts as interference.
    """
    names = [s for s in SOURCE_NAMES if s in references]
    refs = np.stack([np.asarray(references[s], dtype=np.float64) for s in names])
    out = {}
    for source in sorted(estimates):
        if source not in references:
            raise DataError(f"no reference stem for estimated source {source!r}")
        est = np.asarray(estimates[source], dtype=np.float64)
        if est.shape != refs.shape[1:]:
            raise DataError(f"estimate for {source!r} has shape {est.shape}, reference {refs.shape[1:]}")
        out[source] = framewise_scores(est, refs, names.index(source), source, window, hop, filter_len)
    return out


def evaluate_directories(
    estimates_dir,
    references_dir,
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    filter_len: int = DEFAULT_FILTER_LEN,
    metadata: dict | None = None,
) -> EvalReport:
    """Score ``estimates_dir/<track>/<source>.wav`` against ``references_dir/<track>/<stem>.wav``."""
    est_root, ref_root = Path(estimates_dir), Path(references_dir)
    if not est_root.is_dir():
        raise DataError(f"estimates directory not found: {est_root}")
    tracks = sorted(p.name for p in est_root.iterdir() if p.is_dir())
    if not tracks:
        raise DataError(f"no track directories under {est_root}")
    missing = []
    for track in tracks:
        for wav in sorted((est_root / track).glob("*.wav")):
            if not (ref_root / track / wav.name).is_file():
                missing.append(f"{track}/{wav.name}")
    if missing:
        raise DataError(f"missing reference stems for: {', '.join(missing)}")
    report = EvalReport(metadata=dict(metadata or {}))
    for track in tracks:
        ests = {p.stem: load_wav(p).samples for p in sorted((est_root / track).glob("*.wav")) if p.stem in SOURCE_NAMES}
        refs = {s: load_wav(ref_root / track / f"{s}.wav").samples for s in SOURCE_NAMES if (ref_root / track / f"{s}.wav").is_file()}
        report.songs[track] = score_track(ests, refs, window, hop, filter_len)
    return report

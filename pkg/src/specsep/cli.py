"""``specsep`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
``SPECSEP_THREADS`` caps BLAS threads (absent or 0 means one thread).
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, describe, parse_overrides
from .data import DataError, SynthSpec, load_wav, make_synthetic_dataset, save_wav, AudioClip
from .tensor import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("specsep")


class UsageError(Exception):
    pass


def _thread_limit() -> int:
    raw = os.environ.get("SPECSEP_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("SPECSEP_THREADS", f"expected an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("SPECSEP_THREADS", "must be >= 0")
    return max(1, n)


def _load_config(args) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig.defaults()
    overrides = parse_overrides(args.set)
    if getattr(args, "dataset", None):
        overrides["train.dataset"] = args.dataset
    return base.with_overrides(overrides)


def cmd_train(args) -> int:
    from .train import train

    config = _load_config(args)
    out = args.out or config["train.output_dir"]
    if not out:
        raise ConfigError("train.output_dir", "no run directory given (use --out)")
    config = config.with_overrides({"train.output_dir": str(out)})
    train(config, out, evaluate_test=not args.no_eval, progress=print)
    print(f"run written to {out}")
    return EXIT_OK


def _resolve_model(spec: str):
    """``source=path`` where path is a run directory or a checkpoint beside its config.cfg."""
    if "=" not in spec:
        raise UsageError(f"--model expects source=path, got {spec!r}")
    source, raw = spec.split("=", 1)
    path = Path(raw)
    ckpt = path / "best.ckpt" if path.is_dir() else path
    cfg_path = ckpt.parent / "config.cfg"
    config = RunConfig.load(cfg_path) if cfg_path.is_file() else RunConfig.defaults()
    return source.strip(), ckpt, config


def cmd_separate(args) -> int:
    from .separation import SeparationJob, separate

    models = [_resolve_model(m) for m in args.model]
    configs = {s: c for s, _, c in models}
    stft_cfgs = {c.stft() for c in configs.values()}
    if len(stft_cfgs) != 1:
        raise ConfigError("stft", "all models must share one STFT configuration")
    clip = load_wav(args.input)
    job = SeparationJob(
        clip,
        {s: p for s, p, _ in models},
        {s: c.model() for s, c in configs.items()},
        stft_cfgs.pop(),
        args.exponent,
    )
    result = separate(job)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for source, wave in result.waveforms.items():
        save_wav(AudioClip(wave, clip.sample_rate), out / f"{source}.wav")
        print(f"wrote {out / f'{source}.wav'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate_directories

    report = evaluate_directories(args.estimates, args.references, args.window, args.hop, args.filter_len)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.save(path, path.with_suffix(".csv"))
    for source, value in report.dataset_medians().items():
        print(f"{source}: median SDR {value:.2f} dB")
    return EXIT_OK


def _load_run_result(path: Path, label: str, index: int):
    from .bsseval import EvalReport
    from .compare import RunResult

    report_path = path / "eval" / "report.json" if path.is_dir() else path
    if not report_path.is_file():
        raise DataError(f"no evaluation report for run {path}")
    return RunResult.from_report(EvalReport.load(report_path), path.name if path.is_dir() else f"{label} run {index}")


def _parse_values(text: str, source: str, label: str):
    from .compare import RunResult

    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse SDR values {text!r}") from None
    return [RunResult(f"{label} run {i + 1}", None, {source: v}) for i, v in enumerate(values)]


def cmd_compare(args) -> int:
    from .compare import compare_results

    if args.values_a or args.values_b:
        if not (args.values_a and args.values_b):
            raise UsageError("--values-a and --values-b must be given together")
        runs_a = _parse_values(args.values_a, args.source, args.label_a)
        runs_b = _parse_values(args.values_b, args.source, args.label_b)
    else:
        runs_a = [_load_run_result(Path(p), args.label_a, i + 1) for i, p in enumerate(args.a or [])]
        runs_b = [_load_run_result(Path(p), args.label_b, i + 1) for i, p in enumerate(args.b or [])]
    if len(runs_a) < 2 or len(runs_b) < 2:
        raise UsageError(f"each side needs at least 2 runs (got {len(runs_a)} and {len(runs_b)})")
    comparison = compare_results(runs_a, runs_b, args.label_a, args.label_b)
    if args.json:
        Path(args.json).write_text(comparison.to_json())
    print(comparison.render_text(), end="")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise DataError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    spec = SynthSpec(
        train_tracks=args.train_tracks,
        test_tracks=args.test_tracks,
        duration=args.duration,
        sample_rate=args.sample_rate,
        channels=args.channels,
        stems=tuple(s.strip() for s in args.stems.split(",") if s.strip()),
        seed=args.seed,
    )
    manifest = make_synthetic_dataset(out, spec)
    print(f"wrote {len(manifest.tracks)} tracks to {out}")
    return EXIT_OK


def cmd_config(args) -> int:
    print(describe() if args.describe else RunConfig.defaults().serialize(), end="" if not args.describe else "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specsep", description="Spectrogram source separation with composite losses.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one source model")
    t.add_argument("--config", help="config file (dotted key = value lines)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--dataset", help="dataset directory (same as --set train.dataset=...)")
    t.add_argument("--out", help="run directory")
    t.add_argument("--no-eval", action="store_true", help="skip test-split evaluation")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate a mixture WAV into stems")
    s.add_argument("--model", action="append", required=True, metavar="SOURCE=PATH", help="run directory or checkpoint")
    s.add_argument("--input", required=True, help="mixture WAV")
    s.add_argument("--out", required=True, help="output directory for <source>.wav")
    s.add_argument("--exponent", type=float, default=1.0, help="magnitude exponent for rescaling")
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("evaluate", help="score estimated stems against references")
    e.add_argument("--estimates", required=True, help="directory of <track>/<source>.wav estimates")
    e.add_argument("--references", required=True, help="directory of <track>/<stem>.wav references")
    e.add_argument("--report", required=True, help="report JSON path (CSV written alongside)")
    e.add_argument("--window", type=int, default=44100)
    e.add_argument("--hop", type=int, default=44100)
    e.add_argument("--filter-len", type=int, default=512)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="compare two sets of runs with a Welch t-test")
    c.add_argument("--a", nargs="+", help="run directories or report files of the first arm")
    c.add_argument("--b", nargs="+", help="run directories or report files of the second arm")
    c.add_argument("--values-a", help="comma-separated SDR values instead of runs")
    c.add_argument("--values-b", help="comma-separated SDR values instead of runs")
    c.add_argument("--source", default="vocals", help="source name for --values-*")
    c.add_argument("--label-a", default="Model 1")
    c.add_argument("--label-b", default="Model 2")
    c.add_argument("--json", help="also write the comparison as JSON")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("synth-data", help="write a synthetic stem dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--train-tracks", type=int, default=3)
    d.add_argument("--test-tracks", type=int, default=1)
    d.add_argument("--duration", type=float, default=30.0)
    d.add_argument("--sample-rate", type=int, default=44100)
    d.add_argument("--channels", type=int, default=2, choices=(1, 2))
    d.add_argument("--stems", default="vocals,drums", help="comma-separated stem names")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    d.set_defaults(func=cmd_synth_data)

    g = sub.add_parser("config", help="print the default configuration")
    g.add_argument("--describe", action="store_true", help="list keys with their meaning")
    g.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"specsep: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"specsep: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError, ArithmeticError) as exc:
        print(f"specsep: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # separation/training errors carry their own type
        from .separation import SeparationError
        from .train import TrainingError

        if isinstance(exc, SeparationError):
            print(f"specsep: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(exc, TrainingError):
            print(f"specsep: numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())

"""Two-arm comparison of repeated runs: per-run losses and SDRs plus a Welch test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .bsseval import EvalReport, _dec, _enc
from .stats import TTestSummary, welch_t_test

COMPARISON_VERSION = 1


@dataclass
class RunResult:
    name: str
    min_valid_pixel_loss: float | None
    median_sdr: dict[str, float]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "min_valid_pixel_loss": None if self.min_valid_pixel_loss is None else _enc(self.min_valid_pixel_loss),
            "median_sdr": {k: _enc(v) for k, v in sorted(self.median_sdr.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunResult":
        loss = doc.get("min_valid_pixel_loss")
        return cls(
            doc["name"],
            None if loss is None else _dec(loss),
            {k: _dec(v) for k, v in doc["median_sdr"].items()},
        )

    @classmethod
    def from_report(cls, report: EvalReport, name: str | None = None) -> "RunResult":
        meta = report.metadata
        loss = meta.get("min_valid_pixel_loss")
        return cls(
            name or str(meta.get("run_name", "run")),
            None if loss is None else float(loss),
            report.dataset_medians(),
        )


@dataclass
class Comparison:
    label_a: str
    label_b: str
    runs_a: list[RunResult]
    runs_b: list[RunResult]
    sources: list[str]
    tests: dict[str, TTestSummary | None] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "version": COMPARISON_VERSION,
            "label_a": self.label_a,
            "label_b": self.label_b,
            "sources": list(self.sources),
            "runs_a": [r.to_json() for r in self.runs_a],
            "runs_b": [r.to_json() for r in self.runs_b],
            "tests": {s: (None if t is None else t.to_json()) for s, t in sorted(self.tests.items())},
            "notes": dict(sorted(self.notes.items())),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Comparison":
        doc = json.loads(text)
        if doc.get("version") != COMPARISON_VERSION:
            raise ValueError(f"unsupported comparison version {doc.get('version')} (expected {COMPARISON_VERSION})")
        return cls(
            doc["label_a"],
            doc["label_b"],
            [RunResult.from_json(r) for r in doc["runs_a"]],
            [RunResult.from_json(r) for r in doc["runs_b"]],
            list(doc["sources"]),
            {s: (None if t is None else TTestSummary.from_json(t)) for s, t in doc["tests"].items()},
            dict(doc.get("notes", {})),
        )

    def render_text(self) -> str:
        lines = []
        for source in self.sources:
            lines.extend(self._render_source(source))
            lines.append("")
        return "\n".join(lines)

    def _render_source(self, source: str) -> list[str]:
        def cell(v, fmt="{:.2f}"):
            if v is None:
                return "-"
            if math.isnan(v):
                return "undef"
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return fmt.format(v)

        a, b = self.label_a, self.label_b
        rows = [
            ["Run", f"Min. pixel val. loss (L2) {a}", f"Min. pixel val. loss (L2) {b}", f"SDR (dB) {a}", f"SDR (dB) {b}"]
        ]
        for i in range(max(len(self.runs_a), len(self.runs_b))):
            ra = self.runs_a[i] if i < len(self.runs_a) else None
            rb = self.runs_b[i] if i < len(self.runs_b) else None
            rows.append(
                [
                    str(i + 1),
                    cell(ra.min_valid_pixel_loss if ra else None, "{:.4g}"),
                    cell(rb.min_valid_pixel_loss if rb else None, "{:.4g}"),
                    cell(ra.median_sdr.get(source) if ra else None),
                    cell(rb.median_sdr.get(source) if rb else None),
                ]
            )
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        out = [f"Source: {source}"]
        out += ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
        out.append("")
        out.append("Welch Two Sample t-test")
        t = self.tests.get(source)
        if t is None:
            out.append(f"not available: {self.notes.get(source, 'no test')}")
            return out
        block = [
            ("t-statistic", f"{t.t_statistic:.2f}"),
            ("df", f"{t.degrees_of_freedom:.2f}"),
            ("p-value", f"{t.p_value:.3f}"),
            (f"Mean SDR with {a}", f"{t.mean_a:.2f}"),
            (f"Mean SDR with {b}", f"{t.mean_b:.2f}"),
            ("95% confidence interval (Difference of means)", f"{t.ci95[0]:.2f}, {t.ci95[1]:.2f}"),
        ]
        width = max(len(k) for k, _ in block)
        out += [f"{k.ljust(width)}  {v}" for k, v in block]
        return out


def compare_results(
    runs_a: Sequence[RunResult],
    runs_b: Sequence[RunResult],
    label_a: str = "Model 1",
    label_b: str = "Model 2",
) -> Comparison:
    """Build the comparison table and run a Welch test per source."""
    if len(runs_a) < 2 or len(runs_b) < 2:
        raise ValueError(f"each arm needs at least 2 runs (got {len(runs_a)} and {len(runs_b)})")
    sources = sorted(runs_a[0].median_sdr)
    for r in [*runs_a, *runs_b]:
        if sorted(r.median_sdr) != sources:
            raise ValueError(f"run {r.name!r} has sources {sorted(r.median_sdr)}, expected {sources}")
    tests: dict[str, TTestSummary | None] = {}
    notes: dict[str, str] = {}
    for s in sources:
        try:
            tests[s] = welch_t_test([r.median_sdr[s] for r in runs_a], [r.median_sdr[s] for r in runs_b])
        except ValueError as exc:
            tests[s] = None
            notes[s] = str(exc)
    return Comparison(label_a, label_b, list(runs_a), list(runs_b), sources, tests, notes)


def compare_runs(
    reports_a: Sequence[EvalReport],
    reports_b: Sequence[EvalReport],
    label_a: str = "Model 1",
    label_b: str = "Model 2",
) -> Comparison:
    runs_a = [RunResult.from_report(r, f"{label_a} run {i + 1}") for i, r in enumerate(reports_a)]
    runs_b = [RunResult.from_report(r, f"{label_b} run {i + 1}") for i, r in enumerate(reports_b)]
    return compare_results(runs_a, runs_b, label_a, label_b)

"""Projection-based SDR / SIR / SAR in the style of BSS Eval.

An estimate is split into a target part (least-squares fit by delayed copies
of the true source), an interference part (the extra fit gained by also
allowing delayed copies of the other sources) and an artifact remainder.
Delays are truncated: a copy delayed by ``k`` samples keeps the signal length
and has ``k`` leading zeros.

Multichannel signals are decomposed channel by channel; energies are summed
over channels when forming ratios.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.signal import fftconvolve

DEFAULT_FILTER_LEN = 512
DEFAULT_WINDOW = 44100
DEFAULT_HOP = 44100
REPORT_VERSION = 1


class SingularProjectionError(np.linalg.LinAlgError):
    pass


@dataclass
class Decomposition:
    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray


def _xcorr(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """``c[m] = sum_u a[u] * b[u + m]`` for ``m`` in ``-max_lag..max_lag``."""
    n = len(a)
    full = fftconvolve(b, a[::-1], mode="full")  # index n-1 is lag 0
    return full[n - 1 - max_lag:n + max_lag]


def _tail_matrix(r: np.ndarray, L: int) -> np.ndarray:
    """``M[p, k] = r[n + p - k]`` for ``p < k``: samples pushed past the end by delay ``k``."""
    n = len(r)
    p = np.arange(L)[:, None]
    k = np.arange(L)[None, :]
    idx = n + p - k
    mask = p < k
    return np.where(mask, r[np.clip(idx, 0, n - 1)], 0.0)


def delay_gram(references: np.ndarray, filter_len: int) -> np.ndarray:
    """Gram matrix of all truncated delays of all references, ``(J*L, J*L)``.

    Column ``j*L + k`` is reference ``j`` delayed by ``k`` samples.
    """
    refs = np.asarray(references, dtype=np.float64)
    J, n = refs.shape
    L = filter_len
    tails = [_tail_matrix(r, L) for r in refs]
    G = np.empty((J * L, J * L))
    lags = np.arange(L)
    diff = lags[None, :] - lags[:, None]  # l - k
    for i in range(J):
        for j in range(i, J):
            # untruncated overlap: sum_t r_i[t-k] r_j[t-l] = c_ij(k - l)
            c = _xcorr(refs[j], refs[i], L - 1)  # c[m] = sum_u r_j[u] r_i[u+m]
            block = c[(L - 1) + diff] - tails[i].T @ tails[j]
            G[i * L:(i + 1) * L, j * L:(j + 1) * L] = block
            G[j * L:(j + 1) * L, i * L:(i + 1) * L] = block.T
    return G


def delay_products(references: np.ndarray, signal: np.ndarray, filter_len: int) -> np.ndarray:
    """``<delay_k(r_j), signal>`` for every reference and delay, flattened ``j*L + k``."""
    refs = np.asarray(references, dtype=np.float64)
    out = np.empty(refs.shape[0] * filter_len)
    for j, r in enumerate(refs):
        c = _xcorr(r, signal, filter_len - 1)
        out[j * filter_len:(j + 1) * filter_len] = c[filter_len - 1:]
    return out


def _apply_filters(references: np.ndarray, coef: np.ndarray) -> np.ndarray:
    J, n = references.shape
    L = coef.size // J
    out = np.zeros(n)
    for j in range(J):
        out += fftconvolve(references[j], coef[j * L:(j + 1) * L])[:n]
    return out


def _solve(G: np.ndarray, b: np.ndarray, fallback: bool, filter_len: int) -> np.ndarray:
    scale = float(np.max(np.diag(G))) if G.size else 0.0
    try:
        if scale <= 0.0:
            raise np.linalg.LinAlgError("zero-energy reference")
        chol = scipy.linalg.cho_factor(G, check_finite=False)
        d = np.abs(np.diag(chol[0]))
        if d.min() ** 2 < 1e-11 * scale:
            raise np.linalg.LinAlgError("ill-conditioned")
        return scipy.linalg.cho_solve(chol, b, check_finite=False)
    except np.linalg.LinAlgError as exc:
        if fallback:
            return scipy.linalg.lstsq(G, b, cond=1e-11, check_finite=False)[0]
        raise SingularProjectionError(
            f"projection system is singular ({exc}); references may be linearly dependent "
            f"or silent. Try a smaller filter_len than {filter_len}."
        ) from None


def _decompose_1d(est, refs, target, L, fallback):
    G = delay_gram(refs, L)
    b = delay_products(refs, est, L)
    sl = slice(target * L, (target + 1) * L)
    a_t = _solve(G[sl, sl], b[sl], fallback, L)
    s_target = _apply_filters(refs[target:target + 1], a_t)
    if refs.shape[0] > 1:
        a_all = _solve(G, b, fallback, L)
        p_all = _apply_filters(refs, a_all)
    else:
        p_all = s_target
    e_interf = p_all - s_target
    return s_target, e_interf, est - p_all


def bss_decompose(
    estimate,
    references,
    target_index: int,
    filter_len: int = DEFAULT_FILTER_LEN,
    fallback_lstsq: bool = False,
) -> Decomposition:
    """Split ``estimate`` into target, interference and artifact components.

    Parameters
    ----------
    estimate : array, ``(n,)`` or ``(channels, n)``
    references : array, ``(J, n)`` or ``(J, channels, n)``
        True sources, one per row.
    target_index : int
        Row of ``references`` the estimate is meant to match.
    filter_len : int
        Number of delays ``0..filter_len-1`` allowed for each reference.
    fallback_lstsq : bool
        Use a minimum-norm least-squares solve when the system is singular
        instead of raising.

    Raises
    ------
    SingularProjectionError
        When the delayed references are linearly dependent (or silent).
    """
    est = np.asarray(estimate, dtype=np.float64)
    refs = np.asarray(references, dtype=np.float64)
    mono = est.ndim == 1
    if mono:
        est = est[None, :]
        refs = refs[:, None, :]
    if refs.ndim != 3 or refs.shape[1:] != est.shape:
        raise ValueError(f"references {refs.shape} do not match estimate {est.shape}")
    if not 0 <= target_index < refs.shape[0]:
        raise IndexError(f"target index {target_index} out of range for {refs.shape[0]} references")
    if filter_len < 1 or filter_len > est.shape[-1]:
        raise ValueError(f"filter_len must lie in [1, {est.shape[-1]}], got {filter_len}")
    parts = [
        _decompose_1d(est[c], refs[:, c], target_index, filter_len, fallback_lstsq)
        for c in range(est.shape[0])
    ]
    s, i, a = (np.stack(p) for p in zip(*parts))
    if mono:
        s, i, a = s[0], i[0], a[0]
    return Decomposition(s, i, a)


def _ratio_db(num: float, den: float) -> float:
    if den == 0.0:
        return math.inf if num > 0.0 else math.nan
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def _energy(x) -> float:
    return float(np.sum(np.square(x)))


def sdr(s_target, e_interf, e_artif) -> float:
    return _ratio_db(_energy(s_target), _energy(np.asarray(e_interf) + e_artif))


def sir(s_target, e_interf, e_artif=None) -> float:
    return _ratio_db(_energy(s_target), _energy(e_interf))


def sar(s_target, e_interf, e_artif) -> float:
    return _ratio_db(_energy(np.asarray(s_target) + e_interf), _energy(e_artif))


def median(values: Sequence[float]) -> float:
    """Median of the defined (non-NaN) values; even counts average the middle two."""
    v = sorted(x for x in values if not math.isnan(x))
    if not v:
        raise ValueError("no defined values to take a median of")
    mid = len(v) // 2
    if len(v) % 2:
        return v[mid]
    lo, hi = v[mid - 1], v[mid]
    if lo == hi:
        return lo
    return 0.5 * (lo + hi)


@dataclass
class FramewiseScores:
    source: str
    window: int
    hop: int
    sdr: list[float] = field(default_factory=list)
    sir: list[float] = field(default_factory=list)
    sar: list[float] = field(default_factory=list)

    @property
    def n_windows(self) -> int:
        return len(self.sdr)

    @property
    def defined(self) -> list[bool]:
        return [not math.isnan(v) for v in self.sdr]

    def median_sdr(self) -> float:
        return median(self.sdr)


def n_windows(length: int, window: int, hop: int) -> int:
    if length < window:
        raise ValueError(f"signal of {length} samples is shorter than one window ({window})")
    return (length - window) // hop + 1


def framewise_scores(
    estimate,
    references,
    target_index: int,
    source: str = "target",
    window: int = DEFAULT_WINDOW,
    hop: int = DEFAULT_HOP,
    filter_len: int = DEFAULT_FILTER_LEN,
) -> FramewiseScores:
    """Score ``estimate`` on consecutive windows.

    Windows where the target reference is silent are recorded as NaN
    (undefined) and left out of medians.
    """
    est = np.asarray(estimate, dtype=np.float64)
    refs = np.asarray(references, dtype=np.float64)
    n = est.shape[-1]
    scores = FramewiseScores(source, window, hop)
    for w in range(n_windows(n, window, hop)):
        sl = slice(w * hop, w * hop + window)
        e, r = est[..., sl], refs[..., sl]
        if not np.any(r[target_index]):
            scores.sdr.append(math.nan)
            scores.sir.append(math.nan)
            scores.sar.append(math.nan)
            continue
        d = bss_decompose(e, r, target_index, min(filter_len, window), fallback_lstsq=True)
        scores.sdr.append(sdr(d.s_target, d.e_interf, d.e_artif))
        scores.sir.append(sir(d.s_target, d.e_interf))
        scores.sar.append(sar(d.s_target, d.e_interf, d.e_artif))
    return scores


def framewise_median(estimate, references, target_index: int, **kwargs) -> tuple[FramewiseScores, float]:
    """Framewise scores plus their median SDR; raises if every window is undefined."""
    scores = framewise_scores(estimate, references, target_index, **kwargs)
    if not any(scores.defined):
        raise ValueError("every evaluation window has a silent target; SDR is undefined")
    return scores, scores.median_sdr()


# -- reports -----------------------------------------------------------------

def _enc(x: float):
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _dec(x) -> float:
    if x is None:
        return math.nan
    if isinstance(x, str):
        return {"inf": math.inf, "-inf": -math.inf}[x]
    return float(x)


@dataclass
class EvalReport:
    """Framewise scores per song and source, with medians and run metadata."""

    songs: dict[str, dict[str, FramewiseScores]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def sources(self) -> list[str]:
        names: set[str] = set()
        for per_source in self.songs.values():
            names.update(per_source)
        return sorted(names)

    def song_medians(self) -> dict[str, dict[str, float]]:
        out = {}
        for song, per_source in self.songs.items():
            out[song] = {}
            for src, sc in per_source.items():
                out[song][src] = sc.median_sdr() if any(sc.defined) else math.nan
        return out

    def dataset_medians(self) -> dict[str, float]:
        per_song = self.song_medians()
        out = {}
        for src in self.sources():
            values = [m[src] for m in per_song.values() if src in m]
            defined = [v for v in values if not math.isnan(v)]
            out[src] = median(defined) if defined else math.nan
        return out

    def to_json(self) -> str:
        songs = {}
        for song in sorted(self.songs):
            songs[song] = {
                src: {
                    "window": sc.window,
                    "hop": sc.hop,
                    "sdr": [_enc(v) for v in sc.sdr],
                    "sir": [_enc(v) for v in sc.sir],
                    "sar": [_enc(v) for v in sc.sar],
                }
                for src, sc in sorted(self.songs[song].items())
            }
        medians = self.song_medians()
        doc = {
            "version": REPORT_VERSION,
            "metadata": self.metadata,
            "songs": songs,
            "song_medians": {s: {k: _enc(v) for k, v in sorted(m.items())} for s, m in sorted(medians.items())},
            "dataset_medians": {k: _enc(v) for k, v in self.dataset_medians().items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {doc.get('version')} (expected {REPORT_VERSION})")
        songs = {}
        for song, per_source in doc["songs"].items():
            songs[song] = {
                src: FramewiseScores(
                    src,
                    int(s["window"]),
                    int(s["hop"]),
                    [_dec(v) for v in s["sdr"]],
                    [_dec(v) for v in s["sir"]],
                    [_dec(v) for v in s["sar"]],
                )
                for src, s in per_source.items()
            }
        return cls(songs, doc.get("metadata", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["song", "source", "window", "start_sample", "sdr", "sir", "sar"])
        for song in sorted(self.songs):
            for src, sc in sorted(self.songs[song].items()):
                for w in range(sc.n_windows):
                    writer.writerow(
                        [song, src, w, w * sc.hop] + [repr(float(v)) for v in (sc.sdr[w], sc.sir[w], sc.sar[w])]
                    )
        return buf.getvalue()

    def save(self, json_path, csv_path=None) -> None:
        from pathlib import Path

        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            Path(csv_path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "EvalReport":
        from pathlib import Path

        return cls.from_json(Path(path).read_text())

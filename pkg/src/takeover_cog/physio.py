"""Gaze and pupil anomaly extraction and its agreement with inferred parameters.

Anomalies are frame flags; flags are smoothed with a Hanning window and
merged into segments; cognitive and physiological segments are then
compared by temporal overlap.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .core import atomic_write_text

log = logging.getLogger(__name__)

FS_DEFAULT = 60.0  # Hz
GRID = 3
N_AOI = GRID * GRID
ENTROPY_WINDOW = 120  # frames, 2 s at 60 Hz
GAZE_HEADER = ("t", "x", "y", "pupil", "valid")
REPORT_HEADER = ("dimension", "parameter", "F", "p", "maxdiff")


class PhysioError(ValueError):
    pass


@dataclass(frozen=True)
class GazeSample:
    t: int
    x: float
    y: float
    pupil: float
    valid: bool = True


@dataclass(frozen=True)
class Segment:
    """Closed frame interval ``[start, end]``."""

    start: int
    end: int
    source: str = ""

    def __post_init__(self):
        if self.start > self.end:
            raise PhysioError(f"segment start {self.start} after end {self.end}")

    def overlaps(self, other: "Segment") -> bool:
        return self.start <= other.end and other.start <= self.end

    def shifted(self, offset: int) -> "Segment":
        return Segment(self.start + offset, self.end + offset, self.source)


@dataclass
class MatchReport:
    match_rate: float
    miss_rate: float
    matched: list = field(default_factory=list)
    unmatched_cog: list = field(default_factory=list)
    unmatched_phys: list = field(default_factory=list)
    match_defined: bool = True


# ---------------------------------------------------------------- AOI entropy

def _aoi_cells(samples, bounds) -> np.ndarray:
    """Cell index per sample, ``-1`` for invalid ones."""
    width, height = bounds
    out = np.full(len(samples), -1, dtype=int)
    for i, s in enumerate(samples):
        if not s.valid:
            continue
        col = min(max(int(math.floor(s.x * GRID / width)), 0), GRID - 1)
        row = min(max(int(math.floor(s.y * GRID / height)), 0), GRID - 1)
        out[i] = row * GRID + col
    return out


def aoi_sequence(samples, bounds, grid: int = GRID) -> np.ndarray:
    """Map valid samples to 3x3 grid cells (row-major, right-open bins)."""
    if grid != GRID:
        raise PhysioError("only the 3x3 grid is supported")
    cells = _aoi_cells(samples, bounds)
    return cells[cells >= 0]


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def spatial_entropy(aoi_seq) -> float:
    """Shannon entropy of AOI occupancy, normalised by log2(9)."""
    seq = np.asarray(aoi_seq, dtype=int)
    if len(seq) == 0:
        raise PhysioError("spatial entropy of an empty sequence")
    p = np.bincount(seq, minlength=N_AOI) / len(seq)
    return _entropy_bits(p) / math.log2(N_AOI)


def transition_entropy_from_matrix(P, occupancy) -> float:
    """Conditional entropy of a transition matrix under source occupancy."""
    P = np.asarray(P, dtype=float)
    occ = np.asarray(occupancy, dtype=float)
    h = sum(occ[i] * _entropy_bits(P[i]) for i in range(len(occ)) if occ[i] > 0)
    return h / math.log2(N_AOI)


def transition_entropy(aoi_seq) -> float:
    """First-order conditional entropy of AOI transitions, normalised by log2(9)."""
    seq = np.asarray(aoi_seq, dtype=int)
    if len(seq) < 2:
        raise PhysioError("transition entropy needs at least two samples")
    counts = np.zeros((N_AOI, N_AOI))
    np.add.at(counts, (seq[:-1], seq[1:]), 1.0)
    rows = counts.sum(axis=1)
    occ = rows / rows.sum()
    P = np.divide(counts, rows[:, None], out=np.zeros_like(counts), where=rows[:, None] > 0)
    return transition_entropy_from_matrix(P, occ)


def windowed_entropies(samples, bounds, window: int = ENTROPY_WINDOW) -> tuple:
    """Per-frame (H_s, H_t) over a centred window clipped to the session.

    Invalid samples are skipped inside each window; a window with no valid
    sample gives NaN, one with a single valid sample gives H_t = NaN.
    """
    cells = _aoi_cells(samples, bounds)
    n = len(cells)
    hs = np.full(n, np.nan)
    ht = np.full(n, np.nan)
    half = window // 2
    for t in range(n):
        seq = cells[max(0, t - half):min(n, t - half + window)]
        seq = seq[seq >= 0]
        if len(seq):
            hs[t] = spatial_entropy(seq)
        if len(seq) >= 2:
            ht[t] = transition_entropy(seq)
    return hs, ht


# ------------------------------------------------------------ frame anomalies

def _displacements(samples) -> np.ndarray:
    """Inter-frame gaze displacement (px); frame 0 and invalid pairs give NaN."""
    n = len(samples)
    d = np.full(n, np.nan)
    for t in range(1, n):
        a, b = samples[t - 1], samples[t]
        if a.valid and b.valid:
            d[t] = math.hypot(b.x - a.x, b.y - a.y)
    return d


def _runs(mask: np.ndarray) -> list:
    """(start, end) inclusive of each run of True."""
    out = []
    start = None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(mask) - 1))
    return out


def fixation_indicator(samples, d_thr: float = 10.0) -> np.ndarray:
    """I_fix[t] = d_t < d_thr; frame 0 has no displacement and copies frame 1."""
    d = _displacements(samples)
    fix = np.nan_to_num(d, nan=np.inf) < d_thr
    if len(fix) > 1:
        fix[0] = fix[1]
    elif len(fix) == 1:
        fix[0] = bool(samples[0].valid)
    return fix


def fixation_anomalies(samples, d_thr: float = 10.0, thr_fix: float = 0.1, W_f: int = 20,
                       f_s: float = FS_DEFAULT) -> np.ndarray:
    """Frames in too-short fixations, or where the windowed fixation ratio dips.

    A fixation frame has displacement strictly below ``d_thr``; runs shorter
    than ``thr_fix * f_s`` frames are flagged. The ratio rule flags frames whose
    trailing ``W_f``-frame fixation ratio is below mean minus one std.
    """
    fix = fixation_indicator(samples, d_thr)
    flags = np.zeros(len(fix), dtype=bool)
    min_len = thr_fix * f_s
    for a, b in _runs(fix):
        if b - a + 1 < min_len - 1e-9:
            flags[a:b + 1] = True
    if len(fix) < W_f:
        log.warning("fewer than W_f=%d frames; fixation-ratio rule skipped", W_f)
        return flags
    c = np.concatenate([[0.0], np.cumsum(fix, dtype=float)])
    idx = np.arange(len(fix))
    lo = np.maximum(0, idx - W_f + 1)
    ratio = (c[idx + 1] - c[lo]) / (idx + 1 - lo)
    mu, sd = ratio.mean(), ratio.std()
    flags |= ratio < mu - sd
    return flags


def dispersion_anomalies(hs, ht) -> np.ndarray:
    """Frames where either entropy is strictly below its P10 or above its P75."""
    hs = np.asarray(hs, dtype=float)
    ht = np.asarray(ht, dtype=float)
    flags = np.zeros(len(hs), dtype=bool)
    for h in (hs, ht):
        ok = np.isfinite(h)
        if not ok.any():
            continue
        p10, p75 = np.percentile(h[ok], [10, 75])
        flags |= ok & ((h < p10) | (h > p75))
    return flags


def saccade_anomalies(samples, f_s: float = FS_DEFAULT) -> np.ndarray:
    """Frames whose gaze speed exceeds the session's 90th percentile."""
    v = _displacements(samples) * f_s
    ok = np.isfinite(v)
    if not ok.any():
        return np.zeros(len(v), dtype=bool)
    p90 = np.percentile(v[ok], 90)
    return ok & (np.nan_to_num(v, nan=-np.inf) > p90)


def pupil_anomalies(pupil, z_thr: float = 1.5) -> np.ndarray:
    """Frames whose z-scored pupil rate of change exceeds ``z_thr`` in magnitude."""
    p = np.asarray(pupil, dtype=float)
    flags = np.zeros(len(p), dtype=bool)
    if len(p) < 2:
        return flags
    rate = np.diff(p)
    sd = rate.std()
    if sd == 0:
        log.warning("pupil rate has zero variance; no pupil anomalies")
        return flags
    z = (rate - rate.mean()) / sd
    flags[1:] = np.abs(z) > z_thr
    return flags


def cognitive_anomalies(series) -> np.ndarray:
    """Values strictly above the within-session 90th percentile (per column)."""
    a = np.asarray(series, dtype=float)
    p90 = np.percentile(a, 90, axis=0)
    return a > p90


def perception_anomalies(hs, ht, samples, **fix_kw) -> np.ndarray:
    return dispersion_anomalies(hs, ht) | fixation_anomalies(samples, **fix_kw)


def looming_anomalies(samples, f_s: float = FS_DEFAULT, z_thr: float = 1.5) -> np.ndarray:
    pupil = [s.pupil for s in samples]
    return saccade_anomalies(samples, f_s) | pupil_anomalies(pupil, z_thr)


# ------------------------------------------------------- smoothing & segments

def hanning(N: int = 20, normalize: bool = True) -> np.ndarray:
    """``0.5 (1 - cos(2 pi n / (N-1)))``, optionally scaled to unit sum."""
    if N < 3:
        raise PhysioError("window length must be at least 3")
    n = np.arange(N)
    w = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (N - 1)))
    return w / w.sum() if normalize else w


def smooth_flags(flags, N: int = 20, normalize: bool = True) -> np.ndarray:
    """Centred convolution with the Hanning window, same length as ``flags``."""
    x = np.asarray(flags, dtype=float)
    full = np.convolve(x, hanning(N, normalize), mode="full")
    start = (N - 1) // 2
    return full[start:start + len(x)]


def smooth_and_segment(flags, N: int = 20, amplitude: float = 0.5, normalize: bool = True,
                       source: str = "") -> list:
    """Hanning-smooth binary flags and return runs above ``amplitude``."""
    flags = np.asarray(flags)
    if len(flags) == 0:
        return []
    sm = smooth_flags(flags, N, normalize)
    return [Segment(a, b, source) for a, b in _runs(sm > amplitude)]


def match_segments(cog, phys) -> MatchReport:
    """Any-overlap matching of cognitive against physiological segments."""
    cog, phys = list(cog), list(phys)
    matched = [c for c in cog if any(c.overlaps(p) for p in phys)]
    unmatched_cog = [c for c in cog if c not in matched]
    unmatched_phys = [p for p in phys if not any(p.overlaps(c) for c in cog)]
    if cog:
        match_rate, defined = len(matched) / len(cog), True
    else:
        match_rate, defined = 0.0, False
    miss_rate = len(unmatched_phys) / len(phys) if phys else 0.0
    return MatchReport(match_rate, miss_rate, matched, unmatched_cog, unmatched_phys, defined)


# ---------------------------------------------------------------- statistics

def anova_oneway(groups) -> tuple:
    """(F, p) of a one-way ANOVA; each group needs at least two values."""
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise PhysioError("ANOVA needs at least two groups of at least two values")
    res = stats.f_oneway(*groups)
    return float(res.statistic), float(res.pvalue)


def maxdiff_equivalence(means, delta: float = 0.10) -> tuple:
    """(max - min of group means, whether it is strictly below ``delta``)."""
    m = np.asarray(means, dtype=float)
    md = float(m.max() - m.min()) if len(m) else 0.0
    return md, md < delta


def grouped_report(rows) -> list:
    """Rows of (dimension, level, parameter, value) -> (dimension, parameter, F, p, maxdiff)."""
    table: dict = {}
    for dim, level, param, value in rows:
        table.setdefault((dim, param), {}).setdefault(level, []).append(float(value))
    out = []
    for (dim, param), levels in table.items():
        groups = [levels[k] for k in levels]
        F, p = anova_oneway(groups)
        md, _ = maxdiff_equivalence([np.mean(g) for g in groups])
        out.append((dim, param, F, p, md))
    return out


# ------------------------------------------------------------------------ I/O

def read_gaze(path) -> list:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != GAZE_HEADER:
            raise PhysioError(f"{path}: expected header {','.join(GAZE_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, x, y, pupil, valid = row
                flag = valid.strip().lower()
                if flag not in ("0", "1", "true", "false"):
                    raise ValueError(f"bad valid flag {valid!r}")
                out.append(GazeSample(int(t), float(x), float(y), float(pupil),
                                      flag in ("1", "true")))
            except ValueError as exc:
                raise PhysioError(f"{path}:{lineno}: {exc}") from None
    return out


def gaze_csv_text(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GAZE_HEADER)
    for s in samples:
        w.writerow([s.t, repr(float(s.x)), repr(float(s.y)), repr(float(s.pupil)), int(s.valid)])
    return buf.getvalue()


def write_gaze(samples, path) -> None:
    atomic_write_text(path, gaze_csv_text(samples))


def segments_csv_text(segments) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("source", "start", "end"))
    for s in segments:
        w.writerow((s.source, s.start, s.end))
    return buf.getvalue()


def report_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for dim, param, F, p, md in rows:
        w.writerow((dim, param, repr(float(F)), repr(float(p)), repr(float(md))))
    return buf.getvalue()

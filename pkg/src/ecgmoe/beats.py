"""R-peak detection (Pan-Tompkins), heartbeat segmentation and RR statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from .errors import InsufficientPeaks, NoPeaksFound, ShapeMismatch, TooShortSignal
from .signal import EcgRecord

REFRACTORY_S = 0.200
DEFAULT_BEAT_LENGTH = 128


@dataclass(frozen=True, eq=False)
class BeatSet:
    r_peaks: np.ndarray
    beats: np.ndarray
    rr_ms: np.ndarray
    source_lead: int
    sample_rate_hz: float

    def __post_init__(self):
        r = np.asarray(self.r_peaks, dtype=np.int64)
        if r.ndim != 1 or len(r) < 2:
            raise InsufficientPeaks(f"a BeatSet needs at least 2 peaks, got {len(r)}")
        gaps = np.diff(r)
        min_gap = REFRACTORY_S * self.sample_rate_hz
        if np.any(gaps <= 0):
            raise ValueError("r_peaks must be strictly increasing")
        if np.any(gaps < min_gap - 1e-9):
            raise ValueError(f"peaks closer than the {REFRACTORY_S * 1000:.0f} ms refractory gap")
        if self.beats.shape[0] != len(r):
            raise ShapeMismatch(f"beats has {self.beats.shape[0]} rows for {len(r)} peaks")
        if len(self.rr_ms) != len(r) - 1 or np.any(self.rr_ms <= 0):
            raise ValueError("rr_ms must hold B-1 positive intervals")
        object.__setattr__(self, "r_peaks", r)

    @property
    def n_beats(self):
        return len(self.r_peaks)

    @property
    def beat_length(self):
        return self.beats.shape[1]


def _odd(n):
    n = max(1, int(round(n)))
    return n if n % 2 else n + 1


def bandpass(x, fs):
    """5-15 Hz band-pass built from centred moving averages (zero phase).

    High-pass: subtract a moving average whose -3 dB point is ~5 Hz.
    Low-pass: two cascaded moving averages with combined -3 dB near 15 Hz.
    """
    hp = x - uniform_filter1d(x, _odd(0.443 * fs / 5.0), mode="nearest")
    n_lp = _odd(0.32 * fs / 15.0)
    return uniform_filter1d(uniform_filter1d(hp, n_lp, mode="nearest"), n_lp, mode="nearest")


def five_point_derivative(x, fs):
    padded = np.pad(x, 2, mode="edge")
    return fs / 8.0 * (2 * padded[4:] + padded[3:-1] - padded[1:-3] - 2 * padded[:-4])


def pan_tompkins_stages(x, fs):
    """Return (bandpassed, derivative, integrated) signals."""
    bp = bandpass(np.asarray(x, dtype=np.float64), fs)
    d = five_point_derivative(bp, fs)
    mwi = uniform_filter1d(d * d, _odd(0.150 * fs), mode="constant")
    return bp, d, mwi


def _classify_peaks(candidates, mwi, slope, fs):
    """Dual adaptive thresholds with searchback and T-wave rejection."""
    n_learn = int(min(len(mwi), 2 * fs))
    spki = 0.25 * float(mwi[:n_learn].max())
    npki = 0.5 * float(mwi[:n_learn].mean())
    th1 = npki + 0.25 * (spki - npki)
    refractory = int(round(REFRACTORY_S * fs))
    t_wave_window = int(round(0.360 * fs))

    qrs = []
    rr_hist = []
    noise_peaks = []

    def rr_avg():
        return float(np.mean(rr_hist[-8:])) if rr_hist else None

    def accept(p, searchback=False):
        nonlocal spki
        if qrs:
            rr_hist.append(p - qrs[-1])
        qrs.append(p)
        w = 0.25 if searchback else 0.125
        spki = w * mwi[p] + (1 - w) * spki

    def search_back(limit):
        """Promote the tallest skipped peak above the lower threshold."""
        th2 = 0.5 * th1
        window = [p for p in noise_peaks if qrs[-1] + refractory <= p < limit and mwi[p] > th2]
        if not window:
            return False
        best = max(window, key=lambda p: mwi[p])
        noise_peaks.remove(best)
        accept(best, searchback=True)
        return True

    for p in candidates:
        avg = rr_avg()
        while qrs and avg is not None and p - qrs[-1] > 1.66 * avg and search_back(p):
            avg = rr_avg()
        pk = mwi[p]
        if pk > th1:
            if qrs and p - qrs[-1] < refractory:
                noise_peaks.append(p)
                continue
            if qrs and p - qrs[-1] < t_wave_window and slope[p] < 0.5 * slope[qrs[-1]]:
                npki = 0.125 * pk + 0.875 * npki
                noise_peaks.append(p)
            else:
                accept(p)
        else:
            npki = 0.125 * pk + 0.875 * npki
            noise_peaks.append(p)
        th1 = npki + 0.25 * (spki - npki)

    avg = rr_avg()
    while qrs and avg is not None and len(mwi) - qrs[-1] > 1.66 * avg and search_back(len(mwi)):
        avg = rr_avg()
    return sorted(qrs)


def detect_r_peaks(record: EcgRecord, lead: int = 0) -> np.ndarray:
    """Sample indices of R peaks on one lead.

    Peaks are located on the integrated Pan-Tompkins signal, then moved to
    the band-passed maximum within +-75 ms, which assumes positive R polarity
    on the detection lead.
    """
    if not 0 <= lead < record.n_leads:
        raise ValueError(f"lead {lead} out of range for a {record.n_leads}-lead record")
    fs = record.sample_rate_hz
    if record.duration_s < 2.0:
        raise TooShortSignal(f"need >= 2 s of signal, got {record.duration_s:.3f} s")
    bp, d, mwi = pan_tompkins_stages(record.leads[lead], fs)
    refractory = int(round(REFRACTORY_S * fs))

    candidates, _ = find_peaks(mwi, distance=refractory)
    candidates = [int(p) for p in candidates if mwi[p] > 0]
    if not candidates:
        raise NoPeaksFound("integrated signal has no local maxima")

    half = _odd(0.150 * fs) // 2
    absd = np.abs(d)
    # slope near each sample: max |derivative| over the integration window preceding it
    slope = _window_max(absd, half)
    qrs = _classify_peaks(candidates, mwi, slope, fs)
    if not qrs:
        raise NoPeaksFound("no candidate crossed the detection thresholds, even after searchback")

    search = int(round(0.075 * fs))
    refined = []
    for p in qrs:
        lo, hi = max(0, p - search), min(len(bp), p + search + 1)
        refined.append(lo + int(np.argmax(bp[lo:hi])))

    out = []
    for p in sorted(refined):
        if out and p - out[-1] < refractory:
            if bp[p] > bp[out[-1]]:
                out[-1] = p
            continue
        out.append(p)
    return np.asarray(out, dtype=np.int64)


def _window_max(x, half):
    """max(x[i-half : i+1]) for every i."""
    padded = np.concatenate([np.full(half, x[0]), x])
    return np.lib.stride_tricks.sliding_window_view(padded, half + 1).max(axis=1)


def resample_linear(window, length):
    """Resample a 1-D window to ``length`` samples by linear interpolation."""
    window = np.asarray(window, dtype=np.float64)
    n = len(window)
    if n == length:
        return window.copy()
    if n == 1:
        return np.full(length, window[0])
    pos = np.linspace(0.0, n - 1, length)
    return np.interp(pos, np.arange(n), window)


def beat_windows(r_peaks, n_samples):
    """[start, end) bounds of each beat, midpoint to midpoint."""
    r = np.asarray(r_peaks, dtype=np.int64)
    mids = (r[:-1] + r[1:] + 1) // 2
    starts = np.concatenate([[0], mids])
    ends = np.concatenate([mids, [n_samples]])
    starts[0] = max(0, r[0] - (ends[0] - r[0]))
    ends[-1] = min(n_samples, r[-1] + (r[-1] - starts[-1]))
    return starts, ends


def segment_beats(record: EcgRecord, r_peaks, length: int = DEFAULT_BEAT_LENGTH, lead: int = 0) -> BeatSet:
    r = np.asarray(r_peaks, dtype=np.int64)
    if len(r) < 2:
        raise InsufficientPeaks(f"segmentation needs at least 2 peaks, got {len(r)}")
    x = record.leads[lead]
    starts, ends = beat_windows(r, len(x))
    beats = np.stack([resample_linear(x[s:e], length) for s, e in zip(starts, ends)])
    rr_ms = np.diff(r) * 1000.0 / record.sample_rate_hz
    return BeatSet(r, beats, rr_ms, lead, record.sample_rate_hz)


def process_beats(record: EcgRecord, lead: int = 0, length: int = DEFAULT_BEAT_LENGTH) -> BeatSet:
    return segment_beats(record, detect_r_peaks(record, lead), length, lead)


def global_stats(record: EcgRecord, beat_set: BeatSet) -> np.ndarray:
    """Layout: [mean_0, std_0, ..., mean_{C-1}, std_{C-1}, rr_mean, rr_std, rr_min, rr_max].

    Lead statistics use the population std; RR values are in ms.
    """
    x = record.leads
    lead_part = np.stack([x.mean(axis=1), x.std(axis=1)], axis=1).ravel()
    rr = beat_set.rr_ms
    return np.concatenate([lead_part, [rr.mean(), rr.std(), rr.min(), rr.max()]])


def global_stats_dim(n_leads: int) -> int:
    return 2 * n_leads + 4

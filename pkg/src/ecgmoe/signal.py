"""ECG record types, the ECGMOE01 file format and a seeded synthetic generator.

Records hold samples as float64 in memory. Files store float32, so a record
round-trips bit-exactly when its samples are float32-representable, which is
always true for generator output.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidHyper, ZeroVarianceLead

RECORD_MAGIC = b"ECGMOE01".ljust(16, b"\x00")
LABEL_ORDER = ("rr_interval_ms", "age_years", "sex", "potassium_abnormal", "arrhythmia_class")

TEMPLATE_TABLE_VERSION = 1

# Wave order: P, Q, R, S, T.
# Base morphology: offset from the R peak and Gaussian width, both as fractions of
# the beat time scale 1000*sqrt(RR seconds) ms; amplitude in mV.
BASE_OFFSETS = (-0.19, -0.042, 0.0, 0.042, 0.28)
BASE_WIDTHS = (0.04, 0.016, 0.016, 0.016, 0.064)
BASE_AMPLITUDES = (0.15, -0.12, 1.0, -0.25, 0.30)


@dataclass(frozen=True)
class MorphologyTemplate:
    name: str
    amp: tuple  # multipliers for P, Q, R, S, T
    width: tuple  # multipliers for P, QRS, T
    shift: tuple  # offset multipliers for P and T
    peaked_t: bool = False


_N = (1.0, 1.0, 1.0, 1.0, 1.0)
_W = (1.0, 1.0, 1.0)
_S = (1.0, 1.0)

# Versioned scaffolding table; not a clinical taxonomy.
MORPHOLOGY_TEMPLATES = (
    MorphologyTemplate("normal", _N, _W, _S),
    MorphologyTemplate("first_degree_av_block", _N, _W, (1.6, 1.0)),
    MorphologyTemplate("lbbb_like", (1.0, 1.0, 0.9, 0.5, -0.8), (1.0, 1.8, 1.0), _S),
    MorphologyTemplate("rbbb_like", (1.0, 1.0, 1.0, 2.0, 1.0), (1.0, 1.5, 1.0), _S),
    MorphologyTemplate("low_voltage", (0.5, 0.5, 0.5, 0.5, 0.5), _W, _S),
    MorphologyTemplate("peaked_t", (0.6, 1.0, 1.0, 1.0, 2.5), (1.0, 1.0, 0.6), _S, peaked_t=True),
    MorphologyTemplate("t_inversion", (1.0, 1.0, 1.0, 1.0, -1.0), _W, _S),
    MorphologyTemplate("absent_p", (0.0, 1.0, 1.0, 1.0, 1.0), _W, _S),
    MorphologyTemplate("lvh_like", (1.0, 1.0, 1.8, 2.0, 1.0), _W, _S),
    MorphologyTemplate("long_qt", _N, (1.0, 1.0, 1.2), (1.0, 1.4)),
    MorphologyTemplate("pathological_q", (1.0, 3.5, 0.8, 1.0, 1.0), _W, _S),
    MorphologyTemplate("wide_qrs_peaked_t", (0.3, 1.0, 1.0, 1.0, 2.2), (1.0, 1.6, 0.7), _S, peaked_t=True),
    MorphologyTemplate("flat_t", (1.0, 1.0, 1.0, 1.0, 0.25), (1.0, 1.0, 1.5), _S),
    MorphologyTemplate("p_pulmonale", (2.2, 1.0, 1.0, 1.0, 1.0), (0.8, 1.0, 1.0), _S),
    MorphologyTemplate("short_pr", _N, _W, (0.6, 1.0)),
)
assert len(MORPHOLOGY_TEMPLATES) == 15


@dataclass(frozen=True)
class TaskLabels:
    rr_interval_ms: Optional[float] = None
    age_years: Optional[float] = None
    sex: Optional[int] = None
    potassium_abnormal: Optional[int] = None
    arrhythmia_class: Optional[int] = None

    def __post_init__(self):
        rr, age = self.rr_interval_ms, self.age_years
        if rr is not None and not (math.isfinite(rr) and rr >= 0):
            raise ValueError(f"rr_interval_ms must be finite and >= 0, got {rr}")
        if age is not None and not 0 <= age <= 120:
            raise ValueError(f"age_years must lie in [0, 120], got {age}")
        for name in ("sex", "potassium_abnormal"):
            v = getattr(self, name)
            if v is not None and v not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {v}")
        ad = self.arrhythmia_class
        if ad is not None and not (int(ad) == ad and 0 <= ad <= 14):
            raise ValueError(f"arrhythmia_class must be an integer in [0, 14], got {ad}")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class EcgRecord:
    record_id: str
    leads: np.ndarray
    sample_rate_hz: float
    labels: TaskLabels = field(default_factory=TaskLabels)

    def __post_init__(self):
        leads = np.array(self.leads, dtype=np.float64)
        if leads.ndim == 1:
            leads = leads[None, :]
        if leads.ndim != 2 or leads.shape[0] < 1:
            raise ValueError(f"leads must be a [C x T] matrix with C >= 1, got shape {leads.shape}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if leads.shape[1] < 2 * self.sample_rate_hz:
            raise ValueError(
                f"record needs at least 2 s of signal: T={leads.shape[1]} < 2*fs={2 * self.sample_rate_hz}"
            )
        if not np.all(np.isfinite(leads)):
            raise ValueError("leads contain NaN or Inf")
        leads.setflags(write=False)
        object.__setattr__(self, "leads", leads)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def n_leads(self):
        return self.leads.shape[0]

    @property
    def n_samples(self):
        return self.leads.shape[1]

    @property
    def duration_s(self):
        return self.n_samples / self.sample_rate_hz

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.sample_rate_hz == other.sample_rate_hz
            and self.labels == other.labels
            and self.leads.shape == other.leads.shape
            and np.array_equal(self.leads, other.leads)
        )

    __hash__ = None


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int
    heart_rate_bpm: float = 60.0
    hr_jitter_pct: float = 0.0
    noise_std_mv: float = 0.0
    leads: int = 1
    duration_s: float = 10.0
    sample_rate_hz: float = 500.0
    morphology_class: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise InvalidHyper(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 30 <= self.heart_rate_bpm <= 220:
            raise InvalidHyper(f"heart_rate_bpm must lie in [30, 220], got {self.heart_rate_bpm}")
        if not 0 <= self.hr_jitter_pct <= 0.3:
            raise InvalidHyper(f"hr_jitter_pct must lie in [0, 0.3], got {self.hr_jitter_pct}")
        if not self.noise_std_mv >= 0:
            raise InvalidHyper(f"noise_std_mv must be >= 0, got {self.noise_std_mv}")
        if self.leads < 1:
            raise InvalidHyper(f"leads must be >= 1, got {self.leads}")
        if not self.sample_rate_hz > 0:
            raise InvalidHyper(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not self.duration_s >= 2.0:
            raise InvalidHyper(f"duration_s must be >= 2 s, got {self.duration_s}")
        if not 0 <= self.morphology_class <= 14:
            raise InvalidHyper(f"morphology_class must lie in [0, 14], got {self.morphology_class}")


@dataclass(frozen=True)
class SyntheticTruth:
    r_peak_times_s: np.ndarray
    r_peak_samples: np.ndarray
    rr_ms: np.ndarray
    t_amplitude_scale: float


def lead_gain(c):
    return math.cos(0.45 * c)


def generate_with_truth(cfg: SyntheticConfig):
    """Generate a record plus the generator's own R-peak positions."""
    rng = np.random.default_rng(cfg.seed)
    fs = cfg.sample_rate_hz
    n_samples = int(round(cfg.duration_s * fs))
    duration = n_samples / fs
    tmpl = MORPHOLOGY_TEMPLATES[cfg.morphology_class]

    rr0_ms = 60000.0 / cfg.heart_rate_bpm
    max_beats = int(math.ceil(duration * cfg.heart_rate_bpm / 60.0 / (1 - cfg.hr_jitter_pct))) + 2
    u = rng.uniform(-1.0, 1.0, size=max_beats)
    gaps_ms = rr0_ms * (1.0 + cfg.hr_jitter_pct * u)
    t_amp_scale = float(np.exp(rng.normal(0.0, 0.2)))
    age_noise = float(rng.normal(0.0, 4.0))
    noise = rng.normal(0.0, 1.0, size=(cfg.leads, n_samples))

    times = 0.5 * rr0_ms / 1000.0 + np.concatenate([[0.0], np.cumsum(gaps_ms / 1000.0)])
    n_peaks = int(np.searchsorted(times, duration, side="left"))
    times = times[:n_peaks]
    rr_ms = gaps_ms[: max(n_peaks - 1, 0)]

    amps = np.array(BASE_AMPLITUDES) * np.array(tmpl.amp)
    amps[4] *= t_amp_scale
    wmul = (tmpl.width[0], tmpl.width[1], tmpl.width[1], tmpl.width[1], tmpl.width[2])
    widths = np.array(BASE_WIDTHS) * np.array(wmul)
    offsets = np.array(BASE_OFFSETS) * np.array((tmpl.shift[0], 1.0, 1.0, 1.0, tmpl.shift[1]))

    t = np.arange(n_samples) / fs
    base = np.zeros(n_samples)
    # each beat's time scale comes from the gap to the beat that follows it
    beat_rr_s = gaps_ms[:n_peaks] / 1000.0
    for tr, rr_s in zip(times, beat_rr_s):
        scale = math.sqrt(rr_s)
        centers = tr + offsets * scale
        sig = widths * scale
        base += np.sum(amps[:, None] * np.exp(-0.5 * ((t[None, :] - centers[:, None]) / sig[:, None]) ** 2), axis=0)

    gains = np.array([lead_gain(c) for c in range(cfg.leads)])
    leads = gains[:, None] * base[None, :] + cfg.noise_std_mv * noise
    leads = leads.astype(np.float32).astype(np.float64)

    if len(rr_ms):
        # shifted mean: exact when every gap is identical (jitter = 0)
        rr_label = float(rr_ms[0] + math.fsum(rr_ms - rr_ms[0]) / len(rr_ms))
    else:
        rr_label = None
    age = float(np.clip(25.0 + 0.3 * (cfg.heart_rate_bpm - 40.0) + age_noise, 0.0, 120.0))
    labels = TaskLabels(
        rr_interval_ms=rr_label,
        age_years=age,
        sex=int(t_amp_scale > 1.0),
        potassium_abnormal=int(tmpl.peaked_t),
        arrhythmia_class=cfg.morphology_class,
    )
    record = EcgRecord(f"syn{cfg.seed}", leads, fs, labels)
    truth = SyntheticTruth(
        r_peak_times_s=times,
        r_peak_samples=np.round(times * fs).astype(np.int64),
        rr_ms=rr_ms.copy(),
        t_amplitude_scale=t_amp_scale,
    )
    return record, truth


def generate_synthetic_ecg(cfg: SyntheticConfig) -> EcgRecord:
    return generate_with_truth(cfg)[0]


def znormalize(record: EcgRecord) -> EcgRecord:
    """Per-lead z-score."""
    x = record.leads
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    std = np.sqrt(np.mean(centered**2, axis=1, keepdims=True))
    bad = np.flatnonzero(std[:, 0] == 0)
    if len(bad):
        raise ZeroVarianceLead(f"lead {int(bad[0])} is constant; cannot z-normalize")
    z = centered / std
    # second pass removes the residual rounding bias of the first
    z = z - z.mean(axis=1, keepdims=True)
    z = z / np.sqrt(np.mean(z**2, axis=1, keepdims=True))
    return EcgRecord(record.record_id, z, record.sample_rate_hz, record.labels)


# ---- ECGMOE01 file format -------------------------------------------------

_HEADER = struct.Struct("<IIdB")


def encode_record(record: EcgRecord) -> bytes:
    values = [getattr(record.labels, name) for name in LABEL_ORDER]
    mask = 0
    present = []
    for bit, v in enumerate(values):
        if v is not None:
            mask |= 1 << bit
            present.append(float(v))
    c, t = record.leads.shape
    parts = [
        RECORD_MAGIC,
        _HEADER.pack(c, t, record.sample_rate_hz, mask),
        struct.pack(f"<{len(present)}d", *present),
        record.leads.astype("<f4").tobytes(order="C"),
    ]
    return b"".join(parts)


def decode_record(data: bytes, record_id: str) -> EcgRecord:
    if len(data) < len(RECORD_MAGIC) or data[: len(RECORD_MAGIC)] != RECORD_MAGIC:
        raise FormatError(f"bad magic: expected {RECORD_MAGIC[:8]!r}", offset=0)
    pos = len(RECORD_MAGIC)
    if len(data) < pos + _HEADER.size:
        raise FormatError(
            f"truncated header: expected {_HEADER.size} bytes, found {len(data) - pos}", offset=pos
        )
    c, t, fs, mask = _HEADER.unpack_from(data, pos)
    pos += _HEADER.size
    if mask >> len(LABEL_ORDER):
        raise FormatError(f"label bitmask {mask:#04x} has undefined bits set", offset=pos - 1)
    n_labels = bin(mask).count("1")
    if len(data) < pos + 8 * n_labels:
        raise FormatError(
            f"truncated labels: expected {8 * n_labels} bytes, found {len(data) - pos}", offset=pos
        )
    label_values = struct.unpack_from(f"<{n_labels}d", data, pos)
    pos += 8 * n_labels
    expected = 4 * c * t
    actual = len(data) - pos
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise FormatError(
            f"{kind} sample section: expected {expected} bytes for {c}x{t} samples, found {actual}",
            offset=pos,
        )
    leads = np.frombuffer(data, dtype="<f4", count=c * t, offset=pos).reshape(c, t).astype(np.float64)

    kwargs = {}
    it = iter(label_values)
    for bit, name in enumerate(LABEL_ORDER):
        if mask & (1 << bit):
            v = next(it)
            kwargs[name] = v if name in ("rr_interval_ms", "age_years") else int(v)
    try:
        return EcgRecord(record_id, leads, fs, TaskLabels(**kwargs))
    except ValueError as exc:
        raise FormatError(f"invalid record contents: {exc}", offset=len(RECORD_MAGIC)) from exc


def save_record(record: EcgRecord, path) -> None:
    Path(path).write_bytes(encode_record(record))


def load_record(path) -> EcgRecord:
    """Load a record; its id is the file stem."""
    path = Path(path)
    return decode_record(path.read_bytes(), path.stem)


def export_csv(record: EcgRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"lead_{c}" for c in range(record.n_leads)])
        for row in record.leads.T:
            writer.writerow([repr(float(v)) for v in row])

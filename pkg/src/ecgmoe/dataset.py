"""Seeded synthetic datasets and their train/val/test split."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidHyper
from .signal import MORPHOLOGY_TEMPLATES, SyntheticConfig, generate_synthetic_ecg


@dataclass(frozen=True)
class DataConfig:
    n_records: int = 200
    seed: int = 0
    heart_rate_bpm: tuple = (40.0, 180.0)
    hr_jitter_pct: tuple = (0.0, 0.1)
    noise_std_mv: tuple = (0.0, 0.05)
    leads: int = 1
    duration_s: float = 8.0
    sample_rate_hz: float = 250.0
    morphology_classes: tuple = tuple(range(len(MORPHOLOGY_TEMPLATES)))
    split: tuple = (0.7, 0.15, 0.15)

    def __post_init__(self):
        for name in ("heart_rate_bpm", "hr_jitter_pct", "noise_std_mv", "split", "morphology_classes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_records < 1:
            raise InvalidHyper(f"n_records must be >= 1, got {self.n_records}")
        for name in ("heart_rate_bpm", "hr_jitter_pct", "noise_std_mv"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidHyper(f"{name} range is reversed: ({lo}, {hi})")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise InvalidHyper(f"split fractions must be three non-negative values summing to 1, got {self.split}")
        if not self.morphology_classes:
            raise InvalidHyper("morphology_classes must not be empty")

    def record_configs(self):
        """One SyntheticConfig per record, drawn from the configured ranges."""
        rng = np.random.default_rng(self.seed)
        seeds = rng.integers(0, 2**63 - 1, size=self.n_records)
        hr = rng.uniform(*self.heart_rate_bpm, size=self.n_records)
        jit = rng.uniform(*self.hr_jitter_pct, size=self.n_records)
        noise = rng.uniform(*self.noise_std_mv, size=self.n_records)
        cls = rng.choice(np.array(self.morphology_classes), size=self.n_records)
        return [
            SyntheticConfig(
                seed=int(seeds[i]), heart_rate_bpm=float(hr[i]), hr_jitter_pct=float(jit[i]),
                noise_std_mv=float(noise[i]), leads=self.leads, duration_s=self.duration_s,
                sample_rate_hz=self.sample_rate_hz, morphology_class=int(cls[i]),
            )
            for i in range(self.n_records)
        ]


def build_dataset(cfg: DataConfig):
    return [generate_synthetic_ecg(c) for c in cfg.record_configs()]


def split_indices(n, fractions, seed):
    """Shuffled (train, val, test) index arrays; sizes follow the fractions, rounding down then filling train."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split_dataset(items, cfg: DataConfig):
    tr, va, te = split_indices(len(items), cfg.split, cfg.seed + 1)
    return [items[i] for i in tr], [items[i] for i in va], [items[i] for i in te]

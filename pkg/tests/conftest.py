import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ecgmoe.model import EcgMoE, ModelConfig
from ecgmoe.multimodel import default_extractor_specs
from ecgmoe.signal import SyntheticConfig, generate_synthetic_ecg

settings.register_profile("ci", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def tiny_config(**overrides):
    """A model small enough for finite-difference checks over every parameter."""
    specs = default_extractor_specs(output_dim=8)
    base = dict(
        extractors=specs, beat_length=32, d_e=8, d_p=8, expert_channels=3,
        attention_heads=2, d_t=4, d_h=8, lora_rank=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def short_record(seed=0, hr=72.0, fs=128.0, duration=4.0, noise=0.02, jitter=0.05, morph=0):
    return generate_synthetic_ecg(
        SyntheticConfig(seed=seed, heart_rate_bpm=hr, hr_jitter_pct=jitter, noise_std_mv=noise,
                        duration_s=duration, sample_rate_hz=fs, morphology_class=morph)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return EcgMoE(tiny_config())

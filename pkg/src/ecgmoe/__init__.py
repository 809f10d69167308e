"""Multi-task ECG model: multi-extractor features, period-aware experts, gated fusion."""

from .model import EcgMoE, ModelConfig
from .signal import EcgRecord, SyntheticConfig, TaskLabels, generate_synthetic_ecg, load_record, save_record
from .tasks import TASK_NAMES, TASKS

__version__ = "0.1.0"

__all__ = [
    "EcgMoE", "ModelConfig", "EcgRecord", "SyntheticConfig", "TaskLabels", "generate_synthetic_ecg",
    "load_record", "save_record", "TASK_NAMES", "TASKS",
]

"""Fixed registry of the five downstream tasks."""

from dataclasses import dataclass

from .errors import UnknownTask


@dataclass(frozen=True)
class Task:
    name: str
    kind: str  # "regression" | "binary" | "multiclass"
    out_dim: int
    metric: str
    label_field: str


TASKS = (
    Task("rr", "regression", 1, "mae", "rr_interval_ms"),
    Task("age", "regression", 1, "mae", "age_years"),
    Task("sex", "binary", 1, "f1", "sex"),
    Task("ka", "binary", 1, "f1", "potassium_abnormal"),
    Task("ad", "multiclass", 15, "acc", "arrhythmia_class"),
)
TASK_NAMES = tuple(t.name for t in TASKS)
N_TASKS = len(TASKS)
N_ARRHYTHMIA_CLASSES = 15


def task_id(name_or_id):
    if isinstance(name_or_id, str):
        try:
            return TASK_NAMES.index(name_or_id)
        except ValueError:
            raise UnknownTask(f"unknown task {name_or_id!r}; expected one of {TASK_NAMES}") from None
    tid = int(name_or_id)
    if not 0 <= tid < N_TASKS:
        raise UnknownTask(f"task id {tid} out of range [0, {N_TASKS})")
    return tid


def get_task(name_or_id):
    return TASKS[task_id(name_or_id)]

"""The assembled multi-task model built from both feature branches and the task heads."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .beats import DEFAULT_BEAT_LENGTH, detect_r_peaks, global_stats, global_stats_dim, segment_beats
from .errors import InvalidHyper, ShapeMismatch
from .fusion import HierarchicalFusion, TaskHeads
from .multimodel import ExtractorSpec, MultiModelBranch, default_extractor_specs
from .nn.core import Module, Parameter, adaptive_avg_pool_matrix
from .periodic import ATTENTION_MODES, GATING_MODES, PeriodicMoE
from .signal import EcgRecord, znormalize
from .tasks import TASKS, task_id as resolve_task


@dataclass(frozen=True)
class ModelConfig:
    n_leads: int = 1
    extractors: tuple = field(default_factory=lambda: tuple(default_extractor_specs()))
    beat_length: int = DEFAULT_BEAT_LENGTH
    detection_lead: int = 0
    d_e: int = 128
    d_p: int = 128
    expert_channels: int = 8
    morph_kernels: tuple = (3, 7, 15)
    rhythm_dilations: tuple = (2, 4)
    attention_heads: int = 4
    attention: str = "hybrid"
    gating: str = "task"
    use_periodic: bool = True
    d_t: int = 8
    d_h: int = 64
    lora_rank: int = 4
    lora_alpha: float = 8.0
    init_seed: int = 0

    def __post_init__(self):
        specs = tuple(s if isinstance(s, ExtractorSpec) else ExtractorSpec(**s) for s in self.extractors)
        object.__setattr__(self, "extractors", specs)
        object.__setattr__(self, "morph_kernels", tuple(int(k) for k in self.morph_kernels))
        object.__setattr__(self, "rhythm_dilations", tuple(int(d) for d in self.rhythm_dilations))
        if self.attention not in ATTENTION_MODES:
            raise InvalidHyper(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        if self.gating not in GATING_MODES:
            raise InvalidHyper(f"gating must be one of {GATING_MODES}, got {self.gating!r}")
        if len(self.morph_kernels) != 3 or len(self.rhythm_dilations) != 2:
            raise InvalidHyper("the expert bank needs three morphology kernels and two rhythm dilations")
        for name in ("n_leads", "beat_length", "d_e", "d_p", "expert_channels", "attention_heads", "d_t", "d_h"):
            if getattr(self, name) < 1:
                raise InvalidHyper(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.detection_lead < self.n_leads:
            raise InvalidHyper(f"detection_lead {self.detection_lead} outside [0, {self.n_leads})")

    def to_dict(self):
        d = asdict(self)
        d["extractors"] = [asdict(s) for s in self.extractors]
        d["morph_kernels"] = list(self.morph_kernels)
        d["rhythm_dilations"] = list(self.rhythm_dilations)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; identifies compatible checkpoints.

        The initialisation seed is left out: it changes values, not the layout.
        """
        d = self.to_dict()
        d.pop("init_seed")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).digest()

    @property
    def fused_dim(self):
        return sum(s.output_dim for s in self.extractors) + (self.d_p if self.use_periodic else 0)


@dataclass
class PreparedRecord:
    """Model-ready view of one record, computed once and reused across epochs."""

    record_id: str
    x: np.ndarray
    beats: object
    stats: np.ndarray
    targets: dict


def record_targets(record: EcgRecord):
    """Map task name -> label value (missing labels are absent)."""
    out = {}
    if record.labels is None:
        return out
    labels = record.labels.as_dict()
    for t in TASKS:
        v = labels.get(t.label_field)
        if v is not None:
            out[t.name] = int(v) if t.kind == "multiclass" else float(v)
    return out


@dataclass
class TaskOutput:
    raw: np.ndarray
    f_periodic: np.ndarray | None
    gate_weights: np.ndarray | None
    alphas: tuple
    attention_weights: dict


class EcgMoE(Module):
    def __init__(self, config: ModelConfig | None = None):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(cfg.init_seed)
        self.branch = MultiModelBranch(cfg.extractors, cfg.n_leads, rng)
        self.task_embeddings = Parameter("task_embeddings", rng.normal(size=(len(TASKS), cfg.d_t)))
        self.periodic = None
        if cfg.use_periodic:
            self.periodic = PeriodicMoE(
                global_stats_dim(cfg.n_leads), self.task_embeddings, rng,
                d_e=cfg.d_e, d_p=cfg.d_p, channels=cfg.expert_channels, kernels=cfg.morph_kernels,
                dilations=cfg.rhythm_dilations, heads=cfg.attention_heads,
                attention=cfg.attention, gating=cfg.gating,
            )
        d_m = self.branch.output_dim
        self.fusion = HierarchicalFusion(d_m, cfg.d_p, cfg.d_t, rng, cfg.use_periodic)
        if self.fusion.output_dim != cfg.fused_dim:
            raise ShapeMismatch(f"fused width {self.fusion.output_dim} != configured {cfg.fused_dim}")
        self.heads = TaskHeads(self.fusion.output_dim, cfg.d_h, cfg.lora_rank, cfg.lora_alpha, rng)
        # Regression targets are learned on a standardised scale: [mean, std] per task.
        self.target_norm = {
            t.name: Parameter(f"target_norm.{t.name}", np.array([0.0, 1.0]), frozen=True)
            for t in TASKS
            if t.kind == "regression"
        }
        self._pool_m = adaptive_avg_pool_matrix(d_m, cfg.d_p) if cfg.use_periodic else None

    @property
    def d_f(self):
        return self.fusion.output_dim

    # -- preprocessing --------------------------------------------------------------
    def prepare(self, record: EcgRecord) -> PreparedRecord:
        cfg = self.config
        if record.n_leads != cfg.n_leads:
            raise ShapeMismatch(f"record has {record.n_leads} leads, model expects {cfg.n_leads}")
        normed = znormalize(record)
        beats, stats = None, None
        if cfg.use_periodic:
            peaks = detect_r_peaks(record, cfg.detection_lead)
            beats = segment_beats(normed, peaks, cfg.beat_length, cfg.detection_lead)
            stats = global_stats(record, beats)
        return PreparedRecord(record.record_id, np.array(normed.leads), beats, stats, record_targets(record))

    # -- target scaling -------------------------------------------------------------
    def fit_target_norm(self, prepared):
        for name, p in self.target_norm.items():
            vals = np.array([pr.targets[name] for pr in prepared if name in pr.targets])
            if vals.size:
                std = float(vals.std())
                p.value[:] = (float(vals.mean()), std if std > 1e-9 else 1.0)

    def scale_target(self, task, value):
        if task in self.target_norm:
            mean, std = self.target_norm[task].value
            return (value - mean) / std
        return value

    def unscale(self, task, raw):
        if task in self.target_norm:
            mean, std = self.target_norm[task].value
            return mean + std * raw
        return raw

    # -- forward / backward ---------------------------------------------------------
    def forward_shared(self, prep: PreparedRecord):
        """Task-independent work: F_m and the five expert vectors."""
        mm, cb = self.branch.forward(prep.x)
        E, ce = None, None
        if self.periodic is not None:
            E, ce = self.periodic.experts.forward(prep.beats.beats, prep.beats.rr_ms)
        return (mm.fused, E), (cb, ce)

    def backward_shared(self, df_m, dE, cache):
        cb, ce = cache
        dx = self.branch.backward(df_m, cb)
        if self.periodic is not None and dE is not None:
            self.periodic.experts.backward(dE, ce)
        return dx

    def forward_task(self, shared, prep: PreparedRecord, task, alpha_override=None):
        tid = resolve_task(task)
        f_m, E = shared
        f_p, gate, attn, cp = None, None, {}, None
        if self.periodic is not None:
            pout, cp = self.periodic.forward_task(E, prep.stats, tid)
            f_p, gate, attn = pout.f_periodic, pout.gate_weights, pout.attention_weights
        e_t = self.task_embeddings.value[tid]
        (fused, alphas), cf = self.fusion.forward(f_m, f_p, e_t, alpha_override)
        y, ch = self.heads.forward(fused, tid)
        return TaskOutput(y, f_p, gate, alphas, attn), (tid, cp, cf, ch)

    def backward_task(self, dy, cache, df_p_extra=None):
        """Returns (d F_m, d E); all parameter gradients on the task path are accumulated."""
        tid, cp, cf, ch = cache
        dfused = self.heads.backward(dy, ch)
        df_m, df_p, de = self.fusion.backward(dfused, cf)
        if de is not None:
            grad = np.zeros_like(self.task_embeddings.value)
            grad[tid] = de
            self.task_embeddings.accumulate(grad)
        dE = None
        if self.periodic is not None:
            if df_p_extra is not None:
                df_p = df_p + df_p_extra
            dE = self.periodic.backward_task(df_p, cp)
        return df_m, dE

    def forward(self, prep: PreparedRecord, task):
        """Single-task pass returning (raw head output, cache); for gradient checks."""
        shared, cs = self.forward_shared(prep)
        out, ct = self.forward_task(shared, prep, task)
        return out.raw, (cs, ct)

    def backward(self, dy, cache):
        cs, ct = cache
        df_m, dE = self.backward_task(dy, ct)
        self.backward_shared(df_m, dE, cs)
        return (None, None)

    # -- contrastive embeddings -----------------------------------------------------
    def pool_multimodel(self, f_m):
        """Average-pool F_m down to the periodic width so both branches share one space."""
        return self._pool_m @ f_m

    def pool_multimodel_backward(self, dz):
        return self._pool_m.T @ dz

    # -- inference ------------------------------------------------------------------
    def predict(self, prep: PreparedRecord, task):
        """Regression: value in label units; binary: logit; multiclass: 15 logits."""
        shared, _ = self.forward_shared(prep)
        name = TASKS[resolve_task(task)].name
        out, _ = self.forward_task(shared, prep, task)
        if TASKS[resolve_task(task)].kind == "multiclass":
            return out.raw.copy()
        return float(self.unscale(name, out.raw[0]))

    def predict_all(self, prep: PreparedRecord, tasks=None):
        shared, _ = self.forward_shared(prep)
        res = {}
        for name in tasks or [t.name for t in TASKS]:
            t = TASKS[resolve_task(name)]
            out, _ = self.forward_task(shared, prep, t.name)
            res[t.name] = out.raw.copy() if t.kind == "multiclass" else float(self.unscale(t.name, out.raw[0]))
        return res

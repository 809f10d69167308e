"""Multi-task training: composite loss, optimisers, the epoch loop and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DivergedLoss, EmptyBatch, InvalidHyper
from .nn.losses import bce_with_logits, cross_entropy, mae, nt_xent
from .tasks import TASK_NAMES, TASKS, get_task

log = logging.getLogger(__name__)

TASK_SAMPLING = ("round_robin", "proportional")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    lambda_cont: float = 0.1
    temperature: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    task_sampling: str = "round_robin"
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tasks: tuple = TASK_NAMES
    trunk_warmup_epochs: int = 5
    freeze_trunk_after_warmup: bool = True
    restore_best: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for t in self.tasks:
            get_task(t)
        if not self.tasks:
            raise InvalidHyper("at least one task must be trained")
        if not self.lambda_cont >= 0:
            raise InvalidHyper(f"lambda_cont must be >= 0, got {self.lambda_cont}")
        if not self.temperature > 0:
            raise InvalidHyper(f"temperature must be > 0, got {self.temperature}")
        if not self.learning_rate >= 0:
            raise InvalidHyper(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or (self.lambda_cont > 0 and self.batch_size < 2):
            raise InvalidHyper(f"batch_size must be >= 2 when lambda_cont > 0 (got {self.batch_size})")
        if self.epochs < 0:
            raise InvalidHyper(f"epochs must be >= 0, got {self.epochs}")
        if self.task_sampling not in TASK_SAMPLING:
            raise InvalidHyper(f"task_sampling must be one of {TASK_SAMPLING}, got {self.task_sampling!r}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidHyper(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidHyper("adam needs 0 <= beta1, beta2 < 1 and eps > 0")


# ---------------------------------------------------------------------------- optimisers


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if not p.frozen:
                p.value -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


# ---------------------------------------------------------------------------- loss


@dataclass
class LossResult:
    total: float
    breakdown: dict
    grads: dict  # (row, task) -> d loss / d raw head output
    dz_m: np.ndarray | None = None
    dz_p: np.ndarray | None = None


def task_loss(task, raw, target):
    kind = get_task(task).kind
    if kind == "regression":
        return mae(raw, np.array([target]))
    if kind == "binary":
        return bce_with_logits(raw, np.array([target]))
    return cross_entropy(raw, target)


def composite_loss(outputs, targets, z_m=None, z_p=None, lambda_cont=0.1, temperature=0.5):
    """Sum of per-task mean losses plus ``lambda_cont * nt_xent(z_m, z_p)``.

    ``outputs[i]`` maps task -> raw head output for row i, ``targets[i]`` maps
    task -> target on the model's training scale. A task's loss is averaged
    over the rows that carry it. The contrastive term is only formed when
    both embedding batches are given and hold at least two rows.
    """
    rows = {}
    for i, (out, tgt) in enumerate(zip(outputs, targets)):
        for task in out:
            if task in tgt:
                rows.setdefault(task, []).append(i)
    if not rows:
        raise EmptyBatch("no task targets present in the batch")
    breakdown, grads = {}, {}
    for task in (t.name for t in TASKS):
        if task not in rows:
            continue
        idx = rows[task]
        total = 0.0
        for i in idx:
            value, g = task_loss(task, outputs[i][task], targets[i][task])
            total += value
            grads[(i, task)] = g / len(idx)
        breakdown[task] = total / len(idx)
    dz_m = dz_p = None
    if lambda_cont > 0 and z_m is not None and z_p is not None and len(z_m) >= 2:
        value, g1, g2 = nt_xent(np.asarray(z_m), np.asarray(z_p), temperature)
        breakdown["contrastive"] = lambda_cont * value
        dz_m, dz_p = lambda_cont * g1, lambda_cont * g2
    return LossResult(sum(breakdown.values()), breakdown, grads, dz_m, dz_p)


# ---------------------------------------------------------------------------- metrics


def f1_score(logits, labels):
    """Binary F1 with a positive prediction wherever the logit exceeds 0.

    When there are no positives among predictions or labels the predictor is
    perfect and 1.0 is returned.
    """
    pred = np.asarray(logits) > 0
    true = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def accuracy(logits, classes):
    logits = np.atleast_2d(np.asarray(logits))
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(classes)))


def mean_absolute_error(pred, target):
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


@dataclass
class MetricsReport:
    metrics: dict = field(default_factory=dict)  # task -> {metric name: value}
    loss: float | None = None
    loss_breakdown: dict = field(default_factory=dict)
    n_records: int = 0
    train_loss_curve: list = field(default_factory=list)
    val_loss_curve: list = field(default_factory=list)
    throughput_rps: float = field(default=0.0, compare=False)

    def value(self, task, metric=None):
        m = self.metrics[task]
        return m[metric or get_task(task).metric]

    def to_dict(self):
        return asdict(self)


def _forward_batch(model, batch, tasks_per_row):
    """Shared pass once per record, then one head pass per requested task."""
    rows = []
    for prep, tasks in zip(batch, tasks_per_row):
        shared, cs = model.forward_shared(prep)
        outs = {}
        for task in tasks:
            outs[task] = model.forward_task(shared, prep, task)
        rows.append((shared, cs, outs))
    return rows


def _embeddings(model, rows):
    if model.periodic is None:
        return None, None
    z_m, z_p = [], []
    for shared, _, outs in rows:
        z_m.append(model.pool_multimodel(shared[0]))
        z_p.append(np.mean([o.f_periodic for o, _ in outs.values()], axis=0))
    return np.stack(z_m), np.stack(z_p)


def _targets(model, batch):
    return [{t: model.scale_target(t, v) for t, v in prep.targets.items()} for prep in batch]


def batch_loss(model, batch, tasks_per_row, cfg: TrainConfig, backward=False):
    rows = _forward_batch(model, batch, tasks_per_row)
    outputs = [{t: o.raw for t, (o, _) in outs.items()} for _, _, outs in rows]
    z_m, z_p = _embeddings(model, rows) if cfg.lambda_cont > 0 else (None, None)
    res = composite_loss(outputs, _targets(model, batch), z_m, z_p, cfg.lambda_cont, cfg.temperature)
    if backward and np.isfinite(res.total):
        for i, (shared, cs, outs) in enumerate(rows):
            df_m = np.zeros_like(shared[0])
            dE = None
            extra = None
            if res.dz_p is not None:
                extra = res.dz_p[i] / len(outs)
                df_m += model.pool_multimodel_backward(res.dz_m[i])
            for task, (o, ct) in outs.items():
                g = res.grads.get((i, task))
                if g is None:
                    g = np.zeros_like(o.raw)
                dfm_t, dE_t = model.backward_task(g, ct, extra)
                df_m += dfm_t
                if dE_t is not None:
                    dE = dE_t if dE is None else dE + dE_t
            model.backward_shared(df_m, dE, cs)
    return res


def _label_tasks(prep, tasks):
    return [t for t in tasks if t in prep.targets]


def evaluate(model, prepared, tasks=TASK_NAMES, lambda_cont=0.0, temperature=0.5):
    """Metrics per task plus the composite loss over the whole set as one batch."""
    tasks = tuple(tasks)
    start = time.perf_counter()
    rows = _forward_batch(model, prepared, [tasks] * len(prepared))
    elapsed = time.perf_counter() - start
    report = MetricsReport(n_records=len(prepared))
    report.throughput_rps = len(prepared) / elapsed if elapsed > 0 else float("inf")
    for task in tasks:
        t = get_task(task)
        idx = [i for i, p in enumerate(prepared) if task in p.targets]
        if not idx:
            continue
        raw = [rows[i][2][task][0].raw for i in idx]
        truth = [prepared[i].targets[task] for i in idx]
        if t.kind == "regression":
            pred = [model.unscale(task, r[0]) for r in raw]
            report.metrics[task] = {"mae": mean_absolute_error(pred, truth)}
        elif t.kind == "binary":
            report.metrics[task] = {"f1": f1_score([r[0] for r in raw], truth)}
        else:
            report.metrics[task] = {"acc": accuracy(np.stack(raw), truth)}
    outputs = [{t: o.raw for t, (o, _) in outs.items()} for _, _, outs in rows]
    targets = _targets(model, prepared)
    if any(_label_tasks(p, tasks) for p in prepared):
        z_m, z_p = _embeddings(model, rows) if lambda_cont > 0 else (None, None)
        res = composite_loss(outputs, targets, z_m, z_p, lambda_cont, temperature)
        report.loss = res.total
        report.loss_breakdown = res.breakdown
    return report


# ---------------------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: object
    report: MetricsReport
    history: list  # rows of (epoch, task, metric, value)
    best_epoch: int
    best_state: dict


def snapshot(model):
    return {name: p.value.copy() for name, p in model.named_parameters()}


def restore(model, state):
    for name, p in model.named_parameters():
        p.value[...] = state[name]


def _task_plan(train_set, cfg, rng):
    if cfg.task_sampling == "round_robin":
        return [_label_tasks(p, cfg.tasks) for p in train_set]
    counts = np.array([sum(t in p.targets for p in train_set) for t in cfg.tasks], dtype=np.float64)
    plan = []
    for p in train_set:
        avail = [j for j, t in enumerate(cfg.tasks) if t in p.targets]
        if not avail:
            plan.append([])
            continue
        w = counts[avail] / counts[avail].sum()
        plan.append([cfg.tasks[avail[rng.choice(len(avail), p=w)]]])
    return plan


def train(model, train_set, val_set, cfg: TrainConfig, checkpoint_path=None, on_epoch=None):
    """Optimise ``model`` in place on prepared records.

    Every source of randomness derives from ``cfg.seed``. Validation composite
    loss picks the best epoch; its parameters are written to
    ``checkpoint_path`` and, with ``restore_best``, loaded back at the end.
    """
    if not train_set:
        raise EmptyBatch("training set is empty")
    from .checkpoint import save_checkpoint

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = make_optimizer(params, cfg)
    model.heads.set_trunk_frozen(False)
    history = []
    train_curve, val_curve = [], []
    best = (np.inf, -1, snapshot(model))
    val = val_set or train_set

    for epoch in range(cfg.epochs):
        if cfg.freeze_trunk_after_warmup and epoch == cfg.trunk_warmup_epochs:
            model.heads.set_trunk_frozen(True)
        order = rng.permutation(len(train_set))
        plan = _task_plan(train_set, cfg, rng)
        epoch_loss, n_batches = 0.0, 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = [train_set[i] for i in idx]
            tasks = [plan[i] for i in idx]
            if not any(tasks):
                continue
            model.zero_grad()
            res = batch_loss(model, batch, tasks, cfg, backward=True)
            if not np.isfinite(res.total):
                raise DivergedLoss(f"non-finite loss {res.total} at epoch {epoch}, step {step}")
            opt.step()
            epoch_loss += res.total
            n_batches += 1
        train_loss = epoch_loss / max(n_batches, 1)
        rep = evaluate(model, val, cfg.tasks, cfg.lambda_cont, cfg.temperature)
        if rep.loss is None or not np.isfinite(rep.loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        train_curve.append(train_loss)
        val_curve.append(rep.loss)
        history.append((epoch, "all", "train_loss", train_loss))
        history.append((epoch, "all", "val_loss", rep.loss))
        for task, m in rep.metrics.items():
            for name, value in m.items():
                history.append((epoch, task, name, value))
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, rep.loss)
        if rep.loss < best[0]:
            best = (rep.loss, epoch, snapshot(model))
        if on_epoch is not None:
            on_epoch(epoch, rep)

    model.heads.set_trunk_frozen(False)
    best_loss, best_epoch, best_state = best
    if cfg.restore_best and best_epoch >= 0:
        restore(model, best_state)
    if checkpoint_path is not None:
        current = snapshot(model)
        restore(model, best_state)
        save_checkpoint(model, checkpoint_path)
        restore(model, current)
    report = evaluate(model, val, cfg.tasks, cfg.lambda_cont, cfg.temperature)
    report.train_loss_curve = train_curve
    report.val_loss_curve = val_curve
    return TrainResult(model, report, history, best_epoch, best_state)


def write_metrics(history, report: MetricsReport, csv_path, json_path, extra=None):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "task", "metric", "value"])
        for row in history:
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    summary = report.to_dict()
    if extra:
        summary.update(extra)
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

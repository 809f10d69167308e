"""Branch-level gated fusion and LoRA-adapted per-task heads."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch, UnknownTask
from .nn.core import Module, Parameter, relu_backward, relu_forward, sigmoid
from .nn.layers import Linear, LoraLayer, _init
from .tasks import TASKS


class HierarchicalFusion(Module):
    """F_fused = concat(alpha_m * F_m, alpha_p * F_p).

    Each alpha is a sigmoid of its own linear map of concat(F_m, F_p, e_t).
    With ``use_periodic=False`` only the multi-model block and alpha_m exist.
    """

    def __init__(self, d_m, d_p, d_t, rng, use_periodic=True):
        self.d_m = d_m
        self.d_p = d_p if use_periodic else 0
        self.use_periodic = use_periodic
        d_in = d_m + self.d_p + d_t
        self.gate_m = Linear("fusion.gate_m", d_in, 1, rng, gain=0.1)
        self.gate_p = Linear("fusion.gate_p", d_in, 1, rng, gain=0.1) if use_periodic else None

    @property
    def output_dim(self):
        return self.d_m + self.d_p

    def forward(self, f_m, f_p, e_t, alpha_override=None):
        """Returns ((fused, (alpha_m, alpha_p)), cache); alpha_p is None without a periodic branch.

        ``alpha_override`` injects fixed alphas and bypasses the gate networks.
        """
        f_m = np.asarray(f_m, dtype=np.float64)
        if f_m.shape != (self.d_m,):
            raise ShapeMismatch(f"F_m has shape {f_m.shape}, expected ({self.d_m},)")
        parts = [f_m]
        if self.use_periodic:
            f_p = np.asarray(f_p, dtype=np.float64)
            if f_p.shape != (self.d_p,):
                raise ShapeMismatch(f"F_periodic has shape {f_p.shape}, expected ({self.d_p},)")
            parts.append(f_p)
        u = np.concatenate(parts + [e_t])
        if alpha_override is not None:
            am, ap = alpha_override
            cm = cp = None
        else:
            zm, cm = self.gate_m.forward(u)
            am = float(sigmoid(zm)[0])
            ap, cp = None, None
            if self.use_periodic:
                zp, cp = self.gate_p.forward(u)
                ap = float(sigmoid(zp)[0])
        fused = am * f_m
        if self.use_periodic:
            fused = np.concatenate([fused, ap * f_p])
        return (fused, (am, ap)), (f_m, f_p, am, ap, cm, cp)

    def backward(self, dfused, cache):
        """Returns (d f_m, d f_p, d e_t)."""
        if isinstance(dfused, tuple):
            dfused = dfused[0]
        f_m, f_p, am, ap, cm, cp = cache
        d_m = self.d_m
        df_m = am * dfused[:d_m]
        df_p = None
        du = 0.0
        if cm is not None:
            dzm = np.array([np.dot(dfused[:d_m], f_m) * am * (1 - am)])
            du = du + self.gate_m.backward(dzm, cm)
        if self.use_periodic:
            df_p = ap * dfused[d_m:]
            if cp is not None:
                dzp = np.array([np.dot(dfused[d_m:], f_p) * ap * (1 - ap)])
                du = du + self.gate_p.backward(dzp, cp)
        if isinstance(du, np.ndarray):
            df_m = df_m + du[:d_m]
            if self.use_periodic:
                df_p = df_p + du[d_m : d_m + self.d_p]
            de = du[d_m + self.d_p :]
        else:
            de = None
        return df_m, df_p, de


class TaskHeads(Module):
    """Shared trunk weight with one LoRA adapter per task, relu, then a per-task output layer."""

    def __init__(self, d_f, d_h, rank, alpha, rng):
        self.trunk_W = Parameter("trunk.W", _init(rng, (d_h, d_f), d_f, np.sqrt(2)))
        self.trunk_b = Parameter("trunk.b", np.zeros(d_h))
        self.adapters = [LoraLayer(f"lora.{t.name}", self.trunk_W, self.trunk_b, rank, alpha, rng) for t in TASKS]
        self.outputs = [Linear(f"head.{t.name}", d_h, t.out_dim, rng) for t in TASKS]

    def set_trunk_frozen(self, frozen):
        self.trunk_W.frozen = frozen
        self.trunk_b.frozen = frozen

    def _check(self, task_id):
        if not 0 <= task_id < len(TASKS):
            raise UnknownTask(f"task id {task_id} out of range [0, {len(TASKS)})")

    def trunk(self, f_fused, task_id):
        self._check(task_id)
        z, _ = self.adapters[task_id].forward(f_fused)
        return np.maximum(z, 0.0)

    def forward(self, f_fused, task_id):
        self._check(task_id)
        z, ca = self.adapters[task_id].forward(f_fused)
        h, mask = relu_forward(z)
        y, co = self.outputs[task_id].forward(h)
        return y, (task_id, ca, mask, co)

    def backward(self, dy, cache):
        task_id, ca, mask, co = cache
        dh = self.outputs[task_id].backward(dy, co)
        return self.adapters[task_id].backward(relu_backward(dh, mask), ca)

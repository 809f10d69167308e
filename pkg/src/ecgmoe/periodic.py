"""Period-aware dual-path mixture of experts.

Three morphology experts convolve each normalised beat with kernels of
different sizes; two dilated rhythm experts convolve along the beat sequence.
A task-conditioned softmax gate weights the five expert vectors, which are
then mixed by multi-head attention into one periodic feature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .beats import BeatSet
from .errors import InsufficientPeaks, InvalidHyper, ShapeMismatch, UnknownTask
from .nn.core import Module, Parameter, adaptive_avg_pool_matrix, relu_backward, relu_forward, softmax, softmax_backward
from .nn.layers import RELU_BIAS, Conv1d, Linear, MultiHeadAttention

N_EXPERTS = 5
N_MORPH = 3
ATTENTION_MODES = ("self", "cross", "hybrid")
GATING_MODES = ("task", "signal", "uniform")

# Fixed reference used to z-score RR intervals for the rhythm experts; a
# per-record z-score would discard the absolute rate.
RR_REF_MEAN_MS = 800.0
RR_REF_STD_MS = 300.0


@dataclass
class PeriodicOutput:
    f_periodic: np.ndarray
    gate_weights: np.ndarray
    attention_weights: dict


def gate_features(stats):
    """Scale a global_stats vector for the gate: RR entries go from ms to s."""
    x = np.array(stats, dtype=np.float64)
    x[-4:] /= 1000.0
    return x


def rr_per_beat(rr_ms):
    """One RR value per beat: the interval ending at it (the first beat borrows the next)."""
    rr = np.asarray(rr_ms, dtype=np.float64)
    return np.concatenate([rr[:1], rr])


class MorphologyExpert(Module):
    """Two same-padded conv+relu stages over each beat.

    The expert vector keeps coarse wave placement: activations are averaged
    into ``bins`` segments along the beat, then over beats. The per-beat
    embedding handed to the rhythm experts is the plain time average.
    """

    def __init__(self, name, kernel, channels, d_e, rng, bins=8):
        self.bins = bins
        self.conv1 = Conv1d(f"{name}.conv1", 1, channels, kernel, rng, gain=math.sqrt(2), bias_init=RELU_BIAS)
        self.conv2 = Conv1d(f"{name}.conv2", channels, channels, kernel, rng, gain=math.sqrt(2), bias_init=RELU_BIAS)
        self.out = Linear(f"{name}.out", channels * bins, d_e, rng)

    def forward(self, beats):
        """beats [B, L] -> (expert vector [d_e], per-beat embedding [B, channels])."""
        z1, c1 = self.conv1.forward(beats[:, None, :])
        a1, m1 = relu_forward(z1)
        z2, c2 = self.conv2.forward(a1)
        a2, m2 = relu_forward(z2)
        P = adaptive_avg_pool_matrix(a2.shape[2], self.bins)
        per_beat = a2.mean(axis=2)
        profile = (a2 @ P.T).mean(axis=0)
        y, co = self.out.forward(profile.ravel())
        return (y, per_beat), (c1, m1, c2, m2, co, P, a2.shape)

    def backward(self, dy, cache):
        dout, dper_beat = dy
        c1, m1, c2, m2, co, P, shape = cache
        B, ch, L = shape
        dprofile = self.out.backward(dout, co).reshape(ch, self.bins)
        da2 = np.broadcast_to((dprofile @ P) / B, shape)
        if dper_beat is not None:
            da2 = da2 + dper_beat[:, :, None] / L
        da1 = self.conv2.backward(relu_backward(da2, m2), c2)
        dx = self.conv1.backward(relu_backward(da1, m1), c1)
        return dx[:, 0, :]


class RhythmExpert(Module):
    """Two dilated conv+relu stages along the beat axis, pooled over beats."""

    def __init__(self, name, c_in, dilation, channels, d_e, rng, kernel=3):
        opts = dict(dilation=dilation, gain=math.sqrt(2), bias_init=RELU_BIAS)
        self.conv1 = Conv1d(f"{name}.conv1", c_in, channels, kernel, rng, **opts)
        self.conv2 = Conv1d(f"{name}.conv2", channels, channels, kernel, rng, **opts)
        self.out = Linear(f"{name}.out", channels, d_e, rng)

    def forward(self, seq):
        """seq [c_in, B] -> [d_e]."""
        z1, c1 = self.conv1.forward(seq)
        a1, m1 = relu_forward(z1)
        z2, c2 = self.conv2.forward(a1)
        a2, m2 = relu_forward(z2)
        y, co = self.out.forward(a2.mean(axis=1))
        return y, (c1, m1, c2, m2, co, a2.shape)

    def backward(self, dy, cache):
        c1, m1, c2, m2, co, shape = cache
        dpooled = self.out.backward(dy, co)
        da2 = np.broadcast_to(dpooled[:, None] / shape[1], shape)
        da1 = self.conv2.backward(relu_backward(da2, m2), c2)
        return self.conv1.backward(relu_backward(da1, m1), c1)


class ExpertBank(Module):
    """3 morphology experts (over beats) and 2 rhythm experts (over the beat sequence).

    Rhythm input per beat: the concatenated per-beat morphology embeddings
    plus the reference-z-scored RR interval.
    """

    def __init__(self, rng, d_e=128, channels=8, kernels=(3, 7, 15), dilations=(2, 4)):
        if len(kernels) != N_MORPH or len(dilations) != N_EXPERTS - N_MORPH:
            raise InvalidHyper(f"expected {N_MORPH} kernel sizes and {N_EXPERTS - N_MORPH} dilations")
        self.d_e = d_e
        self.morph = [MorphologyExpert(f"morph{i}_k{k}", k, channels, d_e, rng) for i, k in enumerate(kernels)]
        rhythm_in = N_MORPH * channels + 1
        self.rhythm = [
            RhythmExpert(f"rhythm{i}_d{d}", rhythm_in, d, channels, d_e, rng) for i, d in enumerate(dilations)
        ]

    def forward(self, beats, rr_ms):
        beats = np.asarray(beats, dtype=np.float64)
        if beats.ndim != 2 or beats.shape[0] < 2:
            raise InsufficientPeaks(f"experts need a [B >= 2, L] beat matrix, got {beats.shape}")
        if len(rr_ms) != beats.shape[0] - 1:
            raise ShapeMismatch(f"{len(rr_ms)} RR intervals for {beats.shape[0]} beats")
        outs, per_beat, mcaches = [], [], []
        for expert in self.morph:
            (y, pb), c = expert.forward(beats)
            outs.append(y)
            per_beat.append(pb)
            mcaches.append(c)
        rr_z = (rr_per_beat(rr_ms) - RR_REF_MEAN_MS) / RR_REF_STD_MS
        seq = np.concatenate(per_beat + [rr_z[:, None]], axis=1).T  # [3c+1, B]
        rcaches = []
        for expert in self.rhythm:
            y, c = expert.forward(seq)
            outs.append(y)
            rcaches.append(c)
        return np.stack(outs), (mcaches, rcaches, [pb.shape[1] for pb in per_beat])

    def backward(self, dE, cache):
        """Accumulates parameter gradients; beats are data, so nothing is returned."""
        mcaches, rcaches, widths = cache
        dseq = 0.0
        for j, (expert, c) in enumerate(zip(self.rhythm, rcaches)):
            dseq = dseq + expert.backward(dE[N_MORPH + j], c)
        dper_beat = dseq.T if isinstance(dseq, np.ndarray) else None
        offset = 0
        for j, (expert, c) in enumerate(zip(self.morph, mcaches)):
            dpb = None if dper_beat is None else dper_beat[:, offset : offset + widths[j]]
            offset += widths[j]
            expert.backward((dE[j], dpb), c)


class TaskGate(Module):
    """g = softmax(U [x_bar ; e_t]) over the five experts; no bias term."""

    def __init__(self, stats_dim, task_embeddings: Parameter, rng, mode="task"):
        if mode not in GATING_MODES:
            raise InvalidHyper(f"gating mode must be one of {GATING_MODES}, got {mode!r}")
        self.mode = mode
        self.stats_dim = stats_dim
        self.task_embeddings = task_embeddings
        d_t = task_embeddings.shape[1]
        self.U = Parameter("gate.U", rng.normal(0.0, 0.1, size=(N_EXPERTS, stats_dim + d_t)))

    def forward(self, stats, task_id):
        stats = np.asarray(stats, dtype=np.float64)
        if stats.shape != (self.stats_dim,):
            raise ShapeMismatch(f"gate expects stats of shape ({self.stats_dim},), got {stats.shape}")
        n_tasks = self.task_embeddings.shape[0]
        if not 0 <= task_id < n_tasks:
            raise UnknownTask(f"task id {task_id} out of range [0, {n_tasks})")
        if self.mode == "uniform":
            return np.full(N_EXPERTS, 1.0 / N_EXPERTS), None
        e = self.task_embeddings.value[task_id]
        if self.mode == "signal":
            e = np.zeros_like(e)
        u = np.concatenate([stats, e])
        g = softmax(self.U.value @ u)
        return g, (u, g, task_id)

    def backward(self, dg, cache):
        """Returns d stats."""
        if cache is None:
            return np.zeros(self.stats_dim)
        u, g, task_id = cache
        dlogits = softmax_backward(dg, g)
        self.U.accumulate(np.outer(dlogits, u))
        du = self.U.value.T @ dlogits
        if self.mode == "task":
            grad = np.zeros_like(self.task_embeddings.value)
            grad[task_id] = du[self.stats_dim :]
            self.task_embeddings.accumulate(grad)
        return du[: self.stats_dim]


class AttentionIntegrator(Module):
    """Mix the gate-weighted expert tokens into one periodic vector.

    self   : self-attention over all five tokens (+ residual), mean-pooled.
    cross  : rhythm summary (mean of the two rhythm tokens) queries the
             three morphology tokens (+ residual on the query).
    hybrid : self-attention over the morphology tokens (+ residual), then the
             rhythm summary queries the result (+ residual).
    """

    def __init__(self, d_e, d_p, heads, rng, mode="hybrid"):
        if mode not in ATTENTION_MODES:
            raise InvalidHyper(f"attention mode must be one of {ATTENTION_MODES}, got {mode!r}")
        self.mode = mode
        self.self_attn = MultiHeadAttention("integrate.self", d_e, heads, rng) if mode in ("self", "hybrid") else None
        self.cross_attn = (
            MultiHeadAttention("integrate.cross", d_e, heads, rng) if mode in ("cross", "hybrid") else None
        )
        self.out = Linear("integrate.out", d_e, d_p, rng)

    def forward(self, tokens):
        weights = {}
        if self.mode == "self":
            (a, w), ca = self.self_attn.forward(tokens, tokens, tokens)
            weights["self"] = w
            h = (tokens + a).mean(axis=0)
            inner = (ca,)
        else:
            morph = tokens[:N_MORPH]
            q = tokens[N_MORPH:].mean(axis=0, keepdims=True)
            if self.mode == "hybrid":
                (s, w1), cs = self.self_attn.forward(morph, morph, morph)
                weights["self"] = w1
                kv = morph + s
            else:
                cs = None
                kv = morph
            (o, w2), cc = self.cross_attn.forward(q, kv, kv)
            weights["cross"] = w2
            h = (q + o)[0]
            inner = (cs, cc)
        y, co = self.out.forward(h)
        return (y, weights), (inner, co, tokens.shape)

    def backward(self, dy, cache):
        if isinstance(dy, tuple):
            dy = dy[0]
        inner, co, shape = cache
        dh = self.out.backward(dy, co)
        n = shape[0]
        if self.mode == "self":
            (ca,) = inner
            dH = np.broadcast_to(dh / n, shape)
            dq, dk, dv = self.self_attn.backward(dH, ca)
            return dH + dq + dk + dv
        cs, cc = inner
        dtok = np.zeros(shape)
        dq_row = dh[None, :]
        dq2, dkv_k, dkv_v = self.cross_attn.backward(dq_row, cc)
        dq_total = dq_row + dq2
        dkv = dkv_k + dkv_v
        if self.mode == "hybrid":
            dq, dk, dv = self.self_attn.backward(dkv, cs)
            dtok[:N_MORPH] = dkv + dq + dk + dv
        else:
            dtok[:N_MORPH] = dkv
        dtok[N_MORPH:] = dq_total / (n - N_MORPH)
        return dtok


class PeriodicMoE(Module):
    """Expert bank, task gate and attention integrator."""

    def __init__(self, stats_dim, task_embeddings, rng, d_e=128, d_p=128, channels=8,
                 kernels=(3, 7, 15), dilations=(2, 4), heads=4, attention="hybrid", gating="task"):
        self.experts = ExpertBank(rng, d_e, channels, kernels, dilations)
        self.gate = TaskGate(stats_dim, task_embeddings, rng, gating)
        self.integrator = AttentionIntegrator(d_e, d_p, heads, rng, attention)
        self.d_p = d_p

    def run_experts(self, beat_set: BeatSet):
        return self.experts.forward(beat_set.beats, beat_set.rr_ms)

    def integrate(self, expert_outputs, gate_weights):
        E = np.asarray(expert_outputs, dtype=np.float64)
        g = np.asarray(gate_weights, dtype=np.float64)
        if E.shape[0] != N_EXPERTS or g.shape != (N_EXPERTS,):
            raise ShapeMismatch(
                f"integrate needs {N_EXPERTS} expert vectors and gate weights, got {E.shape}, {g.shape}"
            )
        (f, weights), ci = self.integrator.forward(g[:, None] * E)
        return PeriodicOutput(f, g, weights), (E, g, ci)

    def integrate_backward(self, df, cache):
        """Returns (dE, dg)."""
        E, g, ci = cache
        dtok = self.integrator.backward(df, ci)
        return g[:, None] * dtok, np.sum(dtok * E, axis=1)

    def forward_task(self, expert_outputs, stats, task_id):
        g, cg = self.gate.forward(gate_features(stats), task_id)
        out, ci = self.integrate(expert_outputs, g)
        return out, (cg, ci)

    def backward_task(self, df, cache):
        """Returns d expert_outputs; gate/integrator gradients are accumulated."""
        cg, ci = cache
        dE, dg = self.integrate_backward(df, ci)
        self.gate.backward(dg, cg)
        return dE

    def forward(self, beats, rr_ms, stats, task_id):
        E, ce = self.experts.forward(beats, rr_ms)
        out, ct = self.forward_task(E, stats, task_id)
        return (out.f_periodic, out), (ce, ct)

    def backward(self, df, cache):
        if isinstance(df, tuple):
            df = df[0]
        ce, ct = cache
        self.experts.backward(self.backward_task(df, ct), ce)
        return None

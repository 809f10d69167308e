"""Parameterised layers built on the kernels in :mod:`ecgmoe.nn.core`."""

from __future__ import annotations

import math

import numpy as np

from ..errors import InvalidHeads, ShapeMismatch
from .core import (
    Module,
    Parameter,
    conv1d_backward,
    conv1d_forward,
    linear_backward,
    linear_forward,
    softmax,
    softmax_backward,
)


# Small positive bias for conv layers feeding a relu: keeps pre-activations off
# the exact kink when every input in a window is zero.
RELU_BIAS = 0.01


def _init(rng, shape, fan_in, gain=1.0):
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)


class Linear(Module):
    def __init__(self, name, d_in, d_out, rng, bias=True, gain=1.0):
        self.W = Parameter(f"{name}.W", _init(rng, (d_out, d_in), d_in, gain))
        self.b = Parameter(f"{name}.b", np.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear_forward(x, self.W.value, None if self.b is None else self.b.value)

    def backward(self, dy, cache):
        dx, dW, db = linear_backward(dy, cache)
        self.W.accumulate(dW)
        if self.b is not None:
            self.b.accumulate(db)
        return dx


class Conv1d(Module):
    def __init__(self, name, c_in, c_out, kernel_size, rng, stride=1, dilation=1, padding="same", gain=1.0,
                 bias_init=0.0):
        self.kernels = Parameter(
            f"{name}.kernels", _init(rng, (c_out, c_in, kernel_size), c_in * kernel_size, gain)
        )
        self.bias = Parameter(f"{name}.bias", np.full(c_out, float(bias_init)))
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel_size - 1) // 2 if padding == "same" else int(padding)

    def forward(self, x):
        return conv1d_forward(x, self.kernels.value, self.bias.value, self.stride, self.dilation, self.padding)

    def backward(self, dy, cache):
        dx, dW, db = conv1d_backward(dy, cache)
        self.kernels.accumulate(dW)
        self.bias.accumulate(db)
        return dx


class MultiHeadAttention(Module):
    """Scaled dot-product attention with learned Q/K/V/output projections.

    ``forward(q_in [nq, d], k_in [nk, d], v_in [nk, d])`` returns
    ``((output [nq, d], weights [h, nq, nk]), cache)``. No positional
    encoding is applied, so permuting key/value rows permutes weight columns.
    """

    def __init__(self, name, d_model, n_heads, rng):
        if n_heads < 1 or d_model % n_heads:
            raise InvalidHeads(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.q = Linear(f"{name}.q", d_model, d_model, rng)
        self.k = Linear(f"{name}.k", d_model, d_model, rng)
        self.v = Linear(f"{name}.v", d_model, d_model, rng)
        self.o = Linear(f"{name}.o", d_model, d_model, rng)

    def _split(self, x):
        n = x.shape[0]
        return x.reshape(n, self.n_heads, -1).transpose(1, 0, 2)

    def _merge(self, t):
        return t.transpose(1, 0, 2).reshape(t.shape[1], self.d_model)

    def forward(self, q_in, k_in, v_in):
        d = self.d_model
        for label, t in (("query", q_in), ("key", k_in), ("value", v_in)):
            if t.ndim != 2 or t.shape[1] != d:
                raise ShapeMismatch(f"attention {label} input {t.shape} does not match d_model={d}")
        if k_in.shape[0] != v_in.shape[0]:
            raise ShapeMismatch(f"attention keys {k_in.shape} and values {v_in.shape} differ in length")
        Q, cq = self.q.forward(q_in)
        K, ck = self.k.forward(k_in)
        V, cv = self.v.forward(v_in)
        Qh, Kh, Vh = self._split(Q), self._split(K), self._split(V)
        scale = 1.0 / math.sqrt(d // self.n_heads)
        A = softmax(Qh @ Kh.transpose(0, 2, 1) * scale, axis=-1)
        Oh = A @ Vh
        O = Oh.transpose(1, 0, 2).reshape(q_in.shape[0], d)
        Y, co = self.o.forward(O)
        return (Y, A), (cq, ck, cv, co, Qh, Kh, Vh, A, scale)

    def backward(self, dY, cache):
        """Gradients for (q_in, k_in, v_in); the weights output is not differentiated."""
        if isinstance(dY, tuple):
            dY = dY[0]
        cq, ck, cv, co, Qh, Kh, Vh, A, scale = cache
        dO = self.o.backward(dY, co)
        dOh = self._split(dO)
        dA = dOh @ Vh.transpose(0, 2, 1)
        dVh = A.transpose(0, 2, 1) @ dOh
        dS = softmax_backward(dA, A, axis=-1) * scale
        dQh = dS @ Kh
        dKh = dS.transpose(0, 2, 1) @ Qh
        dq_in = self.q.backward(self._merge(dQh), cq)
        dk_in = self.k.backward(self._merge(dKh), ck)
        dv_in = self.v.backward(self._merge(dVh), cv)
        return dq_in, dk_in, dv_in


class LoraLayer(Module):
    """y = W x + b + (alpha / r) B (A x) with B zero-initialised.

    ``base_weight`` and ``base_bias`` may be shared between several adapters;
    set ``frozen`` on them to confine training to A and B.
    """

    def __init__(self, name, base_weight: Parameter, base_bias, rank, alpha, rng):
        d_out, d_in = base_weight.shape
        if not 1 <= rank <= min(d_in, d_out):
            raise ShapeMismatch(f"LoRA rank {rank} must lie in [1, min({d_in}, {d_out})]")
        self.base_weight = base_weight
        self.base_bias = base_bias
        self.rank = rank
        self.alpha = float(alpha)
        self.A = Parameter(f"{name}.A", _init(rng, (rank, d_in), d_in))
        self.B = Parameter(f"{name}.B", np.zeros((d_out, rank)))

    @property
    def scaling(self):
        return self.alpha / self.rank

    def forward(self, x):
        b = None if self.base_bias is None else self.base_bias.value
        y, cbase = linear_forward(x, self.base_weight.value, b)
        ax, ca = linear_forward(x, self.A.value)
        bax, cb = linear_forward(ax, self.B.value)
        return y + self.scaling * bax, (cbase, ca, cb)

    def backward(self, dy, cache):
        cbase, ca, cb = cache
        dx, dW, db = linear_backward(dy, cbase)
        self.base_weight.accumulate(dW)
        if self.base_bias is not None:
            self.base_bias.accumulate(db)
        dax, dB, _ = linear_backward(self.scaling * dy, cb)
        self.B.accumulate(dB)
        dx2, dA, _ = linear_backward(dax, ca)
        self.A.accumulate(dA)
        return dx + dx2


def lora_forward(layer: LoraLayer, x):
    return layer.forward(x)[0]

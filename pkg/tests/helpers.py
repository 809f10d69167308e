"""Module wrappers that expose single kernels to grad_check, plus shared case builders."""

import numpy as np

from ecgmoe.multimodel import adaptive_downsample, adaptive_downsample_backward
from ecgmoe.nn import losses
from ecgmoe.nn.core import (
    Module,
    Parameter,
    moving_average_backward,
    moving_average_forward,
    relu_backward,
    relu_forward,
    sigmoid,
    softmax,
    softmax_backward,
)
from ecgmoe.nn.layers import Conv1d, Linear, LoraLayer, MultiHeadAttention


class Fn(Module):
    """Parameter-free op: forward(x) -> y with an explicit backward."""

    def __init__(self, fwd, bwd):
        self._fwd, self._bwd = fwd, bwd

    def forward(self, *xs):
        return self._fwd(*xs)

    def backward(self, dy, cache):
        return self._bwd(dy, cache)


def softmax_op(axis=-1):
    def fwd(x):
        y = softmax(x, axis)
        return y, y

    return Fn(fwd, lambda dy, y: softmax_backward(dy, y, axis))


def relu_op():
    return Fn(lambda x: relu_forward(x), lambda dy, m: relu_backward(dy, m))


def sigmoid_op():
    def fwd(x):
        y = sigmoid(x)
        return y, y

    return Fn(fwd, lambda dy, y: dy * y * (1 - y))


def moving_average_op(window):
    return Fn(lambda x: moving_average_forward(x, window), moving_average_backward)


def downsample_op(factor):
    return Fn(lambda x: (adaptive_downsample(x, factor), x.shape[1]),
              lambda dy, T: adaptive_downsample_backward(dy, T, factor))


def loss_op(fn, *fixed):
    def fwd(x):
        value, g = fn(x, *fixed)
        return np.array([value]), g

    return Fn(fwd, lambda dy, g: dy[0] * g)


def nt_xent_op(temperature):
    def fwd(z1, z2):
        value, g1, g2 = losses.nt_xent(z1, z2, temperature)
        return np.array([value]), (g1, g2)

    return Fn(fwd, lambda dy, g: (dy[0] * g[0], dy[0] * g[1]))


class MhaProbe(Module):
    def __init__(self, mha):
        self.mha = mha

    def forward(self, q, k, v):
        return self.mha.forward(q, k, v)

    def backward(self, dy, cache):
        return self.mha.backward(dy, cache)


def op_cases(seed):
    """(label, module, inputs) for every differentiable kernel, drawn from one seed."""
    rng = np.random.default_rng(seed)
    n = rng.normal
    base = Parameter("base.W", n(size=(5, 6)), frozen=True)
    base_b = Parameter("base.b", n(size=5), frozen=True)
    lora = LoraLayer("lora", base, base_b, 2, 4.0, rng)
    lora.B.value[...] = n(size=lora.B.shape)  # a zero B would hide errors in dA
    y_bin = rng.integers(0, 2, size=7).astype(float)
    return [
        ("linear", Linear("lin", 6, 4, rng), (n(size=(3, 6)),)),
        ("conv1d", Conv1d("conv", 3, 4, 5, rng, stride=1, dilation=2), (n(size=(3, 40)),)),
        ("conv1d_strided", Conv1d("convs", 2, 3, 3, rng, stride=2, padding=1), (n(size=(2, 2, 21)),)),
        ("softmax", softmax_op(), (n(size=(4, 5)),)),
        ("relu", relu_op(), (n(size=(4, 9)),)),
        ("sigmoid", sigmoid_op(), (3 * n(size=(11,)),)),
        ("attention", MhaProbe(MultiHeadAttention("mha", 8, 2, rng)), (n(size=(3, 8)), n(size=(5, 8)), n(size=(5, 8)))),
        ("lora", lora, (n(size=(2, 6)),)),
        ("moving_average", moving_average_op(5), (n(size=(2, 30)),)),
        ("downsample", downsample_op(3), (n(size=(2, 31)),)),
        ("mae", loss_op(losses.mae, n(size=7)), (n(size=7),)),
        ("bce", loss_op(losses.bce_with_logits, y_bin), (2 * n(size=7),)),
        ("cross_entropy", loss_op(losses.cross_entropy, rng.integers(0, 5, size=4)), (n(size=(4, 5)),)),
        ("nt_xent", nt_xent_op(0.5), (n(size=(6, 4)), n(size=(6, 4)))),
    ]


def conv1d_reference(x, kernels, bias, stride, dilation, padding):
    """Triple loop over output channel, output position and kernel tap."""
    Cin, T = x.shape
    Cout, _, K = kernels.shape
    xp = np.zeros((Cin, T + 2 * padding))
    xp[:, padding : padding + T] = x
    T_out = (T + 2 * padding - dilation * (K - 1) - 1) // stride + 1
    y = np.zeros((Cout, T_out))
    for o in range(Cout):
        for t in range(T_out):
            acc = bias[o]
            for k in range(K):
                for c in range(Cin):
                    acc += kernels[o, c, k] * xp[c, t * stride + k * dilation]
            y[o, t] = acc
    return y


def f1_reference(pred, true):
    """F1 from the confusion counts by explicit enumeration."""
    tp = sum(1 for p, t in zip(pred, true) if p and t)
    fp = sum(1 for p, t in zip(pred, true) if p and not t)
    fn = sum(1 for p, t in zip(pred, true) if not p and t)
    if tp + fp + fn == 0:
        return 1.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def match(detected, truth, tol):
    """Greedy one-to-one matching within ``tol`` samples; returns (true positives, fp, fn)."""
    used = set()
    tp = 0
    for t in truth:
        best = None
        for i, d in enumerate(detected):
            if i not in used and abs(d - t) <= tol and (best is None or abs(d - t) < abs(detected[best] - t)):
                best = i
        if best is not None:
            used.add(best)
            tp += 1
    return tp, len(detected) - tp, len(truth) - tp

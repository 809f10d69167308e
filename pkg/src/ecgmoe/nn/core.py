"""Dense differentiable kernels with explicit forward/backward pairs.

Tensors are plain float64 ``numpy.ndarray`` values. Every ``*_forward``
returns ``(output, cache)``; the matching ``*_backward`` consumes the
upstream gradient and the cache and returns input and parameter gradients.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidHyper, ShapeMismatch


class Parameter:
    """A trainable array paired with its accumulated gradient."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name, value, frozen=False):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.frozen:
            self.grad += g

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        flag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


class Module:
    """Container of Parameters and sub-Modules.

    Subclasses implement ``forward(*inputs) -> (output, cache)`` and
    ``backward(d_output, cache) -> d_input`` (a tuple when there are several
    inputs); backward accumulates parameter gradients in place.
    """

    def named_parameters(self, prefix=""):
        seen = set()
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self):
        return sum(p.value.size for p in self.parameters())


def _walk(value, path, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield path, value
    elif isinstance(value, Module):
        for key, sub in vars(value).items():
            yield from _walk(sub, f"{path}.{key}", seen)
    elif isinstance(value, (list, tuple)):
        for i, sub in enumerate(value):
            yield from _walk(sub, f"{path}.{i}", seen)
    elif isinstance(value, dict):
        for key, sub in value.items():
            yield from _walk(sub, f"{path}.{key}", seen)


# ---- linear ---------------------------------------------------------------


def linear_forward(x, W, b=None):
    """y = x W^T + b for x of shape [..., in] and W of shape [out, in]."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeMismatch(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    y = x @ W.T
    if b is not None:
        y = y + b
    return y, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    dx = dy @ W
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0)
    return dx, dW, db


# ---- conv1d ---------------------------------------------------------------


def conv1d_output_length(T, K, stride=1, dilation=1, padding=0):
    return (T + 2 * padding - dilation * (K - 1) - 1) // stride + 1


def same_padding(K, dilation=1):
    return dilation * (K - 1) // 2


def conv1d_forward(x, kernels, bias=None, stride=1, dilation=1, padding=0):
    """Cross-correlation of x [Cin, T] (or [N, Cin, T]) with kernels [Cout, Cin, K]."""
    if stride < 1 or dilation < 1:
        raise InvalidHyper(f"conv1d: stride and dilation must be >= 1, got {stride}, {dilation}")
    if padding < 0:
        raise InvalidHyper(f"conv1d: padding must be >= 0, got {padding}")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or kernels.ndim != 3 or x.shape[1] != kernels.shape[1]:
        raise ShapeMismatch(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    N, Cin, T = x.shape
    Cout, _, K = kernels.shape
    T_out = conv1d_output_length(T, K, stride, dilation, padding)
    if T_out < 1:
        raise ShapeMismatch(
            f"conv1d: input length {T} too short for K={K}, dilation={dilation}, padding={padding}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    idx = stride * np.arange(T_out)[:, None] + dilation * np.arange(K)[None, :]
    cols = xp[:, :, idx]  # [N, Cin, T_out, K]
    cols2 = cols.transpose(0, 2, 1, 3).reshape(N * T_out, Cin * K)
    y = (cols2 @ kernels.reshape(Cout, Cin * K).T).reshape(N, T_out, Cout).transpose(0, 2, 1)
    if bias is not None:
        y = y + bias[None, :, None]
    if squeeze:
        y = y[0]
    cache = (cols2, xp.shape, kernels, stride, dilation, padding, T_out, squeeze)
    return y, cache


def conv1d_backward(dy, cache):
    cols2, xp_shape, kernels, stride, dilation, padding, T_out, squeeze = cache
    if squeeze:
        dy = dy[None]
    N, Cin, Tp = xp_shape
    Cout, _, K = kernels.shape
    dy2 = dy.transpose(0, 2, 1).reshape(N * T_out, Cout)
    dW = (dy2.T @ cols2).reshape(Cout, Cin, K)
    db = dy.sum(axis=(0, 2))
    dcols = (dy2 @ kernels.reshape(Cout, Cin * K)).reshape(N, T_out, Cin, K)
    dxp = np.zeros(xp_shape)
    span = stride * (T_out - 1) + 1
    for k in range(K):
        off = k * dilation
        dxp[:, :, off : off + span : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    dx = dxp[:, :, padding : Tp - padding] if padding else dxp
    if squeeze:
        dx = dx[0]
    return dx, dW, db


# ---- activations and softmax ----------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ---- pooling ----------------------------------------------------------------


def adaptive_avg_pool_matrix(T, bins):
    """[bins x T] averaging matrix; bin i covers [floor(i*T/bins), ceil((i+1)*T/bins))."""
    M = np.zeros((bins, T))
    for i in range(bins):
        lo = (i * T) // bins
        hi = -((-(i + 1) * T) // bins)
        M[i, lo:hi] = 1.0 / (hi - lo)
    return M


def moving_average_forward(x, window):
    """Centred moving average along the last axis, edges replicated."""
    half = window // 2
    xp = np.concatenate(
        [np.repeat(x[..., :1], half, axis=-1), x, np.repeat(x[..., -1:], window - 1 - half, axis=-1)],
        axis=-1,
    )
    c = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(xp, axis=-1)], axis=-1)
    T = x.shape[-1]
    return (c[..., window : window + T] - c[..., :T]) / window, (T, window)


def moving_average_backward(dy, cache):
    T, window = cache
    half = window // 2
    # adjoint of the windowed sum: each padded position collects the outputs covering it
    c = np.concatenate([np.zeros(dy.shape[:-1] + (1,)), np.cumsum(dy, axis=-1)], axis=-1)
    j = np.arange(T + window - 1)
    lo = np.clip(j - window + 1, 0, T)
    hi = np.clip(j + 1, 0, T)
    dxp = (c[..., hi] - c[..., lo]) / window
    dx = dxp[..., half : half + T].copy()
    dx[..., 0] += dxp[..., :half].sum(axis=-1)
    dx[..., -1] += dxp[..., half + T :].sum(axis=-1)
    return dx

"""Scalar losses. Each returns ``(value, gradient w.r.t. the first argument)``;
``nt_xent`` returns gradients for both embedding batches."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidHyper, ShapeMismatch
from .core import log_softmax, sigmoid, softmax


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")


def mae(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target, "mae")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def bce_with_logits(logits, target):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_same(z, y, "bce_with_logits")
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(loss)), (sigmoid(z) - y) / z.size


def cross_entropy(logits, classes):
    """Mean negative log-likelihood; logits [N, K] (or [K]) and integer classes [N] (or scalar)."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    c = np.atleast_1d(np.asarray(classes)).astype(np.int64)
    if z.ndim != 2 or c.shape != (z.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {np.shape(logits)} vs classes {np.shape(classes)}")
    if np.any(c < 0) or np.any(c >= z.shape[1]):
        raise ShapeMismatch(f"cross_entropy: class index out of range [0, {z.shape[1]})")
    n = z.shape[0]
    lp = log_softmax(z, axis=1)
    loss = -lp[np.arange(n), c].mean()
    grad = softmax(z, axis=1)
    grad[np.arange(n), c] -= 1.0
    grad /= n
    return float(max(loss, 0.0)), grad[0] if single else grad


def nt_xent(z1, z2, temperature=0.5):
    """Normalised-temperature cross entropy over 2N embeddings.

    Rows (z1[i], z2[i]) are positive pairs; every other row in the joint
    batch is a negative. Embeddings are L2-normalised first.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    _check_same(z1, z2, "nt_xent")
    if z1.ndim != 2 or z1.shape[0] < 2:
        raise ShapeMismatch(f"nt_xent needs a [N >= 2, d] batch, got {z1.shape}")
    if not temperature > 0:
        raise InvalidHyper(f"temperature must be positive, got {temperature}")
    n = z1.shape[0]
    z = np.concatenate([z1, z2], axis=0)
    norms = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
    norms = np.maximum(norms, 1e-12)
    u = z / norms
    s = (u @ u.T) / temperature
    np.fill_diagonal(s, -np.inf)
    pos = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    lp = log_softmax(s, axis=1)
    m = 2 * n
    loss = -lp[np.arange(m), pos].mean()

    # d loss / d s
    p = np.exp(lp)
    ds = p.copy()
    ds[np.arange(m), pos] -= 1.0
    ds /= m
    ds /= temperature
    du = (ds + ds.T) @ u
    # through the row normalisation u = z / |z|
    dz = (du - u * np.sum(du * u, axis=1, keepdims=True)) / norms
    return float(loss), dz[:n], dz[n:]

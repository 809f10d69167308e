"""Multi-extractor temporal branch.

Five small encoders, each standing in for a family of time-series models,
read an adaptively downsampled copy of the signal and end in a fixed-size
feature vector. Each vector is projected by its own affine map and the
results are concatenated into one representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import InvalidHyper, ShapeMismatch
from .nn.core import (
    Module,
    adaptive_avg_pool_matrix,
    moving_average_backward,
    moving_average_forward,
    relu_backward,
    relu_forward,
)
from .nn.layers import RELU_BIAS, Conv1d, Linear, MultiHeadAttention

EXTRACTOR_KINDS = ("spectral_fold", "linear_decomp", "patch_transformer", "decomp_attention", "conv_encoder")
DEFAULT_DOWNSAMPLE = {
    "spectral_fold": 1,
    "linear_decomp": 1,
    "patch_transformer": 2,
    "decomp_attention": 2,
    "conv_encoder": 4,
}
MIN_LENGTH = 64


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str
    downsample_factor: int = 1
    output_dim: int = 64

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise InvalidHyper(f"unknown extractor kind {self.kind!r}; expected one of {EXTRACTOR_KINDS}")
        if self.downsample_factor < 1:
            raise InvalidHyper(f"downsample_factor must be >= 1, got {self.downsample_factor}")
        if self.output_dim < 1:
            raise InvalidHyper(f"output_dim must be >= 1, got {self.output_dim}")


def default_extractor_specs(output_dim=64):
    return [ExtractorSpec(k, DEFAULT_DOWNSAMPLE[k], output_dim) for k in EXTRACTOR_KINDS]


@dataclass
class MultiModelOutput:
    per_extractor: List[np.ndarray]
    fused: np.ndarray


# ---- adaptive downsampling --------------------------------------------------


def adaptive_downsample(x, factor):
    """Non-overlapping mean pooling along time; a trailing partial window is
    averaged over its actual length."""
    if int(factor) != factor or factor < 1:
        raise InvalidHyper(f"downsample factor must be an integer >= 1, got {factor}")
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    C, T = x.shape
    n_full = T // factor
    parts = [x[:, : n_full * factor].reshape(C, n_full, factor).mean(axis=2)]
    if T % factor:
        parts.append(x[:, n_full * factor :].mean(axis=1, keepdims=True))
    return np.concatenate(parts, axis=1)


def adaptive_downsample_backward(dy, T, factor):
    if factor == 1:
        return dy.copy()
    C = dy.shape[0]
    n_full = T // factor
    dx = np.empty((C, T))
    dx[:, : n_full * factor] = np.repeat(dy[:, :n_full] / factor, factor, axis=1)
    rem = T - n_full * factor
    if rem:
        dx[:, n_full * factor :] = dy[:, n_full:] / rem
    return dx


# ---- shared pieces ------------------------------------------------------------


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class PatchAttentionEncoder(Module):
    """Non-overlapping patches -> linear embedding -> one residual
    self-attention block -> mean over patches."""

    def __init__(self, name, n_leads, patch, d_model, heads, rng):
        self.patch = patch
        self.d_model = d_model
        self.embed = Linear(f"{name}.embed", n_leads * patch, d_model, rng)
        self.attn = MultiHeadAttention(f"{name}.attn", d_model, heads, rng)

    def forward(self, x):
        C, T = x.shape
        n = T // self.patch
        if n < 1:
            raise ShapeMismatch(f"input length {T} shorter than one patch of {self.patch}")
        tokens = x[:, : n * self.patch].reshape(C, n, self.patch).transpose(1, 0, 2).reshape(n, C * self.patch)
        e, ce = self.embed.forward(tokens)
        h0 = e + sinusoidal_positions(n, self.d_model)
        (a, _), ca = self.attn.forward(h0, h0, h0)
        h = h0 + a
        return h.mean(axis=0), (C, T, n, ce, ca)

    def backward(self, dy, cache):
        C, T, n, ce, ca = cache
        dh = np.broadcast_to(dy / n, (n, self.d_model))
        dq, dk, dv = self.attn.backward(dh, ca)
        dh0 = dh + dq + dk + dv
        dtok = self.embed.backward(dh0, ce)
        dx = np.zeros((C, T))
        dx[:, : n * self.patch] = dtok.reshape(n, C, self.patch).transpose(1, 0, 2).reshape(C, n * self.patch)
        return dx


# ---- the five extractors ---------------------------------------------------------


class SpectralFoldExtractor(Module):
    """Magnitude spectrum picks the dominant period; the signal is folded at
    that period and averaged across cycles, then convolved and pooled."""

    def __init__(self, n_leads, output_dim, rng, hidden=16, kernel=5, min_period=4):
        self.min_period = min_period
        self.conv = Conv1d("spectral_fold.conv", n_leads, hidden, kernel, rng, gain=math.sqrt(2), bias_init=RELU_BIAS)
        self.out = Linear("spectral_fold.out", hidden, output_dim, rng)

    def dominant_period(self, x):
        """Period (in samples) of the largest non-DC spectral peak of the lead mean."""
        m = np.asarray(x).mean(axis=0)
        T = len(m)
        mag = np.abs(np.fft.rfft(m - m.mean()))
        k_lo = 2
        k_hi = max(k_lo, min(len(mag) - 1, T // self.min_period))
        k = k_lo + int(np.argmax(mag[k_lo : k_hi + 1]))
        return max(self.min_period, min(T // 2, int(round(T / k))))

    def forward(self, x):
        C, T = x.shape
        p = self.dominant_period(x)
        n = T // p
        folded = x[:, : n * p].reshape(C, n, p).mean(axis=1)
        h, cc = self.conv.forward(folded)
        a, mask = relu_forward(h)
        pooled = a.mean(axis=1)
        y, co = self.out.forward(pooled)
        return y, (C, T, p, n, cc, mask, co)

    def backward(self, dy, cache):
        C, T, p, n, cc, mask, co = cache
        dpooled = self.out.backward(dy, co)
        da = np.broadcast_to(dpooled[:, None] / mask.shape[1], mask.shape)
        dfold = self.conv.backward(relu_backward(da, mask), cc)
        dx = np.zeros((C, T))
        dx[:, : n * p] = np.tile(dfold / n, (1, n))
        return dx


class LinearDecompExtractor(Module):
    """Moving-average trend / residual split; each component is pooled to a
    fixed number of bins and mapped linearly; the two maps are summed."""

    def __init__(self, n_leads, output_dim, rng, window=25, bins=32):
        self.window = window
        self.bins = bins
        self.trend_map = Linear("linear_decomp.trend", n_leads * bins, output_dim, rng)
        self.resid_map = Linear("linear_decomp.resid", n_leads * bins, output_dim, rng)
        self._pools = {}

    def _pool(self, T):
        if T not in self._pools:
            self._pools[T] = adaptive_avg_pool_matrix(T, self.bins)
        return self._pools[T]

    def decompose(self, x):
        trend, cma = moving_average_forward(x, min(self.window, x.shape[1]))
        return trend, x - trend, cma

    def forward(self, x):
        P = self._pool(x.shape[1])
        trend, resid, cma = self.decompose(x)
        yt, ct = self.trend_map.forward((trend @ P.T).ravel())
        yr, cr = self.resid_map.forward((resid @ P.T).ravel())
        return yt + yr, (x.shape, P, cma, ct, cr, resid)

    def backward(self, dy, cache):
        shape, P, cma, ct, cr, _ = cache
        C = shape[0]
        dtrend = self.trend_map.backward(dy, ct).reshape(C, self.bins) @ P
        dresid = self.resid_map.backward(dy, cr).reshape(C, self.bins) @ P
        return dresid + moving_average_backward(dtrend - dresid, cma)


class PatchTransformerExtractor(Module):
    def __init__(self, n_leads, output_dim, rng, patch=16, d_model=32, heads=2):
        self.encoder = PatchAttentionEncoder("patch_transformer", n_leads, patch, d_model, heads, rng)
        self.out = Linear("patch_transformer.out", d_model, output_dim, rng)

    def forward(self, x):
        h, ce = self.encoder.forward(x)
        y, co = self.out.forward(h)
        return y, (ce, co)

    def backward(self, dy, cache):
        ce, co = cache
        return self.encoder.backward(self.out.backward(dy, co), ce)


class DecompAttentionExtractor(Module):
    """Trend/seasonal split; attention over seasonal patches plus a linear
    read-out of the pooled trend."""

    def __init__(self, n_leads, output_dim, rng, window=25, patch=16, d_model=32, heads=2, trend_bins=8):
        self.window = window
        self.trend_bins = trend_bins
        self.encoder = PatchAttentionEncoder("decomp_attention", n_leads, patch, d_model, heads, rng)
        self.out = Linear("decomp_attention.out", d_model, output_dim, rng)
        self.trend_map = Linear("decomp_attention.trend", n_leads * trend_bins, output_dim, rng)

    def forward(self, x):
        C, T = x.shape
        trend, cma = moving_average_forward(x, min(self.window, T))
        seasonal = x - trend
        h, ce = self.encoder.forward(seasonal)
        ys, co = self.out.forward(h)
        P = adaptive_avg_pool_matrix(T, self.trend_bins)
        yt, ct = self.trend_map.forward((trend @ P.T).ravel())
        return ys + yt, (C, P, cma, ce, co, ct)

    def backward(self, dy, cache):
        C, P, cma, ce, co, ct = cache
        dseason = self.encoder.backward(self.out.backward(dy, co), ce)
        dtrend = self.trend_map.backward(dy, ct).reshape(C, self.trend_bins) @ P
        return dseason + moving_average_backward(dtrend - dseason, cma)


class ConvEncoderExtractor(Module):
    def __init__(self, n_leads, output_dim, rng, widths=(16, 16, 32), kernels=(7, 5, 5)):
        chans = (n_leads,) + tuple(widths)
        self.convs = [
            Conv1d(f"conv_encoder.conv{i}", chans[i], chans[i + 1], kernels[i], rng, stride=2,
                   padding=kernels[i] // 2, gain=math.sqrt(2), bias_init=RELU_BIAS)
            for i in range(len(widths))
        ]
        self.out = Linear("conv_encoder.out", widths[-1], output_dim, rng)

    def forward(self, x):
        caches = []
        h = x
        for conv in self.convs:
            z, cc = conv.forward(h)
            h, mask = relu_forward(z)
            caches.append((cc, mask))
        pooled = h.mean(axis=1)
        y, co = self.out.forward(pooled)
        return y, (caches, h.shape, co)

    def backward(self, dy, cache):
        caches, hshape, co = cache
        dpooled = self.out.backward(dy, co)
        dh = np.broadcast_to(dpooled[:, None] / hshape[1], hshape)
        for conv, (cc, mask) in zip(reversed(self.convs), reversed(caches)):
            dh = conv.backward(relu_backward(dh, mask), cc)
        return dh


EXTRACTOR_CLASSES = {
    "spectral_fold": SpectralFoldExtractor,
    "linear_decomp": LinearDecompExtractor,
    "patch_transformer": PatchTransformerExtractor,
    "decomp_attention": DecompAttentionExtractor,
    "conv_encoder": ConvEncoderExtractor,
}


def build_extractor(spec: ExtractorSpec, n_leads, rng):
    return EXTRACTOR_CLASSES[spec.kind](n_leads, spec.output_dim, rng)


def extract(extractor, x_downsampled):
    """Run one extractor on an already-downsampled [C x T] signal."""
    return extractor.forward(np.asarray(x_downsampled, dtype=np.float64))[0]


def project_and_concat(outputs, projections):
    """concat_k(W_k F_k + b_k) for a list of feature vectors and (W_k, b_k) pairs."""
    if len(outputs) != len(projections):
        raise ShapeMismatch(f"{len(outputs)} extractor outputs but {len(projections)} projections")
    parts = []
    for f, (W, b) in zip(outputs, projections):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != len(f) or b.shape != (W.shape[0],):
            raise ShapeMismatch(f"projection W{W.shape}, b{b.shape} incompatible with feature of length {len(f)}")
        parts.append(W @ f + b)
    return np.concatenate(parts)


class MultiModelBranch(Module):
    """DS_k -> extractor_k -> affine projection, concatenated in the order given."""

    def __init__(self, specs, n_leads, rng):
        if not specs:
            raise InvalidHyper("the multi-model branch needs at least one extractor")
        self.specs = list(specs)
        self.extractors = [build_extractor(s, n_leads, rng) for s in self.specs]
        self.projections = [
            Linear(f"project.{i}.{s.kind}", s.output_dim, s.output_dim, rng) for i, s in enumerate(self.specs)
        ]

    @property
    def output_dim(self):
        return sum(s.output_dim for s in self.specs)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        T = x.shape[1]
        per, parts, caches = [], [], []
        for spec, ext, proj in zip(self.specs, self.extractors, self.projections):
            xd = adaptive_downsample(x, spec.downsample_factor)
            if xd.shape[1] < MIN_LENGTH:
                raise ShapeMismatch(
                    f"{spec.kind}: {xd.shape[1]} samples after downsampling by {spec.downsample_factor}; "
                    f"need at least {MIN_LENGTH}"
                )
            f, ce = ext.forward(xd)
            g, cp = proj.forward(f)
            per.append(f)
            parts.append(g)
            caches.append((ce, cp))
        fused = np.concatenate(parts)
        return MultiModelOutput(per, fused), (T, caches)

    def backward(self, dfused, cache):
        if isinstance(dfused, MultiModelOutput):
            dfused = dfused.fused
        T, caches = cache
        dx = 0.0
        offset = 0
        for spec, ext, proj, (ce, cp) in zip(self.specs, self.extractors, self.projections, caches):
            d = spec.output_dim
            df = proj.backward(dfused[offset : offset + d], cp)
            offset += d
            dxd = ext.backward(df, ce)
            dx = dx + adaptive_downsample_backward(dxd, T, spec.downsample_factor)
        return dx

"""Central finite-difference gradient checking for Modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidHyper


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    h: float
    errors: dict = field(default_factory=dict)
    skipped: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def worst(self):
        return max(self.errors, key=self.errors.get) if self.errors else None

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel. error {self.max_rel_error:.3e} "
            f"(tol {self.tol:g}, h {self.h:g}, worst {self.worst()}, skipped {self.skipped})"
        )


def _first(y):
    return y[0] if isinstance(y, tuple) else y


def _masks(cache, out):
    """Collect every boolean array (relu masks) reachable from a forward cache."""
    if isinstance(cache, np.ndarray):
        if cache.dtype == bool:
            out.append(cache)
    elif isinstance(cache, (tuple, list)):
        for c in cache:
            _masks(c, out)
    elif isinstance(cache, dict):
        for c in cache.values():
            _masks(c, out)
    return out


def _same_branches(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    module,
    inputs,
    h=1e-4,
    tol=1e-5,
    seed=0,
    max_entries=None,
    check_inputs=True,
    atol=None,
    select=None,
):
    """Compare analytic gradients of ``sum(R * module(inputs))`` with central differences.

    ``module`` must expose ``forward(*inputs) -> (y, cache)``,
    ``backward(dy, cache)`` and ``named_parameters()``. When ``y`` is a tuple
    only its first element enters the loss. The error per tensor is
    ``|analytic - numeric| / max(|numeric|, atol)`` in the 2-norm over the
    checked entries; at most ``max_entries`` random entries are checked per
    tensor. ``select`` maps the forward output to the array entering the
    loss (default: the output itself, or its first element for tuples).
    Frozen parameters are skipped. An entry whose +h or -h perturbation
    flips any boolean mask in the forward cache (a relu kink inside the
    stencil) has no meaningful difference quotient and is left out; the
    count lands in ``skipped``. The default ``atol`` sits a factor
    100 above the expected rounding noise of the difference quotient scaled by
    ``1/tol``, so tensors whose true gradient is zero cannot fail on noise.
    """
    if not 1e-6 <= h <= 1e-3:
        raise InvalidHyper(f"step h must lie in [1e-6, 1e-3], got {h}")
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    inputs = [np.array(x, dtype=np.float64) if isinstance(x, np.ndarray) else x for x in inputs]
    rng = np.random.default_rng(seed)
    pick = select or _first

    y, cache = module.forward(*inputs)
    y0 = pick(y)
    R = rng.normal(size=np.shape(y0))
    params = [(n, p) for n, p in module.named_parameters() if not p.frozen]
    for _, p in params:
        p.zero_grad()
    dx = module.backward(R, cache)
    if not isinstance(dx, tuple):
        dx = (dx,)

    base_masks = _masks(cache, [])

    def loss(track=False):
        out, c = module.forward(*inputs)
        value = float(np.sum(R * pick(out)))
        return (value, _masks(c, [])) if track else value

    if atol is None:
        scale = max(1.0, abs(loss()), float(np.sum(np.abs(R * y0))))
        atol = 100 * np.finfo(float).eps * scale / (h * tol)

    targets = [(name, p.value, p.grad.copy()) for name, p in params]
    if check_inputs:
        for i, (x, g) in enumerate(zip(inputs, dx)):
            if isinstance(x, np.ndarray) and g is not None and np.issubdtype(x.dtype, np.floating):
                targets.append((f"input{i}", x, np.asarray(g)))

    errors = {}
    skipped = 0
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        keep, numeric = [], []
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            lp, mp = loss(True)
            flat[k] = old - h
            lm, mm = loss(True)
            flat[k] = old
            if not (_same_branches(base_masks, mp) and _same_branches(base_masks, mm)):
                skipped += 1
                continue
            keep.append(k)
            numeric.append((lp - lm) / (2 * h))
        if not keep:
            continue
        numeric = np.array(numeric)
        a = analytic.reshape(-1)[keep]
        errors[name] = float(np.linalg.norm(a - numeric) / max(np.linalg.norm(numeric), atol))
    worst = max(errors.values()) if errors else 0.0
    for _, p in params:
        p.zero_grad()
    return GradCheckReport(worst, tol, h, errors, skipped)

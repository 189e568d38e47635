"""Finite-difference verification of analytic gradients.

The checks are independent of the autodiff engine: they rerun the forward
function with perturbed inputs and compare central differences against the
gradients produced by backward().
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """max |a - n| / max(floor, |a|, |n|); floor keeps tiny gradients honest."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_gradient(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar f() w.r.t. every element of t."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().data.item()
        flat[i] = orig - eps
        lo = f().data.item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_gradients(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-3,
) -> float:
    """Exhaustive per-element check; returns the max relative error over all tensors."""
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    out = f()
    out.backward()
    worst = 0.0
    for t in tensors:
        if t.grad is None:
            raise AssertionError("tensor received no gradient")
        numeric = numeric_gradient(f, t, eps)
        worst = max(worst, relative_error(t.grad, numeric, floor))
    return worst


def directional_check(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    eps: float = 1e-7,
    floor: float = 1e-3,
    allow_unused: bool = False,
    retries: int = 4,
) -> float:
    """Compare <grad, d> against a central difference along one random direction.

    Touches every element of every tensor in two forward passes, which keeps
    full-network checks tractable where per-element differencing is not.
    `allow_unused` treats tensors without a gradient as zero-gradient (for
    parameters a network computes but never consumes downstream).

    Central differences are invalid when the probe crosses a relu/max kink,
    so each direction is validated by agreement between step sizes eps and
    eps/2; a disagreeing (kink-grazing) direction is redrawn up to `retries`
    times before the discrepancy is reported as-is.
    """
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    out = f()
    out.backward()
    grads = []
    for t in tensors:
        if t.grad is None and not allow_unused:
            raise AssertionError("tensor received no gradient")
        grads.append(t.grad)
    originals = [t.data.copy() for t in tensors]

    def probe(directions, scale, step):
        for t, d in zip(tensors, directions):
            t.data = t.data + step * scale * d
        hi = f().data.item()
        for t, orig, d in zip(tensors, originals, directions):
            t.data = orig - step * scale * d
        lo = f().data.item()
        for t, orig in zip(tensors, originals):
            t.data = orig
        return (hi - lo) / (2.0 * step)

    err = np.inf
    for _ in range(max(1, retries)):
        directions = [rng.standard_normal(t.shape) for t in tensors]
        scale = 1.0 / np.sqrt(sum(float((d * d).sum()) for d in directions))
        analytic = sum(
            float((g * d).sum()) * scale for g, d in zip(grads, directions) if g is not None
        )
        fd_full = probe(directions, scale, eps)
        fd_half = probe(directions, scale, eps / 2.0)
        err = relative_error(np.array([analytic]), np.array([fd_half]), floor)
        consistent = abs(fd_full - fd_half) <= max(1e-7, 1e-3 * max(abs(fd_full), abs(fd_half), floor))
        if consistent:
            return err
    return err

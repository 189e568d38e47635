"""Differentiable spatial operators: convolution, pooling, resampling.

Convolutions are cross-correlations (no kernel flip) over channel-first
tensors without a batch axis: [C, H, W] or [C, D1, D2, D3]. The 2-D and 3-D
variants share one n-dimensional core built on im2col/col2im, and transposed
convolution reuses the same two kernels with the roles swapped, so the
forward of one is the adjoint of the other by construction.
"""

from __future__ import annotations

import itertools
from math import prod
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatchError
from .tensor import Tensor, _make, as_tensor


def _tuple(value, n: int) -> tuple[int, ...]:
    if isinstance(value, (tuple, list)):
        if len(value) != n:
            raise ShapeMismatchError(f"expected {n} entries, got {value}")
        return tuple(int(v) for v in value)
    return (int(value),) * n


def _conv_out_size(n: int, k: int, s: int, p: int, d: int) -> int:
    out = (n + 2 * p - d * (k - 1) - 1) // s + 1
    if out < 1:
        raise ShapeMismatchError(
            f"convolution output collapses: extent {n}, kernel {k}, stride {s}, pad {p}, dilation {d}"
        )
    return out


def _offset_slices(kernel, stride, dilation, out_spatial):
    for offsets in itertools.product(*[range(k) for k in kernel]):
        yield tuple(
            slice(o * d, o * d + s * (n - 1) + 1, s)
            for o, d, s, n in zip(offsets, dilation, stride, out_spatial)
        )


def _im2col(xp: np.ndarray, kernel, stride, dilation, out_spatial) -> np.ndarray:
    """[C, *padded] -> [C * prod(kernel), prod(out_spatial)] patch matrix."""
    c = xp.shape[0]
    kvol = prod(kernel)
    length = prod(out_spatial)
    cols = np.empty((c, kvol, length), dtype=xp.dtype)
    for ki, sl in enumerate(_offset_slices(kernel, stride, dilation, out_spatial)):
        cols[:, ki, :] = xp[(slice(None),) + sl].reshape(c, length)
    return cols.reshape(c * kvol, length)


def _col2im(cols: np.ndarray, c: int, padded_spatial, kernel, stride, dilation, out_spatial) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back into a padded buffer."""
    kvol = prod(kernel)
    length = prod(out_spatial)
    view = cols.reshape(c, kvol, length)
    xp = np.zeros((c,) + tuple(padded_spatial), dtype=cols.dtype)
    for ki, sl in enumerate(_offset_slices(kernel, stride, dilation, out_spatial)):
        xp[(slice(None),) + sl] += view[:, ki, :].reshape((c,) + tuple(out_spatial))
    return xp


def _pad_spatial(x: np.ndarray, padding, value: float = 0.0) -> np.ndarray:
    if all(p == 0 for p in padding):
        return x
    widths = [(0, 0)] + [(p, p) for p in padding]
    return np.pad(x, widths, mode="constant", constant_values=value)


def _crop_spatial(xp: np.ndarray, padding) -> np.ndarray:
    if all(p == 0 for p in padding):
        return xp
    sl = (slice(None),) + tuple(slice(p, xp.shape[i + 1] - p) for i, p in enumerate(padding))
    return xp[sl]


def _conv_nd(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride, padding, dilation, nd: int) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != nd + 1 or weight.ndim != nd + 2:
        raise ShapeMismatchError(f"conv{nd}d expects [C,*spatial] input and [Co,Ci,*k] weight, got {x.shape} / {weight.shape}")
    c_out, c_in = weight.shape[:2]
    if x.shape[0] != c_in:
        raise ShapeMismatchError(f"input has {x.shape[0]} channels, weight expects {c_in}")
    kernel = weight.shape[2:]
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    dilation = _tuple(dilation, nd)
    out_spatial = tuple(
        _conv_out_size(n, k, s, p, d)
        for n, k, s, p, d in zip(x.shape[1:], kernel, stride, padding, dilation)
    )
    length = prod(out_spatial)

    xp = _pad_spatial(x.data, padding)
    cols = _im2col(xp, kernel, stride, dilation, out_spatial)
    w2 = weight.data.reshape(c_out, c_in * prod(kernel))
    out2 = w2 @ cols
    if bias is not None:
        out2 = out2 + bias.data[:, None]
    out = out2.reshape((c_out,) + out_spatial)

    padded_spatial = xp.shape[1:]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(c_out, length)
        dw = (g2 @ cols.T).reshape(weight.shape)
        dcols = w2.T @ g2
        dxp = _col2im(dcols, c_in, padded_spatial, kernel, stride, dilation, out_spatial)
        dx = _crop_spatial(dxp, padding)
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=1)

    return _make(out, parents, vjp)


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    return _conv_nd(x, weight, bias, stride, padding, dilation, nd=2)


def conv3d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    return _conv_nd(x, weight, bias, stride, padding, dilation, nd=3)


def _conv_transpose_nd(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride, padding, output_padding, nd: int) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != nd + 1 or weight.ndim != nd + 2:
        raise ShapeMismatchError(
            f"conv_transpose{nd}d expects [C,*spatial] input and [Ci,Co,*k] weight, got {x.shape} / {weight.shape}"
        )
    c_in, c_out = weight.shape[:2]
    if x.shape[0] != c_in:
        raise ShapeMismatchError(f"input has {x.shape[0]} channels, weight expects {c_in}")
    kernel = weight.shape[2:]
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    output_padding = _tuple(output_padding, nd)
    dilation = (1,) * nd
    if any(op >= s for op, s in zip(output_padding, stride)):
        raise ShapeMismatchError("output_padding must be smaller than stride")
    in_spatial = x.shape[1:]
    out_spatial = tuple(
        (n - 1) * s - 2 * p + (k - 1) + 1 + op
        for n, s, p, k, op in zip(in_spatial, stride, padding, kernel, output_padding)
    )
    if any(n < 1 for n in out_spatial):
        raise ShapeMismatchError(f"transposed convolution output collapses: {out_spatial}")
    padded_out = tuple(n + 2 * p for n, p in zip(out_spatial, padding))
    length = prod(in_spatial)
    kvol = prod(kernel)

    w2 = weight.data.reshape(c_in, c_out * kvol)
    x2 = x.data.reshape(c_in, length)
    cols = w2.T @ x2
    outp = _col2im(cols, c_out, padded_out, kernel, stride, dilation, in_spatial)
    out = _crop_spatial(outp, padding)
    if bias is not None:
        out = out + bias.data.reshape((c_out,) + (1,) * nd)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gp = _pad_spatial(g, padding)
        gcols = _im2col(gp, kernel, stride, dilation, in_spatial)
        dx = (w2 @ gcols).reshape(x.shape)
        dw = (x2 @ gcols.T).reshape(weight.shape)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=tuple(range(1, nd + 1)))

    return _make(out, parents, vjp)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    return _conv_transpose_nd(x, weight, bias, stride, padding, output_padding, nd=2)


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0, output_padding=0) -> Tensor:
    return _conv_transpose_nd(x, weight, bias, stride, padding, output_padding, nd=3)


def max_pool2d(x, window, stride=None, padding=0) -> Tensor:
    """Max over windows; ties route the gradient to the first element in scan order."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"max_pool2d expects [C, H, W], got {x.shape}")
    kh, kw = _tuple(window, 2)
    sh, sw = _tuple(stride if stride is not None else (kh, kw), 2)
    ph, pw = _tuple(padding, 2)
    c, h, w = x.shape
    ho = _conv_out_size(h, kh, sh, ph, 1)
    wo = _conv_out_size(w, kw, sw, pw, 1)
    xp = _pad_spatial(x.data, (ph, pw), value=-np.inf)
    best = np.full((c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((c, ho, wo), dtype=np.int64)
    slices = list(_offset_slices((kh, kw), (sh, sw), (1, 1), (ho, wo)))
    for ki, sl in enumerate(slices):
        cand = xp[(slice(None),) + sl]
        better = cand > best
        best = np.where(better, cand, best)
        arg[better] = ki

    def vjp(g):
        dxp = np.zeros_like(xp)
        for ki, sl in enumerate(slices):
            dxp[(slice(None),) + sl] += g * (arg == ki)
        return (_crop_spatial(dxp, (ph, pw)),)

    return _make(best, (x,), vjp)


def avg_pool2d(x, window) -> Tensor:
    """Non-overlapping average pooling; the window clamps to the input extent
    and trailing remainder rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"avg_pool2d expects [C, H, W], got {x.shape}")
    kh, kw = _tuple(window, 2)
    c, h, w = x.shape
    kh, kw = min(kh, h), min(kw, w)
    ho, wo = h // kh, w // kw
    xc = x.data[:, : ho * kh, : wo * kw].reshape(c, ho, kh, wo, kw)
    out = xc.mean(axis=(2, 4))

    def vjp(g):
        dx = np.zeros_like(x.data)
        block = np.broadcast_to(g[:, :, None, :, None], (c, ho, kh, wo, kw)) / (kh * kw)
        dx[:, : ho * kh, : wo * kw] = block.reshape(c, ho * kh, wo * kw)
        return (dx,)

    return _make(out, (x,), vjp)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Align-corners linear interpolation matrix [n_out, n_in]."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        a[:, 0] = 1.0
        return a
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    a[rows, i0] = 1.0 - frac
    a[rows, i0 + 1] += frac
    return a


def upsample_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of a [C, H, W] tensor."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatchError(f"upsample_bilinear expects [C, H, W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(f"output dims must be >= 1, got ({out_h}, {out_w})")
    c, h, w = x.shape
    ah = _interp_matrix(h, out_h, x.dtype)
    aw = _interp_matrix(w, out_w, x.dtype)
    t = np.moveaxis(np.tensordot(ah, x.data, axes=(1, 1)), 0, 1)  # [C, out_h, W]
    out = t @ aw.T

    def vjp(g):
        t2 = np.moveaxis(np.tensordot(ah, g, axes=(0, 1)), 0, 1)  # [C, H, out_w]
        return (t2 @ aw,)

    return _make(out, (x,), vjp)


_NEIGHBOR_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _bilinear_terms(h: int, w: int, us: np.ndarray, vs: np.ndarray, valid: np.ndarray):
    """Per-neighbor flat indices and effective weights with zero padding."""
    x0 = np.floor(us).astype(np.int64)
    y0 = np.floor(vs).astype(np.int64)
    fu = us - x0
    fv = vs - y0
    terms = []
    for dy, dx in _NEIGHBOR_OFFSETS:
        xi = x0 + dx
        yi = y0 + dy
        wu = fu if dx else 1.0 - fu
        wv = fv if dy else 1.0 - fv
        ok = valid & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(ok, yi * w + xi, 0)
        terms.append((idx, np.where(ok, wu * wv, 0.0)))
    return terms


def gather_bilinear(fmap, us, vs, valid=None) -> Tensor:
    """Sample a [C, H, W] map at N subpixel (u, v) locations -> [C, N].

    u is the column coordinate and v the row coordinate. Neighbors outside
    [0, W-1] x [0, H-1] contribute zero; locations with valid=False return an
    all-zero column. Differentiable with respect to the feature map only.
    """
    fmap = as_tensor(fmap)
    if fmap.ndim != 3:
        raise ShapeMismatchError(f"gather_bilinear expects [C, H, W], got {fmap.shape}")
    us = np.asarray(us, dtype=np.float64).ravel()
    vs = np.asarray(vs, dtype=np.float64).ravel()
    if us.shape != vs.shape:
        raise ShapeMismatchError("u and v coordinate arrays must match")
    if valid is None:
        valid = np.ones(us.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool).ravel()
    c, h, w = fmap.shape
    flat = fmap.data.reshape(c, h * w)
    terms = _bilinear_terms(h, w, us, vs, valid)
    out = np.zeros((c, us.size), dtype=fmap.dtype)
    for idx, wgt in terms:
        out += flat[:, idx] * wgt

    def vjp(g):
        df = np.zeros((c, h * w), dtype=fmap.dtype)
        for idx, wgt in terms:
            contrib = g * wgt
            for ci in range(c):
                df[ci] += np.bincount(idx, weights=contrib[ci], minlength=h * w)
        return (df.reshape(fmap.shape),)

    return _make(out, (fmap,), vjp)


def bilinear_sample(fmap, u: float, v: float) -> Tensor:
    """Sample one subpixel location from a [C, H, W] map -> [C] vector."""
    col = gather_bilinear(fmap, np.array([u]), np.array([v]))
    return col.reshape((int(col.shape[0]),))

"""Differentiable ops.

Only what the network needs: elementwise add/scale, reshape/transpose,
concat and row gather, linear, conv2d, relu, maxpool2d, adaptive max pooling
over arbitrary windows, and the two losses.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from vmrn.autodiff.tensor import ShapeError, Tensor, as_tensor


class InvalidInputError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, parents=(a, b), backward=backward)


def mul(a, c) -> Tensor:
    """Multiply by a constant (python or numpy scalar / array)."""
    a = as_tensor(a)
    if isinstance(c, Tensor):
        raise TypeError("mul() scales by a constant; tensor products go through linear/conv2d")
    c = np.asarray(c, dtype=a.dtype)

    def backward(g):
        a.accumulate(_unbroadcast(g * c, a.shape))

    return Tensor(a.data * c, parents=(a,), backward=backward)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def backward(g):
        a.accumulate(np.broadcast_to(g, a.shape))

    return Tensor(np.asarray(a.data.sum()), parents=(a,), backward=backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate(g.transpose(inv))

    return Tensor(a.data.transpose(axes), parents=(a,), backward=backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tensors, backward=backward)


def take_rows(a, index) -> Tensor:
    """``a[index]`` along axis 0; repeated rows accumulate gradient."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        a.accumulate(out)

    return Tensor(a.data[index], parents=(a,), backward=backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * mask)

    return Tensor(x.data * mask, parents=(x,), backward=backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``x`` of shape (N, in) and ``w`` of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    parents = [x, w]
    out = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents.append(b)

    def backward(g):
        x.accumulate(g @ w.data)
        w.accumulate(g.T @ x.data)
        if b is not None:
            b.accumulate(g.sum(axis=0))

    return Tensor(out, parents=parents, backward=backward)


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (O, C, kh, kw) kernels via im2col."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        out += b.data
        parents.append(b)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if w.requires_grad:
            w.accumulate((gmat.T @ cols).reshape(w.shape))
        if b is not None:
            b.accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            x.accumulate(gxp)

    return Tensor(np.ascontiguousarray(out), parents=parents, backward=backward)


# forward builds the graph node; backward runs when the graph is walked
conv2d_fwd_bwd = conv2d


def maxpool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over NCHW input; the gradient goes to the first maximum."""
    x = as_tensor(x)
    stride = stride or kernel
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than kernel {kernel}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kernel)
        for i in range(kernel):
            for j in range(kernel):
                sel = (di == i) & (dj == j)
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * sel
        x.accumulate(gx)

    return Tensor(out, parents=(x,), backward=backward)


def adaptive_bins(n: int, out: int) -> list[tuple[int, int]]:
    """Half-open source intervals ``[floor(r*n/out), ceil((r+1)*n/out))``."""
    if n < 1 or out < 1:
        raise InvalidInputError(f"adaptive bins need n >= 1 and out >= 1, got n={n}, out={out}")
    return [((r * n) // out, -((-(r + 1) * n) // out)) for r in range(out)]


def _bin_index(start: int, n: int, out: int, width: int) -> np.ndarray:
    """(out, width) source indices per bin, padded by repeating the bin start."""
    idx = np.empty((out, width), dtype=np.intp)
    for r, (lo, hi) in enumerate(adaptive_bins(n, out)):
        span = np.arange(lo, hi)
        idx[r, : len(span)] = start + span
        idx[r, len(span) :] = start + lo
    return idx


def _max_bin_width(n: int, out: int) -> int:
    return max(hi - lo for lo, hi in adaptive_bins(n, out))


def roi_maxpool(features, windows, out_size: tuple[int, int]) -> Tensor:
    """Adaptive max pooling of many windows of an NCHW feature map.

    ``windows`` is an int array of rows ``(image, r0, r1, c0, c1)`` with
    half-open row/column ranges in feature cells. Output is (K, C, H, W).
    Overlapping windows and overlapping bins both accumulate gradient.
    """
    features = as_tensor(features)
    windows = np.asarray(windows, dtype=np.intp).reshape(-1, 5)
    if features.data.ndim != 4:
        raise ShapeError(f"roi_maxpool expects NCHW features, got {features.shape}")
    n, c, h, w = features.shape
    oh, ow = out_size
    k = len(windows)
    if k == 0:
        raise InvalidInputError("roi_maxpool needs at least one window")
    img, r0, r1, c0, c1 = windows.T
    if np.any(r1 <= r0) or np.any(c1 <= c0):
        raise InvalidInputError("roi_maxpool: empty window")
    if np.any(r0 < 0) or np.any(c0 < 0) or np.any(r1 > h) or np.any(c1 > w) or np.any(img < 0) or np.any(img >= n):
        raise InvalidInputError(f"roi_maxpool: window outside feature map of shape {features.shape}")
    kr = max(_max_bin_width(int(hh), oh) for hh in set((r1 - r0).tolist()))
    kc = max(_max_bin_width(int(ww), ow) for ww in set((c1 - c0).tolist()))
    rows = np.stack([_bin_index(int(a), int(b - a), oh, kr) for a, b in zip(r0, r1)])  # (K, H, kr)
    cols = np.stack([_bin_index(int(a), int(b - a), ow, kc) for a, b in zip(c0, c1)])  # (K, W, kc)
    rr = rows[:, :, None, :, None]  # K, H, 1, kr, 1
    cc = cols[:, None, :, None, :]  # K, 1, W, 1, kc
    ii = img[:, None, None, None, None]
    # advanced indices around a slice: result is (K, H, W, kr, kc, C)
    gathered = features.data[ii, :, rr, cc]
    gathered = gathered.reshape(k, oh, ow, kr * kc, c)
    arg = gathered.argmax(axis=3)  # K, H, W, C
    out = np.take_along_axis(gathered, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        src_r = np.broadcast_to(rr, (k, oh, ow, kr, kc)).reshape(k, oh, ow, kr * kc)
        src_c = np.broadcast_to(cc, (k, oh, ow, kr, kc)).reshape(k, oh, ow, kr * kc)
        pick_r = np.take_along_axis(src_r, arg, axis=3)  # K, H, W, C
        pick_c = np.take_along_axis(src_c, arg, axis=3)
        ch = np.arange(c)[None, None, None, :]
        lin = ((img[:, None, None, None] * c + ch) * h + pick_r) * w + pick_c
        gk = g.transpose(0, 2, 3, 1)
        flat = np.bincount(lin.ravel(), weights=gk.ravel(), minlength=n * c * h * w)
        features.accumulate(flat.reshape(n, c, h, w).astype(features.dtype, copy=False))

    return Tensor(out, parents=(features,), backward=backward)


def adaptive_maxpool(x, out_size: tuple[int, int]) -> Tensor:
    """Adaptive max pooling of a C x h x w tensor to C x H x W."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"adaptive_maxpool expects C x h x w input, got {x.shape}")
    c, h, w = x.shape
    if h < 1 or w < 1 or c < 1:
        raise InvalidInputError(f"adaptive_maxpool: empty input of shape {x.shape}")
    if out_size[0] < 1 or out_size[1] < 1:
        raise InvalidInputError(f"adaptive_maxpool: bad output size {out_size}")
    pooled = roi_maxpool(reshape(x, (1, c, h, w)), [(0, 0, h, 0, w)], out_size)
    return reshape(pooled, (c, out_size[0], out_size[1]))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target, weights=None) -> Tensor:
    """Weighted sum of ``-log softmax(logits)[target]``.

    ``logits`` may be a single K-vector with an integer target, or (M, K)
    rows with M targets and optional per-row weights.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.intp))
    m, kk = z.shape
    if t.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: {m} rows but {t.shape} targets")
    if np.any(t < 0) or np.any(t >= kk):
        raise InvalidInputError(f"target out of range [0, {kk}): {t.tolist()}")
    wts = np.ones(m, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    logp = log_softmax(z)
    per_row = -logp[np.arange(m), t]
    loss = np.asarray((wts * per_row).sum(), dtype=z.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(m), t] -= 1.0
        grad *= (wts * g)[:, None]
        logits.accumulate(grad[0] if single else grad)

    return Tensor(loss, parents=(logits,), backward=backward)


def cross_entropy_rows(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row cross entropy without building a graph (used for mining)."""
    logp = log_softmax(np.asarray(logits))
    return -logp[np.arange(len(target)), np.asarray(target, dtype=np.intp)]


def smooth_l1(pred, target, weights=None) -> Tensor:
    """Summed smooth-L1: ``0.5 d^2`` inside |d| < 1, ``|d| - 0.5`` outside."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: prediction {pred.shape} vs target {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    if weights is None:
        wts = np.ones_like(per)
    else:
        wts = np.broadcast_to(np.asarray(weights, dtype=pred.dtype), per.shape)
    loss = np.asarray((wts * per).sum(), dtype=pred.dtype)

    def backward(g):
        pred.accumulate(np.clip(d, -1.0, 1.0) * wts * g)

    return Tensor(loss, parents=(pred,), backward=backward)


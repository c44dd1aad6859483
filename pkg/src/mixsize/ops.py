"""Differentiable operations on :class:`~mixsize.tensor.Tensor` (NCHW layout)."""
from __future__ import annotations

from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = x.shape, x.dtype
    return record(np.asarray(x.data.sum(), dtype=dt), (x,),
                  lambda g: (np.broadcast_to(g, shape).astype(dt),), "sum")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` of shape [out, in]."""
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data
        inputs = (x, w, b)
    else:
        inputs = (x, w)

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        return grads + (g.sum(axis=0),) if b is not None else grads

    return record(out, inputs, bw, "linear")


# -- convolution ---------------------------------------------------------------

def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding via im2col + GEMM.

    The column matrix is laid out channel-major, [C*kh*kw, N*Ho*Wo], so both
    the gather and the col2im scatter move contiguous output rows.
    """
    xd, wd = x.data, w.data
    n, c, h, wid = xd.shape
    cout, cin, kh, kw = wd.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    if kh > h + 2 * pad or kw > wid + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wid + 2 * pad}")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wid, kw, stride, pad)
    xp = _pad_hw(xd, pad)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xd.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = wd.reshape(cout, -1)
    out = w2 @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gc = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gc @ cols.T).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ gc).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wid] if pad else gxp)
        grads = (gx, gw)
        return grads + (gc.sum(axis=1),) if b is not None else grads

    return record(out, inputs, bw, "conv2d")


# -- batch normalization -------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats=None, mode: str = "train",
                eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization.

    ``mode`` is ``"train"`` (batch statistics, EMA update of ``stats``),
    ``"eval"`` (stored statistics) or ``"capture"`` (batch statistics, exact
    aggregation into ``stats`` for calibration).
    """
    xd = x.data
    c = xd.shape[1]
    gshape = (1, c, 1, 1)
    if mode == "eval":
        if stats is None or not stats.initialized:
            from .calib import CalibrationRequiredError
            raise CalibrationRequiredError("batch-norm statistics are uninitialized; calibrate first")
        inv = 1.0 / np.sqrt(stats.var.astype(xd.dtype) + eps)
        scale = (gamma.data * inv).reshape(gshape)
        xhat = (xd - stats.mean.astype(xd.dtype).reshape(gshape)) * inv.reshape(gshape)
        out = xd * scale + (beta.data - stats.mean.astype(xd.dtype) * gamma.data * inv).reshape(gshape)

        def bw_eval(g):
            return (g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return record(out, (x, gamma, beta), bw_eval, "batchnorm2d_eval")

    m = xd.size // c
    if m < 2:
        raise ValueError("batch-norm in train mode needs at least 2 values per channel")
    mean = xd.mean(axis=(0, 2, 3))
    xc = xd - mean.reshape(gshape)
    var = np.einsum("nchw,nchw->c", xc, xc) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(gshape)
    out = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    if stats is not None:
        if mode == "train":
            stats.update_ema(mean, var, m, momentum)
        elif mode == "capture":
            stats.merge(mean, var, m)
        else:
            raise ValueError(f"unknown batch-norm mode {mode!r}")

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = np.einsum("nchw,nchw->c", g, xhat)
        gx = None
        if x.requires_grad:
            k = (gamma.data * inv / m).reshape(gshape)
            gx = k * (m * g - gbeta.reshape(gshape) - xhat * ggamma.reshape(gshape))
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), bw, "batchnorm2d")


# -- resizing ------------------------------------------------------------------

@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] bilinear weights, pixel-center aligned.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``.
    """
    if n_out <= 0:
        raise ValueError(f"output size must be positive, got {n_out}")
    if n_in < 1:
        raise ValueError("input size must be at least 1")
    a = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    a.flags.writeable = False
    return a


def _resize_array(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if (h_out, w_out) == (h, w):
        return x.copy()
    ah = interp_matrix(h, h_out).astype(x.dtype)
    aw = interp_matrix(w, w_out).astype(x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


def bilinear_resize(x: Tensor, size: Union[int, Tuple[int, int]]) -> Tensor:
    """Resize the last two axes to ``size`` (int for square output)."""
    h_out, w_out = (size, size) if np.isscalar(size) else size
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"output size must be positive, got {size}")
    xd = x.data
    h, w = xd.shape[-2:]
    out = _resize_array(xd, h_out, w_out)
    if (h_out, w_out) == (h, w):
        return record(out, (x,), lambda g: (g,), "bilinear_resize")
    ah = interp_matrix(h, h_out).astype(xd.dtype)
    aw = interp_matrix(w, w_out).astype(xd.dtype)
    return record(out, (x,), lambda g: (np.matmul(np.matmul(ah.T, g), aw),), "bilinear_resize")


def resize_array(x: np.ndarray, size) -> np.ndarray:
    """Non-differentiable bilinear resize of a raw array (same convention)."""
    h_out, w_out = (size, size) if np.isscalar(size) else size
    if h_out <= 0 or w_out <= 0:
        raise ValueError(f"output size must be positive, got {size}")
    return _resize_array(x, h_out, w_out)


# -- pooling and shape ops -----------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C, 1, 1] for any H, W >= 1."""
    n, c, h, w = x.shape
    return record(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                  lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),), "global_avg_pool")


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    xd = x.data
    n, c, h, w = xd.shape
    ho, wo = conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)
    win = sliding_window_view(xd, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(xd)
        di, dj = np.divmod(arg, kernel)
        ni, ci, oi, oj = np.indices(arg.shape)
        np.add.at(gx, (ni, ci, oi * stride + di, oj * stride + dj), g)
        return (gx,)

    return record(out, (x,), bw, "max_pool2d")


def pad(x: Tensor, p: int) -> Tensor:
    """Zero-pad the two spatial axes by ``p`` on every side."""
    if p < 0:
        raise ValueError("pad must be non-negative")
    h, w = x.shape[-2:]
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return record(np.pad(x.data, widths), (x,),
                  lambda g: (g[..., p:p + h, p:p + w],), "pad")


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or height < 1 or width < 1 or top + height > h or left + width > w:
        raise ValueError(f"crop window ({top}, {left}, {height}, {width}) outside {h}x{w}")
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., top:top + height, left:left + width] = g
        return (gx,)

    return record(x.data[..., top:top + height, left:left + width].copy(), (x,), bw, "crop")


def horizontal_flip(x: Tensor) -> Tensor:
    return record(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1],), "horizontal_flip")


# -- loss ----------------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch, log-sum-exp stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    lp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -lp[rows, labels].mean()

    def bw(g):
        p = np.exp(lp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")

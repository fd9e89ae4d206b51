"""Differentiable layer primitives: activations, convolutions, pooling, FFT.

Spatial ops accept ``C x H x W`` or batched ``N x C x H x W`` tensors.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Tensor, _result, as_tensor, stack

GELU_C = math.sqrt(2.0 / math.pi)


# -- activations ------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _result(
        ls, (x,), lambda g: (g - np.exp(ls) * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    t = np.tanh(GELU_C * (v + 0.044715 * v**3))

    def grad_fn(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result(0.5 * v * (1.0 + t), (x,), grad_fn, "gelu")


def lrelu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    return _result(
        np.where(pos, x.data, slope * x.data),
        (x,),
        lambda g: (np.where(pos, g, slope * g),),
        "lrelu",
    )


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- spatial ----------------------------------------------------------------
def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected C x H x W or N x C x H x W, got {x.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation (no kernel flip)."""
    xd, squeeze = _batched(x)
    n, c, h, wd = xd.shape
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernel must be D x C x k x k, got {w.shape}")
    d, wc, k, _ = w.shape
    if wc != c:
        raise DimensionError(f"kernel expects {wc} input channels, input has {c}")
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if pad < 0 or stride < 1:
        raise DimensionError("pad must be >= 0 and stride >= 1")
    span_h, span_w = h + 2 * pad - k, wd + 2 * pad - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"output extent not integral for H={h}, W={wd}, k={k}, stride={stride}, pad={pad}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)
    wm = w.data.reshape(d, -1)
    out = (cols @ wm.T).reshape(n, ho, wo, d).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None, None]
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, d)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if squeeze:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, grad_fn, "conv2d")


def avg_pool2d(x: Tensor, p: int) -> Tensor:
    *lead, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"pool size {p} does not divide {h}x{w}")
    out = x.data.reshape(*lead, h // p, p, w // p, p).mean(axis=(-3, -1))

    def grad_fn(g):
        return (np.repeat(np.repeat(g, p, axis=-2), p, axis=-1) / (p * p),)

    return _result(out, (x,), grad_fn, "avg_pool2d")


def upsample_nearest(x: Tensor, p: int) -> Tensor:
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, p, axis=-2), p, axis=-1)

    def grad_fn(g):
        return (g.reshape(*lead, h, p, w, p).sum(axis=(-3, -1)),)

    return _result(out, (x,), grad_fn, "upsample_nearest")


def sep_transposed_conv2d(
    x: Tensor, w_depth: Tensor, w_point: Tensor, p: int, bias: Tensor | None = None
) -> Tensor:
    """Depthwise transposed conv with stride = kernel = p, then 1x1 mixing.

    ``w_depth`` is C x p x p, ``w_point`` is D x C (output x input).
    """
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    if w_depth.shape != (c, p, p):
        raise DimensionError(f"depthwise kernel must be {(c, p, p)}, got {w_depth.shape}")
    if w_point.ndim != 2 or w_point.shape[1] != c:
        raise DimensionError(f"pointwise weights must be D x {c}, got {w_point.shape}")
    d = w_point.shape[0]
    up6 = xd[:, :, :, None, :, None] * w_depth.data[None, :, None, :, None, :]
    up = up6.reshape(n, c, h * p, w * p)
    out = np.einsum("dc,nchw->ndhw", w_point.data, up)
    if bias is not None:
        out = out + bias.data[:, None, None]
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        g_up = np.einsum("dc,ndhw->nchw", w_point.data, g4).reshape(n, c, h, p, w, p)
        gx = np.einsum("ncipjq,cpq->ncij", g_up, w_depth.data)
        gwd = np.einsum("ncipjq,ncij->cpq", g_up, xd)
        gwp = np.einsum("ndhw,nchw->dc", g4, up)
        grads = [gx[0] if squeeze else gx, gwd, gwp]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w_depth, w_point) if bias is None else (x, w_depth, w_point, bias)
    return _result(out, parents, grad_fn, "sep_transposed_conv2d")


# -- Fourier ----------------------------------------------------------------
class ComplexGrid(NamedTuple):
    """Half-spectrum of a real signal, stored as two real tensors."""

    real: Tensor
    imag: Tensor


def _check_pow2(h: int, w: int) -> None:
    for n in (h, w):
        if n < 1 or n & (n - 1):
            raise DimensionError(f"FFT extents must be powers of two, got {h}x{w}")


def _scale(norm: str, n: int) -> float:
    return {"backward": 1.0, "ortho": 1.0 / math.sqrt(n), "forward": 1.0 / n}[norm]


def _rfft2_stacked(x: Tensor, norm: str) -> Tensor:
    h, w = x.shape[-2:]
    _check_pow2(h, w)
    spec = np.fft.rfft2(x.data, norm=norm)
    wh = spec.shape[-1]
    s = _scale(norm, h * w)

    def grad_fn(g):
        full = np.zeros(x.shape[:-1] + (w,), dtype=complex)
        full[..., :wh] = g[0] + 1j * g[1]
        return (s * np.real(np.fft.ifft2(full, norm="forward")),)

    return _result(np.stack([spec.real, spec.imag]), (x,), grad_fn, "rfft2")


def _irfft2_stacked(z: Tensor, width: int, norm: str) -> Tensor:
    h = z.shape[-2]
    _check_pow2(h, width)
    spec = z.data[0] + 1j * z.data[1]
    out = np.fft.irfft2(spec, s=(h, width), norm=norm)
    # inverse scale: 1/(HW) for "backward", 1/sqrt(HW) for "ortho"
    s = {"backward": 1.0 / (h * width), "ortho": 1.0 / math.sqrt(h * width), "forward": 1.0}[norm]
    mult = np.full(z.shape[-1], 2.0)
    mult[0] = 1.0
    if width % 2 == 0:
        mult[-1] = 1.0

    def grad_fn(g):
        r = np.fft.rfft2(g) * (s * mult)
        return (np.stack([r.real, r.imag]),)

    return _result(out, (z,), grad_fn, "irfft2")


def fft2d(x: Tensor, norm: str = "backward") -> ComplexGrid:
    """Real-to-complex 2-D FFT over the last two axes (Hermitian half width)."""
    s = _rfft2_stacked(as_tensor(x), norm)
    return ComplexGrid(s[0], s[1])


def ifft2d(grid: ComplexGrid, width: int, norm: str = "backward") -> Tensor:
    """Inverse of :func:`fft2d`; ``width`` is the original last-axis extent."""
    return _irfft2_stacked(stack([grid.real, grid.imag]), width, norm)

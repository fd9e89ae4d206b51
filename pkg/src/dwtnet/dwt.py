"""Distance-weighted transformer block.

Tokens are average-pooled patches of a feature map. Each token gets a
KNN distance density ``tau_i = exp(-mean_j ||x_i - x_j||^2)`` over its k
nearest neighbours; isolated tokens (low density) receive larger weights
``w_i = (1 - tau_i) / sum_j (1 - tau_j)``. Inside attention, value row i is
scaled by ``lambda_c + w_i`` before mixing. There is no layer normalisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .init import orthogonal, zeros
from .module import Module
from .tensor import Tensor, _result, as_tensor, reshape, transpose, where

DEFAULT_K = 8
DEGENERATE_EPS = 1e-12


def default_k(n_tokens: int) -> int:
    return min(DEFAULT_K, n_tokens - 1)


def knn_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest other tokens, ties broken by lowest index."""
    d2 = ((x[..., :, None, :] - x[..., None, :, :]) ** 2).sum(-1)
    n = x.shape[-2]
    d2[..., np.arange(n), np.arange(n)] = np.inf
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


def distance_density(tokens, k: int | None = None) -> Tensor:
    """KNN distance density of each token (self excluded), differentiable in ``tokens``.

    ``tokens`` is ``N x C`` or batched ``B x N x C``. A single token has no
    neighbours and gets density 1.
    """
    x = as_tensor(tokens)
    n = x.shape[-2]
    if n == 0:
        raise DimensionError("distance_density needs at least one token")
    if n == 1:
        return _result(np.ones(x.shape[:-1]), (x,), lambda g: (None,), "distance_density")
    k = default_k(n) if k is None else min(k, n - 1)
    if k < 1:
        raise ConfigError(f"neighbour count must be >= 1, got {k}")

    xd = x.data
    idx = knn_indices(xd, k)  # (..., N, k)
    nbrs = np.take_along_axis(xd[..., None, :, :], idx[..., None], axis=-2) if xd.ndim > 2 else xd[idx]
    diff = xd[..., :, None, :] - nbrs  # (..., N, k, C)
    s = (diff**2).sum(-1).mean(-1)
    tau = np.exp(-s)

    def grad_fn(g):
        coef = (-g * tau * 2.0 / k)[..., None, None]  # dL/ds * ds/d(diff) factor
        contrib = coef * diff
        gx = contrib.sum(-2)
        if xd.ndim == 2:
            np.add.at(gx, idx, -contrib)
        else:
            c = xd.shape[-1]
            fidx = idx.reshape(-1, n, k)
            rows = (fidx + n * np.arange(fidx.shape[0])[:, None, None]).reshape(-1)
            flat = gx.reshape(-1, c)
            np.add.at(flat, rows, -contrib.reshape(-1, c))
            gx = flat.reshape(gx.shape)
        return (gx,)

    return _result(tau, (x,), grad_fn, "distance_density")


def token_weights(tau: Tensor) -> Tensor:
    """Normalised ``1 - tau``; uniform when every token coincides (or N = 1)."""
    tau = as_tensor(tau)
    n = tau.shape[-1]
    u = 1.0 - tau
    total = u.sum(axis=-1, keepdims=True)
    degenerate = total.data < DEGENERATE_EPS
    safe = total + degenerate.astype(float)
    return where(np.broadcast_to(degenerate, tau.shape), np.full(tau.shape, 1.0 / n), u / safe)


@dataclass
class TokenSet:
    tokens: np.ndarray
    weights: np.ndarray
    k_nn: int

    @classmethod
    def from_tokens(cls, tokens, k: int | None = None) -> "TokenSet":
        tokens = np.asarray(tokens, dtype=np.float64)
        n = tokens.shape[-2]
        k = default_k(n) if k is None else k
        w = token_weights(distance_density(tokens, k))
        return cls(tokens, w.data, k)


class DwtParams(Module):
    """Weights of one distance-weighted transformer block."""

    def __init__(
        self,
        channels: int,
        heads: int = 4,
        patch: int = 2,
        lambda_c: float = 0.5,
        mlp_ratio: int = 2,
        k_nn: int | None = None,
        rng: np.random.Generator | None = None,
    ):
        if channels % heads:
            raise ConfigError(f"heads ({heads}) must divide channels ({channels})")
        if lambda_c <= 0:
            raise ConfigError("lambda_c must be positive")
        rng = rng or np.random.default_rng()
        c, hid = channels, mlp_ratio * channels
        self.channels, self.heads, self.patch = c, heads, patch
        self.lambda_c, self.k_nn = lambda_c, k_nn

        def p(shape, gain=1.0):
            return Tensor(orthogonal(shape, gain, rng), requires_grad=True)

        self.wq, self.wk, self.wv = p((c, c)), p((c, c)), p((c, c))
        self.wo, self.bo = p((c, c)), zeros((c,))
        self.mlp_w1, self.mlp_b1 = p((c, hid)), zeros((hid,))
        self.mlp_w2, self.mlp_b2 = p((hid, c)), zeros((c,))
        self.usl_depth = p((c, patch, patch))
        self.usl_point = p((c, c))
        self.usl_bias = zeros((c,))

    @property
    def d_k(self) -> int:
        return self.channels // self.heads

    def zero_output_projections(self) -> None:
        """Make the block a pure residual identity."""
        for t in (self.wo, self.bo, self.mlp_w2, self.mlp_b2, self.usl_point, self.usl_bias):
            t.data = np.zeros_like(t.data)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, n, c = t.shape
    t = reshape(t, (*lead, n, heads, c // heads))
    nd = t.ndim
    return transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(t: Tensor) -> Tensor:
    nd = t.ndim
    t = transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, n, h, dk = t.shape
    return reshape(t, (*lead, n, h * dk))


def weighted_mhsa(tokens: Tensor, w: Tensor, params: DwtParams, return_attention: bool = False):
    """Multi-head self-attention whose value rows are scaled by ``lambda_c + w_i``."""
    tokens, w = as_tensor(tokens), as_tensor(w)
    if w.shape != tokens.shape[:-1]:
        raise DimensionError(f"weight vector shape {w.shape} does not match {tokens.shape[:-1]} tokens")
    if tokens.shape[-1] != params.channels:
        raise DimensionError(f"tokens have width {tokens.shape[-1]}, params expect {params.channels}")
    h = params.heads
    q = _split_heads(tokens @ params.wq, h)
    k = _split_heads(tokens @ params.wk, h)
    scale = reshape(w + params.lambda_c, (*w.shape, 1))
    v = _split_heads((tokens @ params.wv) * scale, h)
    att = F.softmax((q @ transpose(k)) * (1.0 / math.sqrt(params.d_k)), axis=-1)
    out = _merge_heads(att @ v) @ params.wo + params.bo
    return (out, att) if return_attention else out


def mlp(z: Tensor, params: DwtParams) -> Tensor:
    return F.gelu(z @ params.mlp_w1 + params.mlp_b1) @ params.mlp_w2 + params.mlp_b2


def dwt_block(f: Tensor, params: DwtParams) -> Tensor:
    """Pool to tokens, weighted attention and MLP residuals, separable upsample, outer residual."""
    f = as_tensor(f)
    p = params.patch
    *lead, c, hh, ww = f.shape
    if hh % p or ww % p:
        raise DimensionError(f"patch rate {p} does not divide {hh}x{ww}")
    pooled = F.avg_pool2d(f, p)
    n = (hh // p) * (ww // p)
    x = transpose(reshape(pooled, (*lead, c, n)))
    w = token_weights(distance_density(x, params.k_nn))
    z = weighted_mhsa(x, w, params) + x
    z = mlp(z, params) + z
    grid = reshape(transpose(z), (*lead, c, hh // p, ww // p))
    return F.sep_transposed_conv2d(grid, params.usl_depth, params.usl_point, p, params.usl_bias) + f


class DwtStack(Module):
    def __init__(self, channels: int, depth: int, rng: np.random.Generator | None = None, **kw):
        self.blocks = [DwtParams(channels, rng=rng, **kw) for _ in range(depth)]

    def __call__(self, f: Tensor) -> Tensor:
        for b in self.blocks:
            f = dwt_block(f, b)
        return f


__all__ = [
    "TokenSet",
    "DwtParams",
    "DwtStack",
    "distance_density",
    "token_weights",
    "weighted_mhsa",
    "dwt_block",
    "knn_indices",
    "default_k",
]

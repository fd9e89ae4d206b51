"""Norm-preserving regularisation of convolution weights without SVD.

A ``D x C x k x k`` kernel is viewed as the ``D x (C k^2)`` im2col matrix W.
Rescaling sets every nonzero singular value of W to ``sqrt(D / min(D, C k^2))``
using only matrix products (coupled Newton-Schulz iteration on the smaller
Gram matrix), so backpropagated gradient norms stay close to the output
gradient norms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import functional as F
from .errors import NumericError
from .module import Module
from .optim import Adam
from .tensor import Tensor, backward, no_grad

SYMMETRY_TOL = 1e-8
CONVERGED_TOL = 1e-4


def newton_schulz_sqrt(
    a: np.ndarray, iters: int = 30, stop_tol: float = 1e-14, check: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Y, Z)`` with ``Y ~ A^{1/2}`` and ``Z ~ A^{-1/2}`` for SPD ``A``.

    A is pre-scaled by its Frobenius norm so the iteration
    ``T = (3I - Z Y) / 2,  Y <- Y T,  Z <- T Z`` converges, then un-scaled.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    asym = float(np.abs(a - a.T).max(initial=0.0))
    if asym > SYMMETRY_TOL * scale:
        raise NumericError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        raise NumericError("zero matrix has no positive-definite square root")

    n = a.shape[0]
    eye = np.eye(n)
    an = a / norm
    y, z = an.copy(), eye.copy()
    history = []
    for _ in range(iters):
        t = 0.5 * (3.0 * eye - z @ y)
        y, z = y @ t, t @ z
        res = float(np.linalg.norm(y @ y - an))
        history.append(res)
        if not math.isfinite(res):
            break
        if res < stop_tol:
            break
    if check and not (history and history[-1] < CONVERGED_TOL):
        tail = ", ".join(f"{r:.2e}" for r in history[-5:])
        raise NumericError(
            f"Newton-Schulz did not converge in {len(history)} iterations (last residuals: {tail}); "
            "input may not be positive definite"
        )
    root = math.sqrt(norm)
    return y * root, z / root


def target_singular_value(d: int, n: int) -> float:
    """``sqrt(d / min(d, n))`` for a ``d x n`` operator."""
    return math.sqrt(d / min(d, n))


def norm_preserve_rescale(w: np.ndarray, iters: int = 60) -> np.ndarray:
    """Set all nonzero singular values of the im2col view of ``w`` to the norm-preserving target."""
    w = np.asarray(w, dtype=np.float64)
    d = w.shape[0]
    m = w.reshape(d, -1)
    n = m.shape[1]
    if not np.any(m):
        return w.copy()
    t = target_singular_value(d, n)
    if d <= n:
        _, z = newton_schulz_sqrt(m @ m.T, iters, check=False)
        out = t * (z @ m)
    else:
        _, z = newton_schulz_sqrt(m.T @ m, iters, check=False)
        out = t * (m @ z)
    if not np.isfinite(out).all():
        raise NumericError(f"rescale produced non-finite values for weight of shape {w.shape}")
    return out.reshape(w.shape)


def rescale_module(module: Module, predicate=None) -> int:
    """Apply :func:`norm_preserve_rescale` in place to every 4-D conv kernel; returns the count."""
    count = 0
    for name, p in module.named_parameters():
        if p.ndim == 4 and (predicate is None or predicate(name)):
            p.data = norm_preserve_rescale(p.data)
            count += 1
    return count


# -- spectral normalisation -------------------------------------------------
def power_iteration(w: np.ndarray, iters: int = 20, v0: np.ndarray | None = None):
    """Estimate the top singular triplet of the matrix view of ``w``."""
    m = np.asarray(w, dtype=np.float64).reshape(np.shape(w)[0], -1)
    v = np.ones(m.shape[1]) if v0 is None else np.asarray(v0, dtype=np.float64)
    v = v / (np.linalg.norm(v) + 1e-300)
    u = m @ v
    for _ in range(max(1, iters)):
        u = m @ v
        u /= np.linalg.norm(u) + 1e-300
        v = m.T @ u
        v /= np.linalg.norm(v) + 1e-300
    sigma = float(u @ m @ v)
    return sigma, u, v


def spectral_normalize(w: np.ndarray, iters: int = 100, v0: np.ndarray | None = None) -> np.ndarray:
    """``w / sigma_max`` with sigma_max from power iteration."""
    if v0 is None:
        v0 = np.random.default_rng(0).standard_normal(int(np.prod(np.shape(w)[1:])))
    sigma, _, _ = power_iteration(w, iters, v0)
    return np.asarray(w, dtype=np.float64) / sigma


class SpectralNorm:
    """Persistent power-iteration state for a trainable weight.

    Calling it returns ``W / sigma`` on the tape, with ``sigma = u^T W v``
    for the current (constant) singular vector estimates.
    """

    def __init__(self, weight: Tensor, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = weight
        m = weight.data.reshape(weight.shape[0], -1)
        self.u = rng.standard_normal(m.shape[0])
        self.u /= np.linalg.norm(self.u)
        self.v = m.T @ self.u
        self.v /= np.linalg.norm(self.v) + 1e-300

    def __call__(self, update: bool = True) -> Tensor:
        w = self.weight
        m = w.data.reshape(w.shape[0], -1)
        if update:
            v = m.T @ self.u
            self.v = v / (np.linalg.norm(v) + 1e-300)
            u = m @ self.v
            self.u = u / (np.linalg.norm(u) + 1e-300)
        uv = np.outer(self.u, self.v).reshape(w.shape)
        sigma = (w * uv).sum()
        return w / sigma


# -- gradient-norm probe ----------------------------------------------------
@dataclass
class GradReport:
    layer: int
    c: int
    d: int
    ratio: float
    trials: int
    pooling: bool = False


@dataclass
class ProbeNet:
    """Conv stack alternating 3x3 and 1x1 kernels over channels ``c, d, c, d, c``."""

    weights: list[Tensor]
    pooling: list[bool]
    slope: float = 0.1

    @classmethod
    def build(
        cls,
        c: int,
        d: int,
        rng: np.random.Generator,
        pooling: Sequence[bool] = (False, False, False, False),
        kernels: Sequence[int] = (3, 1, 3, 1),
    ) -> "ProbeNet":
        chans = [c, d, c, d, c]
        weights = []
        for i, k in enumerate(kernels):
            cin, cout = chans[i], chans[i + 1]
            std = 1.0 / math.sqrt(cout * k * k)  # fan-out Gaussian
            weights.append(Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True))
        return cls(weights, list(pooling))

    def rescale(self) -> None:
        for w in self.weights:
            w.data = norm_preserve_rescale(w.data)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i, (w, pool) in enumerate(zip(self.weights, self.pooling)):
            v = F.conv2d(h, w, pad=w.shape[-1] // 2)
            if pool:
                v = F.avg_pool2d(v, 2)
            h = F.lrelu(v, self.slope) if i < len(self.weights) - 1 else v
        return h


def _layer_grad_norms(net: ProbeNet, rng: np.random.Generator, size: int) -> list[tuple[float, float]]:
    """One Monte-Carlo trial: ``(||grad_u||, ||grad_v||)`` per layer, bottom layer first."""
    last = len(net.weights) - 1
    cached = []
    h = rng.standard_normal((net.weights[0].shape[1], size, size))
    with no_grad():
        for i, (w, pool) in enumerate(zip(net.weights, net.pooling)):
            v = F.conv2d(Tensor(h), Tensor(w.data), pad=w.shape[-1] // 2).data
            cached.append((h, v))
            out = F.avg_pool2d(Tensor(v), 2) if pool else Tensor(v)
            h = (F.lrelu(out, net.slope) if i < last else out).data
    g = rng.standard_normal(h.shape)
    norms = []
    for i in reversed(range(len(net.weights))):
        w, pool = net.weights[i], net.pooling[i]
        u_data, v_data = cached[i]
        v = Tensor(v_data, requires_grad=True)
        out = F.avg_pool2d(v, 2) if pool else v
        if i < last:
            out = F.lrelu(out, net.slope)
        backward((out * g).sum())
        u = Tensor(u_data, requires_grad=True)
        backward((F.conv2d(u, Tensor(w.data), pad=w.shape[-1] // 2) * v.grad).sum())
        norms.append((float(np.linalg.norm(u.grad)), float(np.linalg.norm(v.grad))))
        g = u.grad
    return norms[::-1]


def grad_ratio_probe(net: ProbeNet, trials: int = 8, rng: np.random.Generator | None = None, size: int = 16) -> list[GradReport]:
    """Per-layer ``E||grad_input|| / E||grad_output||`` over Gaussian inputs and upstream gradients."""
    rng = rng or np.random.default_rng(0)
    sums = np.zeros((len(net.weights), 2))
    for _ in range(trials):
        sums += np.array(_layer_grad_norms(net, rng, size))
    reports = []
    for i, w in enumerate(net.weights):
        gu, gv = sums[i]
        reports.append(GradReport(i + 1, w.shape[1], w.shape[0], float(gu / gv), trials, net.pooling[i]))
    return reports


PROBE_FIELDS = ["condition", "layer", "c", "d", "pooling", "trial", "ratio"]
TREND_FIELDS = ["condition", "step", "layer", "c", "d", "ratio"]


def run_probe(
    c: int,
    d: int,
    runs: int = 5,
    trials: int = 8,
    seed: int = 0,
    pooling: Sequence[bool] = (False, False, False, False),
    size: int = 16,
) -> list[dict]:
    """Probe freshly initialised nets with and without rescaling, one net per run."""
    rows = []
    for condition in ("rescaled", "plain"):
        for run in range(runs):
            rng = np.random.default_rng([seed, run])
            net = ProbeNet.build(c, d, rng, pooling)
            if condition == "rescaled":
                net.rescale()
            for rep in grad_ratio_probe(net, trials, rng, size):
                rows.append(
                    dict(condition=condition, layer=rep.layer, c=rep.c, d=rep.d,
                         pooling=int(rep.pooling), trial=run, ratio=rep.ratio)
                )
    return rows


def run_trend(
    c: int,
    d: int,
    steps: int = 100,
    every: int = 10,
    lr: float = 1e-2,
    seed: int = 0,
    trials: int = 4,
    pooling: Sequence[bool] = (True, False, True, False),
    size: int = 16,
) -> list[dict]:
    """Train the probe net on a random regression task and track gradient ratios.

    Both conditions start from the same norm-preserving initialisation; the
    "rescaled" condition re-applies rescaling after every update.
    """
    rows = []
    for condition in ("rescaled", "plain"):
        rng = np.random.default_rng(seed)
        net = ProbeNet.build(c, d, rng, pooling)
        net.rescale()
        data_rng = np.random.default_rng([seed, 1])
        x = Tensor(data_rng.standard_normal((8, c, size, size)))
        with no_grad():
            out_shape = net.forward(x).shape
        target = data_rng.standard_normal(out_shape)
        opt = Adam(net.weights, lr=lr, betas=(0.0, 0.9))
        probe_rng = np.random.default_rng([seed, 2])
        for step in range(steps + 1):
            if step % every == 0:
                for rep in grad_ratio_probe(net, trials, probe_rng, size):
                    rows.append(dict(condition=condition, step=step, layer=rep.layer,
                                     c=rep.c, d=rep.d, ratio=rep.ratio))
            if step == steps:
                break
            opt.zero_grad()
            diff = net.forward(x) - target
            backward((diff * diff).mean())
            opt.step()
            if condition == "rescaled":
                net.rescale()
    return rows


def write_csv(path, rows: Iterable[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\r\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})

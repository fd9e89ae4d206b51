"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (in place perturbation)."""
    if not (x.data.flags.c_contiguous and x.data.flags.writeable):
        x.data = x.data.copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between tape and central-difference gradients.

    ``f`` is re-evaluated with no arguments; it must close over ``params``.
    Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
    ``max_coords`` limits the total number of probed entries (sampled with ``rng``).
    """
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    coords: list[list[int] | None] = [None] * len(params)
    if max_coords is not None:
        rng = rng or np.random.default_rng(0)
        sizes = np.array([p.size for p in params])
        total = int(sizes.sum())
        picks = np.sort(rng.choice(total, size=min(max_coords, total), replace=False))
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        coords = [list(picks[(picks >= lo) & (picks < hi)] - lo) for lo, hi in zip(offsets[:-1], offsets[1:])]

    worst = 0.0
    for p, a, cs in zip(params, analytic, coords):
        if cs is not None and not cs:
            continue
        num = numeric_grad(f, p, h, cs)
        sel = slice(None) if cs is None else np.asarray(cs)
        av, nv = a.reshape(-1)[sel], num.reshape(-1)[sel]
        denom = np.maximum(np.maximum(np.abs(av), np.abs(nv)), 1e-8)
        worst = max(worst, float(np.max(np.abs(av - nv) / denom)))
    return worst

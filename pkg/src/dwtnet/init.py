"""Weight initialisers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def orthogonal(shape: Sequence[int], gain: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Orthogonal matrix-view init: the shorter side of ``shape[0] x prod(shape[1:])`` is orthonormal.

    QR of a Gaussian draw, with columns sign-corrected by diag(R) so the
    result is a deterministic function of the generator state.
    """
    rng = rng or np.random.default_rng()
    rows = int(shape[0])
    cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q).reshape(tuple(shape))


def orthogonal_init(shape: Sequence[int], gain: float = 1.0, rng: np.random.Generator | None = None) -> Tensor:
    return Tensor(orthogonal(shape, gain, rng), requires_grad=True)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True)

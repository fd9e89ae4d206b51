"""Seeded procedural texture corpora and 8-bit image IO.

Images live in [-1, 1] internally (matching the tanh output) and in
[0, 1] for metrics. 8-bit conversion: ``u8 = round((x + 1) * 127.5)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

KINDS = ("stripes", "checkers", "blobs")


def _colours(rng, n=2):
    return rng.uniform(-1.0, 1.0, size=(n, 3, 1, 1))


def stripes(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    c0, c1 = _colours(rng)
    return c0 + (c1 - c0) * t[None]


def checkers(size: int, rng: np.random.Generator) -> np.ndarray:
    cell = int(rng.choice([4, 8]))
    oy, ox = rng.integers(0, cell, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    t = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(float)
    c0, c1 = _colours(rng)
    return c0 + (c1 - c0) * t[None]


def blobs(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.broadcast_to(_colours(rng, 1)[0], (3, size, size)).copy()
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, 1, size=2)
        s = rng.uniform(0.05, 0.2)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        img += (_colours(rng, 1)[0] - img) * g[None]
    return np.clip(img, -1.0, 1.0)


_MAKERS = {"stripes": stripes, "checkers": checkers, "blobs": blobs}


def make_corpus(kind: str, n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """``n x 3 x size x size`` images; ``kind`` is one of KINDS or ``mixed``."""
    rng = np.random.default_rng(seed)
    if kind == "mixed":
        kinds = [KINDS[i % 3] for i in range(n)]
    elif kind in _MAKERS:
        kinds = [kind] * n
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.stack([_MAKERS[k](size, rng) for k in kinds])


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(u: np.ndarray) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) / 127.5 - 1.0


def save_image(path, x: np.ndarray) -> None:
    """Write a 3 x H x W image in [-1, 1] (or H x W mask in [0, 1]) as PNG."""
    x = np.asarray(x)
    if x.ndim == 2:
        Image.fromarray(np.round(np.clip(x, 0, 1) * 255).astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(to_uint8(x).transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr.transpose(2, 0, 1))


def save_grid(path, images: np.ndarray, cols: int = 8) -> None:
    n, c, h, w = images.shape
    rows = -(-n // cols)
    grid = np.full((c, rows * h, cols * w), -1.0)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        grid[:, r * h : (r + 1) * h, q * w : (q + 1) * w] = img
    save_image(path, grid)


def write_corpus(directory, images: np.ndarray) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = d / f"{i:04d}.png"
        save_image(p, img)
        paths.append(p)
    return paths

"""Training objective: pixel, gradient, adversarial, perceptual, style, commitment and prior terms.

The perceptual and style terms use a fixed random extractor (frozen
orthogonal conv + pool stages) in place of a pretrained VGG network.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError, NumericError
from .init import orthogonal
from .module import Module
from .normreg import SpectralNorm
from .tensor import Tensor, as_tensor, clip, concat, log, reshape, tabs, transpose

PROB_EPS = 1e-7
LOSS_FIELDS = ["step", "pixel", "grad", "adv_g", "adv_d", "perc", "style", "commit", "mal", "total"]


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def pixel_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b)
    return tabs(a - b).mean()


def image_gradients(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along x and y; the last column/row is zero."""
    x = as_tensor(x)
    zc = Tensor(np.zeros((*x.shape[:-1], 1)))
    zr = Tensor(np.zeros((*x.shape[:-2], 1, x.shape[-1])))
    dx = concat([x[..., :, 1:] - x[..., :, :-1], zc], axis=-1)
    dy = concat([x[..., 1:, :] - x[..., :-1, :], zr], axis=-2)
    return dx, dy


def gradient_loss(a, b) -> Tensor:
    """``mean|dx(a) - dx(b)| + mean|dy(a) - dy(b)|``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b)
    ax, ay = image_gradients(a)
    bx, by = image_gradients(b)
    return tabs(ax - bx).mean() + tabs(ay - by).mean()


# -- adversarial ------------------------------------------------------------
class Discriminator(Module):
    """Four spectrally normalised 3x3 convs; pooled logit -> sigmoid probability per image."""

    def __init__(self, ch: int = 8, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        widths = [3, ch, 2 * ch, 4 * ch, 1]
        self.weights = [
            Tensor(orthogonal((cout, cin, 3, 3), 1.0, rng), requires_grad=True)
            for cin, cout in zip(widths[:-1], widths[1:])
        ]
        self.biases = [Tensor(np.zeros(cout), requires_grad=True) for cout in widths[1:]]
        self._sn = [SpectralNorm(w, rng) for w in self.weights]

    def __call__(self, x, update: bool = True) -> Tensor:
        h = as_tensor(x)
        last = len(self.weights) - 1
        for i, (sn, b) in enumerate(zip(self._sn, self.biases)):
            h = F.conv2d(h, sn(update), b, pad=1)
            if i < last:
                h = F.avg_pool2d(F.lrelu(h, 0.2), 2)
        logit = h.mean(axis=(1, 2, 3))
        return F.sigmoid(logit)


def _safe_log(p: Tensor) -> Tensor:
    return log(clip(p, PROB_EPS, 1.0 - PROB_EPS))


def adversarial_loss(disc, x_r, x_real, update: bool = True) -> tuple[Tensor, Tensor]:
    """Return ``(loss_G, loss_D)``.

    ``loss_D = -mean log(1 - D(x_r)) - mean log D(x_real)`` with ``x_r``
    detached; ``loss_G = -mean log D(x_r)`` (non-saturating form).
    """
    x_r, x_real = as_tensor(x_r), as_tensor(x_real)
    _same_shape(x_r, x_real)
    fake = disc(x_r.detach(), update)
    real = disc(x_real, False)
    loss_d = -_safe_log(1.0 - fake).mean() - _safe_log(real).mean()
    loss_g = -_safe_log(disc(x_r, False)).mean()
    return loss_g, loss_d


# -- perceptual / style -----------------------------------------------------
class FeatureExtractor:
    """Frozen random conv + LReLU + avg-pool stages; each stage output is a tap."""

    def __init__(self, widths=(8, 16, 32, 32), in_channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        chans = [in_channels, *widths]
        self.weights = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            w = orthogonal((cout, cin, 3, 3), math.sqrt(2.0), rng)
            w.setflags(write=False)
            self.weights.append(w)
        self.perceptual_taps = tuple(range(len(widths)))
        self.style_taps = tuple(range(1, len(widths)))

    def __call__(self, x) -> list[Tensor]:
        h = as_tensor(x)
        feats = []
        for w in self.weights:
            h = F.lrelu(F.conv2d(h, Tensor(w), pad=1), 0.2)
            if h.shape[-1] >= 2:
                h = F.avg_pool2d(h, 2)
            feats.append(h)
        return feats


def gram(feat) -> Tensor:
    """``F F^T / (C H W)`` for features ``(..., C, H, W)``."""
    feat = as_tensor(feat)
    *lead, c, h, w = feat.shape
    flat = reshape(feat, (*lead, c, h * w))
    return (flat @ transpose(flat)) * (1.0 / (c * h * w))


def perceptual_style_loss(a, b, fx: FeatureExtractor) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b)
    fa, fb = fx(a), fx(b)
    perc = Tensor(np.zeros(()))
    style = Tensor(np.zeros(()))
    for i in fx.perceptual_taps:
        perc = perc + tabs(fa[i] - fb[i]).mean()
    for i in fx.style_taps:
        style = style + tabs(gram(fa[i]) - gram(fb[i])).mean()
    return perc, style


# -- composition ------------------------------------------------------------
@dataclass
class LossWeights:
    grad: float = 5.0
    adv: float = 0.1
    perc: float = 0.1
    style: float = 250.0
    commit: float = 0.25

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be >= 0, got {v}")


def total_loss(terms: dict, weights: LossWeights, commit_term=0.0, mal_term=0.0) -> tuple[Tensor, dict]:
    """Weighted sum of the reconstruction terms plus commitment and prior NLL.

    ``terms`` may hold ``pixel``, ``grad``, ``adv``, ``perc`` and ``style``;
    missing entries count as zero. Returns the total and the weighted
    contribution of each term.
    """
    scale = {"pixel": 1.0, "grad": weights.grad, "adv": weights.adv, "perc": weights.perc, "style": weights.style}
    items = [(k, terms.get(k, 0.0), s) for k, s in scale.items()]
    items += [("commit", commit_term, weights.commit), ("mal", mal_term, 1.0)]
    unknown = set(terms) - set(scale)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = Tensor(np.zeros(()))
    parts = {}
    for name, value, w in items:
        raw = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise NumericError(f"loss term {name!r} is not finite: {raw}")
        value = as_tensor(value)
        contrib = value * w
        parts[name] = float(contrib.data)
        total = total + contrib
    parts["total"] = float(total.data)
    return total, parts

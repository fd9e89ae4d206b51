"""Fast Fourier convolution: Fourier units, spectral transform, FFC and Res-FFC fusion."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .init import orthogonal
from .module import Module
from .tensor import Tensor, as_tensor, concat

LRELU_SLOPE = 0.1


def _param(shape, rng) -> Tensor:
    return Tensor(orthogonal(shape, 1.0, rng), requires_grad=True)


def _channels(x: Tensor, lo: int, hi: int) -> Tensor:
    return x[..., lo:hi, :, :]


def fourier_unit(x: Tensor, w: Tensor, slope: float = LRELU_SLOPE, norm: str = "ortho") -> Tensor:
    """rfft2 -> [real; imag] channels -> 1x1 conv + LReLU -> irfft2.

    ``w`` is a ``2C x 2C x 1 x 1`` kernel acting on stacked real and
    imaginary parts. The conv has no bias, so spectral support is kept.
    """
    x = as_tensor(x)
    c, width = x.shape[-3], x.shape[-1]
    if w.shape != (2 * c, 2 * c, 1, 1):
        raise DimensionError(f"Fourier unit weights must be {(2 * c, 2 * c, 1, 1)}, got {w.shape}")
    grid = F.fft2d(x, norm)
    mixed = F.lrelu(F.conv2d(concat([grid.real, grid.imag], axis=-3), w), slope)
    out = F.ComplexGrid(_channels(mixed, 0, c), _channels(mixed, c, 2 * c))
    return F.ifft2d(out, width, norm)


class SpectralParams(Module):
    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        if channels < 4 or channels % 4:
            raise ConfigError(f"spectral transform needs a channel count divisible by 4, got {channels}")
        rng = rng or np.random.default_rng()
        c, q = channels, channels // 4
        self.channels = c
        self.conv_in = _param((c, c, 1, 1), rng)
        self.fu_left = _param((2 * c, 2 * c, 1, 1), rng)
        self.fu_right = _param((2 * q, 2 * q, 1, 1), rng)
        self.conv_out = _param((c, c, 1, 1), rng)


def spectral_transform(x: Tensor, params: SpectralParams) -> Tensor:
    """Global FU on all channels plus a semi-global FU on the first quarter."""
    x = as_tensor(x)
    c = params.channels
    if x.shape[-3] != c:
        raise ConfigError(f"spectral transform built for {c} channels, got {x.shape[-3]}")
    q = c // 4
    h = F.lrelu(F.conv2d(x, params.conv_in), LRELU_SLOPE)
    g = fourier_unit(h, params.fu_left)
    r = fourier_unit(_channels(h, 0, q), params.fu_right)
    g = concat([_channels(g, 0, q) + r, _channels(g, q, c)], axis=-3)
    return F.conv2d(h + g, params.conv_out)


class FfcParams(Module):
    """Local/global split FFC layer; ``ratio`` of the channels go global."""

    def __init__(self, channels: int, ratio: float = 0.5, rng: np.random.Generator | None = None):
        if not 0.0 < ratio < 1.0:
            raise ConfigError(f"global ratio must lie in (0, 1), got {ratio}")
        cg = int(round(ratio * channels))
        cl = channels - cg
        if cg < 4 or cg % 4 or cl < 1:
            raise ConfigError(
                f"global channels round({ratio}*{channels})={cg} must be >= 4 and divisible by 4, "
                "with at least one local channel"
            )
        rng = rng or np.random.default_rng()
        self.channels, self.local_channels, self.global_channels = channels, cl, cg
        self.l2l = _param((cl, cl, 3, 3), rng)
        self.l2g = _param((cg, cl, 3, 3), rng)
        self.g2l = _param((cl, cg, 3, 3), rng)
        self.spectral = SpectralParams(cg, rng)

    def global_path(self) -> list[Tensor]:
        return [self.l2g, self.g2l, *self.spectral.parameters()]


def ffc_forward(x: Tensor, params: FfcParams) -> Tensor:
    x = as_tensor(x)
    if x.shape[-3] != params.channels:
        raise ConfigError(f"FFC built for {params.channels} channels, got {x.shape[-3]}")
    cl = params.local_channels
    xl, xg = _channels(x, 0, cl), _channels(x, cl, params.channels)
    out_l = F.conv2d(xl, params.l2l, pad=1) + F.conv2d(xg, params.g2l, pad=1)
    out_g = F.conv2d(xl, params.l2g, pad=1) + spectral_transform(xg, params.spectral)
    return concat([F.lrelu(out_l, LRELU_SLOPE), F.lrelu(out_g, LRELU_SLOPE)], axis=-3)


class ResFfcParams(Module):
    def __init__(self, channels: int, ratio: float = 0.5, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        self.channels = channels
        self.reduce = _param((channels, 2 * channels, 1, 1), rng)
        self.ffc = FfcParams(channels, ratio, rng)


def res_ffc_fuse(dec: Tensor, skip: Tensor, params: ResFfcParams) -> Tensor:
    """Concatenate decoder and encoder-skip features, reduce, FFC, add back onto ``dec``."""
    dec, skip = as_tensor(dec), as_tensor(skip)
    if dec.shape != skip.shape:
        raise DimensionError(f"decoder {dec.shape} and skip {skip.shape} features differ in shape")
    h = F.conv2d(concat([dec, skip], axis=-3), params.reduce)
    return ffc_forward(h, params.ffc) + dec

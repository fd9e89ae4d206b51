"""Scaled-down DWTNet: conv/DWT encoder, VQ bottleneck, masked-token prior, DWT + Res-FFC decoder.

Shape plan for the default 32x32 config (``ch = 8``)::

    input 4x32x32 (RGB + mask)
    enc: conv3x3 -> 8x32x32 [skip32] -> down 8x16x16 [skip16] -> down 16x8x8
         -> DWT x2 [skip8] -> down 32x4x4 -> 1x1 -> code_dim x4x4
    dec: 1x1 -> 32x4x4 -> up(=) 32x4x4 -> up 16x8x8 -> DWT x2 -> Res-FFC(skip8)
         -> up 8x16x16 -> Res-FFC(skip16) -> up 8x32x32 -> Res-FFC(skip32)
         -> conv3x3 -> 3x32x32 -> tanh
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import functional as F
from .dwt import DwtStack
from .errors import ConfigError, DimensionError, UsageError
from .ffc import ResFfcParams, res_ffc_fuse
from .init import orthogonal, orthogonal_init, zeros
from .module import Module
from .tensor import Tensor, as_tensor, concat, exp, no_grad, reshape, stop_gradient, transpose

__all__ = [
    "ModelConfig",
    "Codebook",
    "MaskSpec",
    "MalPrior",
    "DWTNet",
    "build_model",
    "orthogonal_init",
    "quantize",
    "make_mask",
    "token_mask",
    "inpaint",
    "shape_plan",
]

SLOPE = 0.1


@dataclass
class ModelConfig:
    image_size: int = 32
    ch: int = 8
    dwt_blocks: int = 2
    patch: int = 2
    codebook_size: int = 64
    code_dim: int = 32
    heads: int = 4
    lambda_c: float = 0.5
    ffc_ratio: float = 0.5
    prior_dim: int = 32
    prior_layers: int = 2
    prior_heads: int = 4
    decoder_noise: bool = False
    seed: int = 0

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    def validate(self) -> None:
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 16, got {s}")
        if (s // 4) % self.patch:
            raise ConfigError(f"patch rate {self.patch} must divide the DWT grid {s // 4}")
        if (2 * self.ch) % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide DWT width {2 * self.ch}")
        if self.prior_dim % self.prior_heads:
            raise ConfigError("prior_heads must divide prior_dim")
        if self.codebook_size < 1:
            raise ConfigError("codebook must be non-empty")
        for c in (self.ch, 2 * self.ch):
            cg = int(round(self.ffc_ratio * c))
            if cg < 4 or cg % 4 or c - cg < 1:
                raise ConfigError(f"FFC split of {c} channels at ratio {self.ffc_ratio} is invalid")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def shape_plan(cfg: ModelConfig) -> list[tuple[str, tuple[int, int, int]]]:
    """Expected C x H x W after every stage."""
    s, ch = cfg.image_size, cfg.ch
    return [
        ("enc.conv_in", (ch, s, s)),
        ("enc.down16", (ch, s // 2, s // 2)),
        ("enc.down8", (2 * ch, s // 4, s // 4)),
        ("enc.dwt", (2 * ch, s // 4, s // 4)),
        ("enc.down4", (4 * ch, s // 8, s // 8)),
        ("enc.to_code", (cfg.code_dim, s // 8, s // 8)),
        ("dec.from_code", (4 * ch, s // 8, s // 8)),
        ("dec.up4", (4 * ch, s // 8, s // 8)),
        ("dec.up8", (2 * ch, s // 4, s // 4)),
        ("dec.dwt", (2 * ch, s // 4, s // 4)),
        ("dec.fuse8", (2 * ch, s // 4, s // 4)),
        ("dec.up16", (ch, s // 2, s // 2)),
        ("dec.fuse16", (ch, s // 2, s // 2)),
        ("dec.up32", (ch, s, s)),
        ("dec.fuse32", (ch, s, s)),
        ("dec.conv_out", (3, s, s)),
    ]


# -- building blocks --------------------------------------------------------
class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, bias: bool = True):
        self.weight = Tensor(orthogonal((cout, cin, k, k), 1.0, rng), requires_grad=True)
        self.bias = zeros((cout,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, pad=self.weight.shape[-1] // 2)


class ResBlock(Module):
    """Residual block that halves (``mode='down'``), doubles (``'up'``) or keeps resolution."""

    def __init__(self, cin: int, cout: int, mode: str, rng):
        self.mode = mode
        self.conv1 = Conv(cin, cout, 3, rng)
        self.conv2 = Conv(cout, cout, 3, rng)
        self.shortcut = Conv(cin, cout, 1, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        if self.mode == "down":
            x = F.avg_pool2d(x, 2)
        elif self.mode == "up":
            x = F.upsample_nearest(x, 2)
        h = self.conv2(F.lrelu(self.conv1(x), SLOPE))
        return F.lrelu(h + self.shortcut(x), SLOPE)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.ch
        self.conv_in = Conv(4, ch, 3, rng)
        self.down16 = ResBlock(ch, ch, "down", rng)
        self.down8 = ResBlock(ch, 2 * ch, "down", rng)
        self.down4 = ResBlock(2 * ch, 4 * ch, "down", rng)
        self.to_code = Conv(4 * ch, cfg.code_dim, 1, rng)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.ch
        self.from_code = Conv(cfg.code_dim, 4 * ch, 1, rng)
        self.up4 = ResBlock(4 * ch, 4 * ch, "same", rng)
        self.up8 = ResBlock(4 * ch, 2 * ch, "up", rng)
        self.up16 = ResBlock(2 * ch, ch, "up", rng)
        self.up32 = ResBlock(ch, ch, "up", rng)
        self.conv_out = Conv(ch, 3, 3, rng)


class DwtSites(Module):
    def __init__(self, cfg: ModelConfig, rng):
        kw = dict(heads=cfg.heads, patch=cfg.patch, lambda_c=cfg.lambda_c)
        self.enc = DwtStack(2 * cfg.ch, cfg.dwt_blocks, rng, **kw)
        self.dec = DwtStack(2 * cfg.ch, cfg.dwt_blocks, rng, **kw)


class FfcSites(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.fuse8 = ResFfcParams(2 * cfg.ch, cfg.ffc_ratio, rng)
        self.fuse16 = ResFfcParams(cfg.ch, cfg.ffc_ratio, rng)
        self.fuse32 = ResFfcParams(cfg.ch, cfg.ffc_ratio, rng)


# -- vector quantisation ----------------------------------------------------
class Codebook(Module):
    """k x c latent vectors, updated by exponential moving average of assigned features."""

    def __init__(self, k: int, c: int, rng=None, decay: float = 0.99, patience: int = 20):
        if k < 1:
            raise ConfigError("codebook must contain at least one vector")
        rng = rng or np.random.default_rng()
        self.vectors = Tensor(rng.standard_normal((k, c)))
        self.ema_count = Tensor(np.ones(k))
        self.ema_sum = Tensor(self.vectors.data.copy())
        self.usage = Tensor(np.zeros(k))
        self.idle = Tensor(np.zeros(k))
        self.initialised = Tensor(np.zeros(()))
        self.decay, self.patience = decay, patience

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    def init_from(self, features: np.ndarray, rng: np.random.Generator) -> None:
        """Seed codewords with randomly chosen encoder features."""
        pick = rng.choice(len(features), size=self.k, replace=len(features) < self.k)
        self.vectors.data = features[pick].copy()
        self.ema_sum.data = self.vectors.data.copy()
        self.ema_count.data = np.ones(self.k)
        self.initialised.data = np.ones(())

    def ema_update(self, features: np.ndarray, indices: np.ndarray, rng: np.random.Generator) -> None:
        k, dcy = self.k, self.decay
        onehot = np.zeros((len(indices), k))
        onehot[np.arange(len(indices)), indices] = 1.0
        counts = onehot.sum(0)
        self.usage.data = self.usage.data + counts
        self.ema_count.data = dcy * self.ema_count.data + (1 - dcy) * counts
        self.ema_sum.data = dcy * self.ema_sum.data + (1 - dcy) * onehot.T @ features
        n = self.ema_count.data.sum()
        smoothed = (self.ema_count.data + 1e-5) / (n + k * 1e-5) * n
        self.vectors.data = self.ema_sum.data / smoothed[:, None]
        # codes unused for `patience` updates restart at a random current feature
        self.idle.data = np.where(counts > 0, 0.0, self.idle.data + 1.0)
        dead = self.idle.data >= self.patience
        if dead.any():
            pick = rng.choice(len(features), size=int(dead.sum()))
            self.vectors.data[dead] = features[pick]
            self.ema_sum.data[dead] = features[pick]
            self.ema_count.data[dead] = 1.0
            self.idle.data[dead] = 0.0


def nearest_codes(features: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the nearest codeword per row; the lowest index wins ties."""
    d2 = ((features[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)


def quantize(features: Tensor, cb: Codebook):
    """Return ``(indices, decoder_input, commit_term)`` for ``N x c`` features.

    The decoder input is ``f + stopgrad(V_sel - f)`` (straight-through), and
    ``commit_term = ||stopgrad(V_sel) - f||^2 / N``.
    """
    f = as_tensor(features)
    if cb.k < 1:
        raise ConfigError("empty codebook")
    if f.ndim != 2 or f.shape[1] != cb.vectors.shape[1]:
        raise DimensionError(f"features {f.shape} do not match code dim {cb.vectors.shape[1]}")
    idx = nearest_codes(f.data, cb.vectors.data)
    selected = Tensor(cb.vectors.data[idx])
    st = f + stop_gradient(selected - f)
    diff = selected - f
    commit = (diff * diff).sum() * (1.0 / f.shape[0])
    return idx, st, commit


# -- masks ------------------------------------------------------------------
@dataclass
class MaskSpec:
    """Binary hole mask description: 1 = observed, 0 = missing."""

    kind: str = "center"
    coverage: float = 0.25
    size: tuple[int, int] = (32, 32)

    @classmethod
    def parse(cls, text: str, size: int) -> "MaskSpec":
        """``center`` or ``rects:FRACTION``."""
        if text == "center":
            return cls("center", 0.25, (size, size))
        if text.startswith("rects:"):
            return cls("rects", float(text.split(":", 1)[1]), (size, size))
        raise ConfigError(f"unknown mask spec {text!r}; use 'center' or 'rects:FRACTION'")


def make_mask(spec: MaskSpec, seed: int = 0) -> np.ndarray:
    h, w = spec.size
    if spec.coverage > 0.9:
        raise ConfigError(f"coverage {spec.coverage} exceeds 0.9")
    m = np.ones((h, w))
    if spec.coverage <= 0:
        return m
    if spec.kind == "center":
        m[h // 4 : h // 4 + h // 2, w // 4 : w // 4 + w // 2] = 0.0
        return m
    if spec.kind != "rects":
        raise ConfigError(f"unknown mask kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    lo, hi = spec.coverage - 0.05, spec.coverage + 0.05
    max_side = max(2, min(h, w) // 2)
    cov = 0.0
    while cov < lo:
        rh = int(rng.integers(1, max_side + 1))
        rw = int(rng.integers(1, max_side + 1))
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        trial = m.copy()
        trial[y : y + rh, x : x + rw] = 0.0
        new_cov = 1.0 - trial.mean()
        if new_cov <= hi:
            m, cov = trial, new_cov
        else:
            max_side = max(1, max_side - 1)
    return m


def token_mask(mask: np.ndarray, latent: int) -> np.ndarray:
    """Latent cells (raster order) that contain at least one missing pixel."""
    h, w = mask.shape[-2:]
    cells = mask.reshape(*mask.shape[:-2], latent, h // latent, latent, w // latent).min(axis=(-3, -1))
    return (cells < 0.5).reshape(*mask.shape[:-2], latent * latent)


# -- masked-token prior -----------------------------------------------------
class PriorLayer(Module):
    def __init__(self, dim: int, rng):
        self.wq = Tensor(orthogonal((dim, dim), 1.0, rng), requires_grad=True)
        self.wk = Tensor(orthogonal((dim, dim), 1.0, rng), requires_grad=True)
        self.wv = Tensor(orthogonal((dim, dim), 1.0, rng), requires_grad=True)
        self.wo = Tensor(orthogonal((dim, dim), 0.5, rng), requires_grad=True)
        self.w1 = Tensor(orthogonal((dim, 2 * dim), 1.0, rng), requires_grad=True)
        self.b1 = zeros((2 * dim,))
        self.w2 = Tensor(orthogonal((2 * dim, dim), 0.5, rng), requires_grad=True)
        self.b2 = zeros((dim,))


def _heads(t: Tensor, h: int) -> Tensor:
    b, n, d = t.shape
    return transpose(reshape(t, (b, n, h, d // h)), (0, 2, 1, 3))


class MalPrior(Module):
    """Bidirectional attention over code indices; masked positions read a MASK symbol.

    The output head starts at zero, so an untrained prior predicts the
    uniform distribution over the k codes.
    """

    def __init__(self, k: int, n_tokens: int, dim: int = 32, layers: int = 2, heads: int = 4, rng=None):
        rng = rng or np.random.default_rng()
        self.k, self.n_tokens, self.heads = k, n_tokens, heads
        self.embed = Tensor(rng.standard_normal((k + 1, dim)) * 0.5, requires_grad=True)
        self.pos = Tensor(rng.standard_normal((n_tokens, dim)) * 0.5, requires_grad=True)
        self.layers = [PriorLayer(dim, rng) for _ in range(layers)]
        self.head_w = zeros((dim, k))
        self.head_b = zeros((k,))

    @property
    def mask_symbol(self) -> int:
        return self.k

    def logits(self, seq: np.ndarray) -> Tensor:
        seq = np.atleast_2d(seq)
        b, n = seq.shape
        if n != self.n_tokens:
            raise DimensionError(f"prior expects {self.n_tokens} tokens, got {n}")
        h = self.embed[seq] + self.pos
        for layer in self.layers:
            q, kk, v = (_heads(h @ w, self.heads) for w in (layer.wq, layer.wk, layer.wv))
            dk = q.shape[-1]
            att = F.softmax((q @ transpose(kk)) * (1.0 / math.sqrt(dk)), axis=-1)
            mixed = reshape(transpose(att @ v, (0, 2, 1, 3)), (b, n, -1))
            h = h + mixed @ layer.wo
            h = h + F.gelu(h @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
        return h @ self.head_w + self.head_b

    def loss(self, indices: np.ndarray, masked: np.ndarray) -> Tensor:
        """Mean over sequences of the average NLL of the masked codes."""
        indices = np.atleast_2d(indices)
        masked = np.atleast_2d(np.asarray(masked, dtype=bool))
        counts = masked.sum(axis=1)
        keep = counts > 0
        if not keep.any():
            raise UsageError("masked-token loss needs at least one masked position")
        indices, masked, counts = indices[keep], masked[keep], counts[keep]
        seq = np.where(masked, self.mask_symbol, indices)
        logp = F.log_softmax(self.logits(seq), axis=-1)
        b, n = indices.shape
        picked = logp[np.arange(b)[:, None], np.arange(n)[None, :], indices]  # (b, n)
        weights = masked / counts[:, None] / b
        return -(picked * weights).sum()

    def sample(
        self,
        indices: np.ndarray,
        masked: np.ndarray,
        temperature: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Fill masked positions one at a time in raster order."""
        rng = rng or np.random.default_rng(0)
        seq = np.where(masked, self.mask_symbol, indices).astype(np.int64)
        seq = np.atleast_2d(seq)
        masked = np.atleast_2d(masked)
        with no_grad():
            for pos in range(self.n_tokens):
                rows = np.nonzero(masked[:, pos])[0]
                if rows.size == 0:
                    continue
                logits = self.logits(seq[rows]).data[:, pos, :]
                if temperature <= 0:
                    choice = np.argmax(logits, axis=-1)
                else:
                    z = logits / temperature
                    p = np.exp(z - z.max(axis=-1, keepdims=True))
                    p /= p.sum(axis=-1, keepdims=True)
                    choice = np.array([rng.choice(self.k, p=pi) for pi in p])
                seq[rows, pos] = choice
        return seq.reshape(np.shape(indices))


# -- the assembled network --------------------------------------------------
class DWTNet(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.enc = Encoder(cfg, rng)
        self.dwt = DwtSites(cfg, rng)
        self.ffc = FfcSites(cfg, rng)
        self.dec = Decoder(cfg, rng)
        self.codebook = Codebook(cfg.codebook_size, cfg.code_dim, rng)
        n_tokens = cfg.latent_size**2
        self.prior = MalPrior(cfg.codebook_size, n_tokens, cfg.prior_dim, cfg.prior_layers, cfg.prior_heads, rng)
        if cfg.decoder_noise:
            self.noise_logvar = Tensor(np.full(cfg.code_dim, -4.0), requires_grad=True)
        self._noise_rng = np.random.default_rng([cfg.seed, 7])

    # generator parameters exclude the prior (trained with its own optimiser)
    def generator_parameters(self) -> list[Tensor]:
        return [p for n, p in self.named_parameters() if not n.startswith("prior.")]

    def encode(self, x_m: Tensor, mask: np.ndarray):
        """Masked image (B x 3 x H x W) plus mask -> features (B x c x h x w) and skips."""
        x_m = as_tensor(x_m)
        b = x_m.shape[0]
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64).reshape(-1, 1, *x_m.shape[-2:]), (b, 1, *x_m.shape[-2:]))
        h = concat([x_m * m, Tensor(m)], axis=1)
        e = self.enc
        s32 = F.lrelu(e.conv_in(h), SLOPE)
        s16 = e.down16(s32)
        s8 = self.dwt.enc(e.down8(s16))
        code = e.to_code(e.down4(s8))
        return code, (s8, s16, s32)

    def decode(self, z: Tensor, skips) -> Tensor:
        s8, s16, s32 = skips
        d, f = self.dec, self.ffc
        h = d.up8(d.up4(d.from_code(z)))
        h = res_ffc_fuse(self.dwt.dec(h), s8, f.fuse8)
        h = res_ffc_fuse(d.up16(h), s16, f.fuse16)
        h = res_ffc_fuse(d.up32(h), s32, f.fuse32)
        return F.tanh(d.conv_out(h))

    def features_to_tokens(self, code: Tensor) -> Tensor:
        b, c, h, w = code.shape
        return reshape(transpose(reshape(code, (b, c, h * w)), (0, 2, 1)), (b * h * w, c))

    def tokens_to_grid(self, tokens: Tensor, b: int) -> Tensor:
        n = self.cfg.latent_size
        c = tokens.shape[-1]
        return reshape(transpose(reshape(tokens, (b, n * n, c)), (0, 2, 1)), (b, c, n, n))

    def forward(self, x_m: Tensor, mask: np.ndarray, use_quantizer: bool = True, train_noise: bool = False):
        """Reconstruct from the encoder's own codes (teacher forcing for the masked tokens).

        Returns ``(output, info)`` with ``info`` holding indices, commitment
        term, encoder features and skips.
        """
        x_m = as_tensor(x_m)
        b = x_m.shape[0]
        code, skips = self.encode(x_m, mask)
        tokens = self.features_to_tokens(code)
        info = {"features": tokens, "skips": skips}
        if use_quantizer:
            idx, st, commit = quantize(tokens, self.codebook)
            info.update(indices=idx.reshape(b, -1), commit=commit)
        else:
            st = tokens
        z = self.tokens_to_grid(st, b)
        if train_noise and self.cfg.decoder_noise:
            eps = self._noise_rng.standard_normal(z.shape)
            z = z + reshape(exp(self.noise_logvar * 0.5), (1, -1, 1, 1)) * eps
        return self.decode(z, skips), info


def build_model(cfg: ModelConfig | None = None) -> DWTNet:
    """Construct the network and verify every stage against :func:`shape_plan`."""
    cfg = cfg or ModelConfig()
    cfg.validate()
    model = DWTNet(cfg)
    s = cfg.image_size
    with no_grad():
        x = Tensor(np.zeros((1, 3, s, s)))
        code, skips = model.encode(x, np.ones((s, s)))
        got = {
            "enc.conv_in": skips[2].shape[1:],
            "enc.down16": skips[1].shape[1:],
            "enc.dwt": skips[0].shape[1:],
            "enc.to_code": code.shape[1:],
        }
        out = model.decode(code, skips)
        got["dec.conv_out"] = out.shape[1:]
    plan = dict(shape_plan(cfg))
    for name, shape in got.items():
        if tuple(shape) != plan[name]:
            raise ConfigError(f"stage {name} produced {shape}, plan expects {plan[name]}")
    return model


def inpaint(
    model: DWTNet,
    x_m: np.ndarray,
    mask: np.ndarray,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
    use_prior: bool = True,
) -> np.ndarray:
    """Complete masked images (B x 3 x H x W or 3 x H x W, values in [-1, 1]).

    Observed pixels are copied through unchanged; the hole is taken from the
    decoder after the prior has re-sampled the codes of masked latent cells.
    """
    x = np.asarray(x_m, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    s = model.cfg.image_size
    mask = np.asarray(mask, dtype=np.float64)
    if x.shape[1:] != (3, s, s) or mask.shape[-2:] != (s, s):
        raise DimensionError(f"model expects 3x{s}x{s} images and {s}x{s} masks, got {x.shape[1:]} / {mask.shape}")
    b = x.shape[0]
    masks = np.broadcast_to(mask.reshape(-1, s, s), (b, s, s))
    with no_grad():
        code, skips = model.encode(Tensor(x), masks)
        tokens = model.features_to_tokens(code)
        idx = nearest_codes(tokens.data, model.codebook.vectors.data).reshape(b, -1)
        holes = token_mask(masks, model.cfg.latent_size)
        if use_prior and holes.any():
            idx = model.prior.sample(idx, holes, temperature, rng)
        z = model.tokens_to_grid(Tensor(model.codebook.vectors.data[idx.reshape(-1)]), b)
        decoded = model.decode(z, skips).data
    m4 = masks[:, None]
    out = m4 * x + (1.0 - m4) * decoded
    return out[0] if single else out

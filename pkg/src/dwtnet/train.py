"""Training loop for the desk-scale inpainting model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .data import make_corpus, save_grid
from .errors import NumericError
from .losses import (
    LOSS_FIELDS,
    Discriminator,
    FeatureExtractor,
    LossWeights,
    adversarial_loss,
    gradient_loss,
    perceptual_style_loss,
    pixel_loss,
    total_loss,
)
from .metrics import masked_l1
from .model import DWTNet, MaskSpec, ModelConfig, build_model, inpaint, make_mask, token_mask
from .normreg import rescale_module
from .optim import Adam
from .tensor import Tensor, backward

METRIC_FIELDS = ["step", "masked_l1"]


@dataclass
class TrainConfig:
    steps: int = 300
    batch: int = 8
    lr: float = 1e-4
    lr_prior: float = 3e-4
    lr_disc: float = 1e-4
    corpus: str = "stripes"
    corpus_size: int = 256
    corpus_seed: int = 0
    mask: str = "center"
    norm_reg: bool = True
    rescale_every: int = 10
    checkpoint_every: int = 100
    w_grad: float = 5.0
    w_adv: float = 0.1
    w_perc: float = 0.1
    w_style: float = 250.0
    w_commit: float = 0.25
    samples: bool = True

    def weights(self) -> LossWeights:
        return LossWeights(self.w_grad, self.w_adv, self.w_perc, self.w_style, self.w_commit)


@dataclass
class TrainResult:
    model: DWTNet
    losses: list[dict] = field(default_factory=list)
    masked_l1: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def _fmt(v) -> str:
    return repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v)


class CsvLog:
    def __init__(self, path: Path | None, fields):
        self.fields = list(fields)
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._w = csv.writer(self._fh, lineterminator="\r\n")
            self._w.writerow(self.fields)

    def write(self, row: dict) -> None:
        if self._fh:
            self._w.writerow([_fmt(row[f]) for f in self.fields])

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def generator_convs(name: str) -> bool:
    return not name.startswith("prior.")


def save_model(path, model: DWTNet) -> None:
    save_tensors(path, model.state_dict())


def load_model(path, cfg: ModelConfig) -> DWTNet:
    model = build_model(cfg)
    model.load_state_dict(load_tensors(path))
    return model


def train(
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    seed: int = 0,
    out: str | Path | None = None,
    images: np.ndarray | None = None,
) -> TrainResult:
    """Run ``tcfg.steps`` generator / discriminator / prior updates.

    With ``out`` set, writes ``loss.csv``, ``train_metrics.csv``,
    periodic checkpoints and a sample grid.
    """
    out_dir = Path(out) if out is not None else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = build_model(mcfg)
    s = mcfg.image_size
    if images is None:
        images = make_corpus(tcfg.corpus, tcfg.corpus_size, s, tcfg.corpus_seed)
    mask = make_mask(MaskSpec.parse(tcfg.mask, s), seed)
    holes = token_mask(mask, mcfg.latent_size)
    weights = tcfg.weights()

    disc = Discriminator(mcfg.ch, np.random.default_rng([seed, 1]))
    fx = FeatureExtractor(seed=seed)
    opt_g = Adam(model.generator_parameters(), lr=tcfg.lr)
    opt_p = Adam(model.prior.parameters(), lr=tcfg.lr_prior)
    opt_d = Adam(disc.parameters(), lr=tcfg.lr_disc)
    cb_rng = np.random.default_rng([seed, 2])

    loss_log = CsvLog(out_dir / "loss.csv" if out_dir else None, LOSS_FIELDS)
    metric_log = CsvLog(out_dir / "train_metrics.csv" if out_dir else None, METRIC_FIELDS)
    result = TrainResult(model)
    if tcfg.norm_reg:
        rescale_module(model, generator_convs)
    try:
        for step in range(1, tcfg.steps + 1):
            batch = images[rng.choice(len(images), size=tcfg.batch, replace=False)]
            x = Tensor(batch)
            x_m = Tensor(batch * mask)
            try:
                if not model.codebook.initialised.data:
                    with_codes, _ = model.encode(x_m, mask)
                    model.codebook.init_from(model.features_to_tokens(with_codes).data, cb_rng)
                pred, info = model.forward(x_m, mask, train_noise=True)
                x_r = pred * (1.0 - mask) + x_m * mask


                # discriminator update
                _, loss_d = adversarial_loss(disc, x_r, x)
                opt_d.zero_grad()
                backward(loss_d)
                opt_d.step()

                adv_g, _ = adversarial_loss(disc, x_r, x, update=False)
                perc, style = perceptual_style_loss(x_r, x, fx)
                terms = {
                    "pixel": pixel_loss(x_r, x),
                    "grad": gradient_loss(x_r, x),
                    "adv": adv_g,
                    "perc": perc,
                    "style": style,
                }
                mal = model.prior.loss(info["indices"], np.broadcast_to(holes, info["indices"].shape))
                total, parts = total_loss(terms, weights, info["commit"], mal)
            except NumericError as exc:
                if out_dir:
                    np.save(out_dir / "failed_batch.npy", batch)
                raise NumericError(f"step {step}: {exc}") from exc
            opt_g.zero_grad()
            opt_p.zero_grad()
            backward(total)
            opt_g.step()
            opt_p.step()
            model.codebook.ema_update(info["features"].data, info["indices"].reshape(-1), cb_rng)
            if tcfg.norm_reg and step % tcfg.rescale_every == 0:
                rescale_module(model, generator_convs)

            row = {
                "step": step,
                "pixel": parts["pixel"],
                "grad": parts["grad"],
                "adv_g": parts["adv"],
                "adv_d": float(loss_d.data),
                "perc": parts["perc"],
                "style": parts["style"],
                "commit": parts["commit"],
                "mal": parts["mal"],
                "total": parts["total"],
            }
            result.losses.append(row)
            l1 = masked_l1(pred.data, batch, mask)
            result.masked_l1.append(l1)
            loss_log.write(row)
            metric_log.write({"step": step, "masked_l1": l1})
            if out_dir and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
                save_model(out_dir / f"step_{step:05d}.ckpt", model)
    finally:
        loss_log.close()
        metric_log.close()
    if out_dir:
        result.checkpoint = out_dir / "final.ckpt"
        save_model(result.checkpoint, model)
        if tcfg.samples:
            show = images[: min(8, len(images))]
            save_grid(out_dir / "samples.png", np.concatenate([show * mask, inpaint(model, show * mask, mask), show]))
    return result

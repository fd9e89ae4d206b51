"""Tiny stripes run with and without norm regularization, plus held-out masked PSNR.

    python scripts/train_tiny.py --config configs/tiny_stripes.cfg --out runs/tiny
"""

import argparse
from pathlib import Path

import numpy as np

from dwtnet import config as cfgio
from dwtnet.data import make_corpus
from dwtnet.metrics import psnr, to_unit
from dwtnet.model import MaskSpec, ModelConfig, inpaint, make_mask
from dwtnet.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/tiny_stripes.cfg")
    ap.add_argument("--steps", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/tiny")
    args = ap.parse_args()

    values = cfgio.load(args.config)
    mk = {k: v for k, v in values.items() if k in ModelConfig.field_names()}
    mcfg = cfgio.apply(ModelConfig(), mk)
    base = cfgio.apply(TrainConfig(), {k: v for k, v in values.items() if k not in mk})
    if args.steps:
        base.steps = args.steps

    held = make_corpus(base.corpus, 64, mcfg.image_size, seed=12345)
    mask = make_mask(MaskSpec.parse(base.mask, mcfg.image_size), args.seed)
    hole = np.broadcast_to(mask < 0.5, held.shape)
    print(f"zero-fill masked PSNR {psnr(to_unit(held * mask), to_unit(held), hole):.2f} dB")
    for reg in (True, False):
        tcfg = cfgio.apply(base, {"norm_reg": str(reg)})
        res = train(mcfg, tcfg, seed=args.seed, out=Path(args.out) / ("reg" if reg else "plain"))
        l1 = np.asarray(res.masked_l1)
        out = inpaint(res.model, held * mask, mask)
        print(
            f"norm_reg={reg!s:<5}  masked L1 {l1[:10].mean():.4f} -> {l1[-10:].mean():.4f} "
            f"({100 * (1 - l1[-10:].mean() / l1[:10].mean()):.1f}% drop), "
            f"held-out masked PSNR {psnr(to_unit(out), to_unit(held), hole):.2f} dB"
        )


if __name__ == "__main__":
    main()

"""Command-line entry points: ``train``, ``eval``, ``inpaint`` and ``grad-probe``.

Every command is a pure function of (config file, seed, input files); all
tables are written as CSV with a header row, images as 8-bit PNG.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgio
from .data import load_image, save_image, to_uint8
from .errors import ConfigError, DimensionError
from .metrics import psnr, ssim, to_unit
from .model import MaskSpec, ModelConfig, inpaint, make_mask
from .normreg import PROBE_FIELDS, TREND_FIELDS, run_probe, run_trend, write_csv
from .train import TrainConfig, load_model, train

log = logging.getLogger("dwtnet")

EVAL_FIELDS = ["image", "status", "psnr", "ssim", "psnr_masked", "ssim_masked", "psnr_masked_zero_fill"]
SUMMARY_FIELDS = ["images", "skipped", "psnr", "ssim", "psnr_masked", "ssim_masked", "psnr_masked_zero_fill"]


@dataclass
class ProbeConfig:
    c: int = 8
    d: int = 16
    runs: int = 5
    trials: int = 8
    pooling: bool = False
    trend_steps: int = 100
    trend_every: int = 10
    trend_lr: float = 1e-2


def _load_configs(path: str | None):
    """Split one flat key=value file across the model, training and probe configs."""
    values = cfgio.load(path) if path else {}
    known = set()
    out = []
    for obj in (ModelConfig(), TrainConfig(), ProbeConfig()):
        names = {f for f in vars(obj)}
        mine = {k: v for k, v in values.items() if k in names}
        known |= mine.keys()
        out.append(cfgio.apply(obj, mine))
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return out


def _seed(args) -> int:
    return int(args.seed)


def _mask(args, mcfg: ModelConfig) -> np.ndarray:
    return make_mask(MaskSpec.parse(args.mask, mcfg.image_size), _seed(args))


def _mean(rows, key):
    vals = [r[key] for r in rows]
    return float(np.mean(vals)) if vals else float("nan")


def cmd_train(args) -> int:
    mcfg, tcfg, _ = _load_configs(args.config)
    if args.steps is not None:
        tcfg.steps = args.steps
    tcfg.mask = args.mask
    mcfg.seed = _seed(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgio.dump(mcfg, tcfg))
    images = None
    if args.data:
        paths = sorted(Path(args.data).glob("*.png"))
        images = np.stack([load_image(p) for p in paths])
    result = train(mcfg, tcfg, seed=_seed(args), out=out, images=images)
    log.info("trained %d steps, %d parameters; checkpoint %s", tcfg.steps, result.model.num_parameters(), result.checkpoint)
    return 0


def cmd_eval(args) -> int:
    mcfg, _, _ = _load_configs(args.config)
    model = load_model(args.checkpoint, mcfg)
    mask = _mask(args, mcfg)
    hole = mask < 0.5
    rows, skipped = [], 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(_seed(args))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(EVAL_FIELDS)
        for p in sorted(Path(args.data).glob("*")):
            if not p.is_file():
                continue
            try:
                x = load_image(p)
                if x.shape[1:] != (mcfg.image_size, mcfg.image_size):
                    raise DimensionError(f"expected {mcfg.image_size}x{mcfg.image_size}, got {x.shape[1:]}")
            except Exception as exc:  # unreadable or wrong size
                log.warning("skipping %s: %s", p.name, exc)
                skipped += 1
                w.writerow([p.name, "skipped", "", "", "", "", ""])
                continue
            x_r = inpaint(model, x * mask, mask, args.temperature, rng)
            a, b = to_unit(to_uint8(x_r) / 127.5 - 1.0), to_unit(x)
            region = np.broadcast_to(hole, a.shape)
            row = dict(
                psnr=psnr(a, b),
                ssim=ssim(a, b),
                psnr_masked=psnr(a, b, region) if hole.any() else 99.0,
                ssim_masked=ssim(a, b, hole) if hole.any() else 1.0,
                psnr_masked_zero_fill=psnr(to_unit(x * mask), b, region) if hole.any() else 99.0,
            )
            rows.append(row)
            w.writerow([p.name, "ok", *(repr(row[k]) for k in EVAL_FIELDS[2:])])
    summary = {"images": len(rows), "skipped": skipped}
    summary.update({k: _mean(rows, k) for k in SUMMARY_FIELDS[2:]})
    write_csv(out / "summary.csv", [summary], SUMMARY_FIELDS)
    log.info("evaluated %d images (%d skipped): masked PSNR %.3f dB", len(rows), skipped, summary["psnr_masked"])
    return 0


def cmd_inpaint(args) -> int:
    mcfg, _, _ = _load_configs(args.config)
    model = load_model(args.checkpoint, mcfg)
    x = load_image(args.image)
    s = mcfg.image_size
    if x.shape[1:] != (s, s):
        raise DimensionError(f"image {args.image} is {x.shape[2]}x{x.shape[1]}; the model expects {s}x{s}")
    mask = _mask(args, mcfg)
    x_r = inpaint(model, x * mask, mask, args.temperature, np.random.default_rng(_seed(args)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "inpainted.png", x_r)
    save_image(out / "mask.png", mask)
    save_image(out / "masked_input.png", x * mask)
    return 0


def cmd_grad_probe(args) -> int:
    _, _, pcfg = _load_configs(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pooling = (pcfg.pooling,) * 4
    rows = run_probe(pcfg.c, pcfg.d, pcfg.runs, pcfg.trials, _seed(args), pooling)
    write_csv(out / "grad_probe.csv", rows, PROBE_FIELDS)
    steps = args.steps if args.steps is not None else pcfg.trend_steps
    trend = run_trend(pcfg.c, pcfg.d, steps, pcfg.trend_every, pcfg.trend_lr, _seed(args))
    write_csv(out / "grad_trend.csv", trend, TREND_FIELDS)
    summary = []
    for cond in ("rescaled", "plain"):
        for layer in range(1, 5):
            vals = [r["ratio"] for r in rows if r["condition"] == cond and r["layer"] == layer]
            summary.append(dict(condition=cond, layer=layer, c=pcfg.c, d=pcfg.d, mean_ratio=float(np.mean(vals))))
    write_csv(out / "grad_probe_summary.csv", summary, ["condition", "layer", "c", "d", "mean_ratio"])
    for r in summary:
        print(f"{r['condition']:>9} layer {r['layer']}: mean ratio {r['mean_ratio']:.4f}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "inpaint": cmd_inpaint, "grad-probe": cmd_grad_probe}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dwtnet", description="Desk-scale DWTNet inpainting experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=f"runs/{name}")
        p.add_argument("--mask", default="center", help="center | rects:FRACTION")
        p.add_argument("--steps", type=int)
        p.add_argument("--temperature", type=float, default=0.0)
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="directory of PNG images")
        p.add_argument("--image", help="single PNG image (inpaint)")
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.seed < 0 or args.seed >= 2**64:
        raise SystemExit("--seed must be an unsigned 64-bit integer")
    need = {"eval": ("checkpoint", "data"), "inpaint": ("checkpoint", "image")}.get(args.command, ())
    missing = [f"--{n}" for n in need if getattr(args, n) is None]
    if missing:
        raise SystemExit(f"{args.command} requires {' '.join(missing)}")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

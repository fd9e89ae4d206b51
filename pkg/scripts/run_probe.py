"""Gradient-norm ratio of a 4-layer conv stack, with and without norm-preserving rescaling.

Prints per-layer mean ratios for several (c, d) widths and the drift of the
unrescaled stack while it trains.

    python scripts/run_probe.py --out runs/probe
"""

import argparse
from pathlib import Path

import numpy as np

from dwtnet.normreg import PROBE_FIELDS, TREND_FIELDS, run_probe, run_trend, write_csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--trials", type=int, default=8)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--pooling", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/probe")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for c, d in [(8, 16), (16, 16), (16, 8)]:
        got = run_probe(c, d, args.runs, args.trials, args.seed, (args.pooling,) * 4)
        rows += got
        for cond in ("rescaled", "plain"):
            means = [np.mean([r["ratio"] for r in got if r["condition"] == cond and r["layer"] == L]) for L in range(1, 5)]
            print(f"c={c:<3d}d={d:<3d}{cond:>9}: " + "  ".join(f"{m:.3f}" for m in means))
    write_csv(out / "grad_probe.csv", rows, PROBE_FIELDS)

    trend = run_trend(8, 16, steps=args.steps, seed=args.seed)
    write_csv(out / "grad_trend.csv", trend, TREND_FIELDS)
    for step in sorted({r["step"] for r in trend}):
        drift = np.mean([abs(r["ratio"] - 1) for r in trend if r["step"] == step and r["condition"] == "plain"])
        print(f"step {step:4d}  plain |ratio - 1| = {drift:.3f}")


if __name__ == "__main__":
    main()

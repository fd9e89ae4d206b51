"""Write a seeded synthetic texture corpus as 8-bit PNGs.

    python scripts/make_corpus.py --kind stripes --n 64 --out data/stripes
"""

import argparse

from dwtnet.data import KINDS, make_corpus, save_grid, write_corpus


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kind", default="stripes", choices=[*KINDS, "mixed"])
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="data/corpus")
    args = ap.parse_args()

    images = make_corpus(args.kind, args.n, args.size, args.seed)
    paths = write_corpus(args.out, images)
    save_grid(f"{args.out.rstrip('/')}_preview.png", images[:32])
    print(f"wrote {len(paths)} images to {args.out}")


if __name__ == "__main__":
    main()

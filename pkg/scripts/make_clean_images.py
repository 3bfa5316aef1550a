"""Write procedural well-exposed scenes as PPM files, the input to ``rxf synth-data``."""

import argparse
from pathlib import Path

from retinexformer.data import procedural_clean_image, save_image


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        save_image(procedural_clean_image(args.size, args.size, args.seed + i), out / f"scene{i:04d}.ppm")
    print(f"wrote {args.count} scenes to {out}")


if __name__ == "__main__":
    main()

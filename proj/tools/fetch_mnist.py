#!/usr/bin/env python3
"""Build MNIST-format IDX files from the digit arrays in the `mnist` npm package.

The package ships roughly 10k handwritten digits as JSON arrays of p/255
values rounded to three decimals; pixel bytes are recovered as round(v * 255).
Samples are shuffled with a fixed seed and split into train and t10k files.
"""

import argparse
import json
import random
import struct
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

PACKAGE = "mnist@1.1.0"
SIDE = 28


def fetch_package(workdir: Path) -> Path:
    out = subprocess.run(["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.strip().splitlines()[-1]
    with tarfile.open(workdir / out) as tar:
        tar.extractall(workdir, filter="data")
    return workdir / "package" / "src" / "digits"


def load_digits(digits_dir: Path):
    samples = []
    for digit in range(10):
        raw = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
        per = SIDE * SIDE
        for start in range(0, len(raw) - per + 1, per):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in raw[start:start + per])
            samples.append((pixels, digit))
    return samples


def write_images(path: Path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)


def write_labels(path: Path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "data" / "mnist")
    ap.add_argument("--digits", type=Path, help="existing package/src/digits directory")
    ap.add_argument("--test-count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        digits_dir = args.digits or fetch_package(Path(tmp))
        samples = load_digits(digits_dir)

    random.Random(args.seed).shuffle(samples)
    test, train = samples[:args.test_count], samples[args.test_count:]
    args.out.mkdir(parents=True, exist_ok=True)
    write_images(args.out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(args.out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(args.out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(args.out / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

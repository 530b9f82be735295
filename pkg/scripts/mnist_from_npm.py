"""Convert the digits bundled in the npm ``mnist`` package into IDX files.

The package ships 10,000 MNIST digits as JSON (pixel/255 rounded to three
decimals, 1000 per class). This writes a seeded train/test split in the
standard IDX layout so ``dataset = mnist-idx`` can read it:

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/mnist_from_npm.py package data/mnist
"""

from __future__ import annotations

import argparse
import json
import struct
from pathlib import Path

import numpy as np


def load_digits(pkg: Path) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"])
        px = np.rint(flat * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx(path: Path, arr: np.ndarray, magic: int):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape)
    path.write_bytes(header + arr.tobytes())


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("package", type=Path, help="extracted npm package directory")
    p.add_argument("out", type=Path)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    x, y = load_digits(args.package)
    perm = np.random.default_rng(args.seed).permutation(len(x))
    x, y = x[perm], y[perm]
    args.out.mkdir(parents=True, exist_ok=True)
    splits = {"t10k": slice(0, args.n_test), "train": slice(args.n_test, None)}
    for name, sl in splits.items():
        write_idx(args.out / f"{name}-images-idx3-ubyte", x[sl], 0x803)
        write_idx(args.out / f"{name}-labels-idx1-ubyte", y[sl], 0x801)
        print(f"{name}: {len(x[sl])} images")


if __name__ == "__main__":
    main()

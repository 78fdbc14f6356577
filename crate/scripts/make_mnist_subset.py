#!/usr/bin/env python3
"""Build the desk-scale MNIST subset in data/mnist/ as raw IDX files.

Source: the `mnist` npm package (MIT, https://github.com/cazala/mnist), which
ships 10k MNIST digits as JSON with pixel intensities in [0, 1] rounded to
three decimals. Pixels are mapped back to bytes with round(v * 255).

Usage:
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

N_TRAIN = 2500
N_TEST = 1000
SEED = 20180901


def load(digits_dir):
    samples = []
    for label in range(10):
        with open(Path(digits_dir) / f"{label}.json") as fh:
            flat = json.load(fh)["data"]
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i:i + 784])
            samples.append((pixels, label))
    return samples


def write(out_dir, prefix, samples):
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
        for pixels, _ in samples:
            fh.write(pixels)
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(samples)))
        fh.write(bytes(label for _, label in samples))


def main():
    digits_dir, out_dir = sys.argv[1], Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load(digits_dir)
    random.Random(SEED).shuffle(samples)
    write(out_dir, "train", samples[:N_TRAIN])
    write(out_dir, "t10k", samples[N_TRAIN:N_TRAIN + N_TEST])


if __name__ == "__main__":
    main()

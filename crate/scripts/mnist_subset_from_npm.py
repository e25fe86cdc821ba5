#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (MIT licensed, https://github.com/cazala/mnist) ships 10,000
MNIST digits as JSON arrays of pixel values scaled to [0, 1]. This script
takes a class-stratified 5,000 / 1,000 train/test split and writes gzipped
IDX files that the `load_mnist_idx` loader reads directly.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(data) // 784
        assert count >= TRAIN_PER_CLASS + TEST_PER_CLASS
        rows = [
            [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            for i in range(TRAIN_PER_CLASS + TEST_PER_CLASS)
        ]
        train += [(r, digit) for r in rows[:TRAIN_PER_CLASS]]
        test += [(r, digit) for r in rows[TRAIN_PER_CLASS:]]
    rng = random.Random(20190411)
    rng.shuffle(train)
    rng.shuffle(test)
    for prefix, split in (("train", train), ("t10k", test)):
        write_images(dst / f"{prefix}-images-idx3-ubyte.gz", [r for r, _ in split])
        write_labels(dst / f"{prefix}-labels-idx1-ubyte.gz", [d for _, d in split])
    print(f"wrote {len(train)} train / {len(test)} test images to {dst}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package (v1.1.0) into
gzipped IDX files.

The package stores each image as 784 floats equal to byte/255 rounded to
three decimals, so rounding back to bytes is lossless.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The first 80% of each digit's images go to the train files and the rest
to the t10k files.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            fh.write(bytes(img))


def write_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(labels))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        rows = [data[i : i + 784] for i in range(0, len(data), 784)]
        cut = (len(rows) * 4) // 5
        for k, row in enumerate(rows):
            img = [int(round(v * 255)) for v in row]
            (train if k < cut else test).append((img, digit))
    for name, items in (("train", train), ("t10k", test)):
        write_images(dst / f"{name}-images-idx3-ubyte.gz", [img for img, _ in items])
        write_labels(dst / f"{name}-labels-idx1-ubyte.gz", [lab for _, lab in items])
        print(f"{name}: {len(items)} images")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

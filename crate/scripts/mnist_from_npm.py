#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package (v1.1.0) to IDX files.

The package ships 10000 MNIST digits as JSON, grouped by class, with pixel
intensities already divided by 255 and rounded to three decimals. This script
restores the byte values, shuffles with a fixed seed and writes an 8000-sample
training split and a 2000-sample test split as gzip-compressed IDX files.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

TRAIN = 8000


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">I", magic))
        for d in dims:
            fh.write(struct.pack(">I", d))
        fh.write(payload.astype(np.uint8).tobytes())


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        data = json.loads(Path(src, f"{digit}.json").read_text())["data"]
        block = np.asarray(data, dtype=np.float64).reshape(-1, 784)
        images.append(np.clip(np.rint(block * 255.0), 0, 255))
        labels.extend([digit] * len(block))
    images = np.vstack(images)
    labels = np.asarray(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    for name, sl in (("train", slice(0, TRAIN)), ("test", slice(TRAIN, None))):
        img, lab = images[sl], labels[sl]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 2051, (len(img), 28, 28), img)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 2049, (len(lab),), lab)
        print(name, len(lab), np.bincount(lab, minlength=10))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

#!/usr/bin/env python3
"""Assemble a 15k-digit MNIST subset as gzipped IDX files.

The full MNIST mirrors are not reachable from every build environment, so this
script pulls two package-registry redistributions of real MNIST digits:

  * the npm package ``mnist`` (10,000 digits stored as JSON, values v/255
    rounded to three decimals; rounding back to bytes is exact), and
  * the ``mlxtend`` wheel from PyPI (5,000 digits as CSV bytes).

The two sets are disjoint. Digits are shuffled with a fixed seed and written as
12,000 "train" and 3,000 "t10k" examples in the standard IDX layout.

Usage: python3 scripts/fetch_mnist.py [OUT_DIR]   (default: data/mnist)
"""
import gzip
import io
import json
import struct
import subprocess
import sys
import tarfile
import tempfile
import zipfile
from pathlib import Path

import numpy as np


def npm_digits(tmp: Path):
    subprocess.run(["npm", "pack", "-q", "mnist@1.1.0"], cwd=tmp, check=True,
                   stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    images, labels = [], []
    with tarfile.open(tmp / "mnist-1.1.0.tgz") as tar:
        for d in range(10):
            member = tar.extractfile(f"package/src/digits/{d}.json")
            data = np.array(json.load(member)["data"], dtype=np.float64)
            rows = np.rint(data.reshape(-1, 784) * 255.0).clip(0, 255)
            images.append(rows.astype(np.uint8))
            labels.append(np.full(len(rows), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def mlxtend_digits(tmp: Path):
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q",
                    "mlxtend==0.24.0", "-d", str(tmp)], check=True)
    wheel = next(tmp.glob("mlxtend-*.whl"))
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    return table[:, 1:].astype(np.uint8), table[:, 0].astype(np.uint8)


def write_idx(path: Path, images: np.ndarray, labels: np.ndarray, stem: str):
    with gzip.GzipFile(path / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(path / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.tobytes())


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        a_img, a_lab = npm_digits(tmp)
        b_img, b_lab = mlxtend_digits(tmp)
    images = np.concatenate([a_img, b_img])
    labels = np.concatenate([a_lab, b_lab])
    order = np.random.default_rng(20230201).permutation(len(labels))
    images, labels = images[order], labels[order]
    write_idx(out, images[:12000], labels[:12000], "train")
    write_idx(out, images[12000:], labels[12000:], "t10k")
    print(f"wrote {len(labels)} digits to {out}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Convert the 5,000-digit MNIST subset (CSV: 784 pixels then label) to IDX.

The subset ships with the `mlxtend` Python wheel as
`mlxtend/data/data/mnist_5k.csv.gz` (500 digits per class). The first 400
digits of every class go to the train split, the remaining 100 to test.

usage: mnist5k_to_idx.py <mnist_5k.csv.gz | mlxtend wheel> <out_dir>
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path

TRAIN_PER_CLASS = 400


def load_rows(src):
    if src.endswith(".whl"):
        raw = zipfile.ZipFile(src).read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = Path(src).read_bytes()
    text = gzip.decompress(raw).decode()
    for line in text.splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        yield vals[:784], vals[784]


def write_idx(path, images, labels):
    n = len(labels)
    img = struct.pack(">IIII", 2051, n, 28, 28) + bytes(p for im in images for p in im)
    lab = struct.pack(">II", 2049, n) + bytes(labels)
    # mtime=0 keeps the archives byte-reproducible
    with open(path.with_name(path.name + "-images-idx3-ubyte.gz"), "wb") as f:
        f.write(gzip.compress(img, mtime=0))
    with open(path.with_name(path.name + "-labels-idx1-ubyte.gz"), "wb") as f:
        f.write(gzip.compress(lab, mtime=0))


def main():
    src, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    seen = [0] * 10
    split = {"train": ([], []), "t10k": ([], [])}
    for pixels, label in load_rows(src):
        key = "train" if seen[label] < TRAIN_PER_CLASS else "t10k"
        seen[label] += 1
        split[key][0].append(pixels)
        split[key][1].append(label)
    for key, (images, labels) in split.items():
        write_idx(out / key, images, labels)
        print(f"{key}: {len(labels)} digits")


if __name__ == "__main__":
    main()

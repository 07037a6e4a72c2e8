#!/usr/bin/env python3
"""Write a 5000-image MNIST subset as IDX files.

The subset ships inside the mlxtend wheel (BSD-3, data from the original
MNIST distribution). The wheel is fetched with `pip download` unless a
path is given. Output: 400 images/class train, 100 images/class test,
in the first-n-per-class order of the source file.

    python3 scripts/prepare_mnist_subset.py [--wheel PATH] [--out data/mnist]
"""
import argparse
import glob
import gzip
import os
import struct
import subprocess
import tempfile
import zipfile


def fetch_wheel(tmp):
    subprocess.run(
        ["pip", "download", "--no-deps", "-d", tmp, "mlxtend==0.24.0"],
        check=True,
    )
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def write_idx(path, images, labels):
    with open(path + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(path + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or fetch_wheel(tmp)
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().strip().split("\n")

    by_class = {c: [] for c in range(10)}
    for line in rows:
        vals = [int(float(v)) for v in line.split(",")]
        by_class[vals[-1]].append(vals[:-1])

    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(10):
        imgs = by_class[c]
        n = args.train_per_class
        train_x += imgs[:n]
        train_y += [c] * len(imgs[:n])
        test_x += imgs[n:]
        test_y += [c] * len(imgs[n:])

    os.makedirs(args.out, exist_ok=True)
    write_idx(os.path.join(args.out, "train"), train_x, train_y)
    write_idx(os.path.join(args.out, "t10k"), test_x, test_y)
    print(f"train {len(train_y)} test {len(test_y)} -> {args.out}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Convert the digit tables of the `mnist` npm package to gzip IDX files.

The package ships between 863 and 1127 real MNIST digits per class (10000
in total) as 784 intensities in [0, 1]. The first TRAIN_PER_CLASS of each
class become the training split and the rest (2000) the test split, in
class-major order. Output uses the standard MNIST
file names so the result can serve as a file:// mirror.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/npm_mnist_to_idx.py package/src/digits data/mnist
"""
import argparse
import gzip
import hashlib
import json
import pathlib
import struct

TRAIN_PER_CLASS = 800


def idx_bytes(dims, payload):
    head = struct.pack(">BBBB", 0, 0, 0x08, len(dims)) + b"".join(struct.pack(">I", d) for d in dims)
    return head + bytes(payload)


def write_gz(path, data):
    with open(path, "wb") as raw:
        with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0, compresslevel=9) as gz:
            gz.write(data)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    args = ap.parse_args()
    src = pathlib.Path(args.digits_dir)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    splits = {"train": ([], []), "t10k": ([], [])}
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        if len(flat) % 784:
            raise SystemExit(f"{label}.json: length {len(flat)} is not a multiple of 784")
        for i in range(len(flat) // 784):
            pixels = [min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784]]
            images, labels = splits["train" if i < TRAIN_PER_CLASS else "t10k"]
            images.extend(pixels)
            labels.append(label)

    for prefix, (images, labels) in splits.items():
        count = len(labels)
        files = {
            f"{prefix}-images-idx3-ubyte.gz": idx_bytes([count, 28, 28], images),
            f"{prefix}-labels-idx1-ubyte.gz": idx_bytes([count], labels),
        }
        for name, data in files.items():
            write_gz(out / name, data)
            digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
            print(f"{name} {count} {digest}")


if __name__ == "__main__":
    main()

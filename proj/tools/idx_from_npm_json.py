#!/usr/bin/env python3
"""Convert the JSON digit/clothing dumps shipped by the npm packages `mnist`
and `fashion-mnist` into standard IDX files.

Usage:
    npm pack mnist fashion-mnist
    tar xzf mnist-1.1.0.tgz && mv package mnist
    tar xzf fashion-mnist-1.1.0.tgz && mv package fashion
    python3 tools/idx_from_npm_json.py --mnist mnist --fashion fashion --out $SUBLIM_DATA_ROOT

The `mnist` package carries 10000 digits (pixels in [0,1] with three
decimals), the `fashion-mnist` package the full 70000 clothing images (raw
bytes). Each set is shuffled with a fixed seed and split into train/t10k.
"""

import argparse
import json
import os
import random
import struct


def write_idx(path_prefix, split, images, labels):
    img_path = f"{path_prefix}/{split}-images-idx3-ubyte"
    lbl_path = f"{path_prefix}/{split}-labels-idx1-ubyte"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def load_mnist(root):
    items = []
    for label in range(10):
        with open(os.path.join(root, "src", "digits", f"{label}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i:i + 784]]
            items.append((px, label))
    return items


def load_fashion(root):
    items = []
    for label in range(10):
        with open(os.path.join(root, "src", "clothes", f"{label}.json")) as f:
            rows = json.load(f)["data"]
        for row in rows:
            if not row:
                continue  # the package has two empty placeholder rows
            assert len(row) == 784
            items.append(([int(v) for v in row], label))
    return items


def emit(items, out_dir, n_test, seed):
    random.Random(seed).shuffle(items)
    test, train = items[:n_test], items[n_test:]
    os.makedirs(out_dir, exist_ok=True)
    write_idx(out_dir, "train", [p for p, _ in train], [l for _, l in train])
    write_idx(out_dir, "t10k", [p for p, _ in test], [l for _, l in test])
    print(f"{out_dir}: train={len(train)} test={len(test)}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mnist", required=True)
    ap.add_argument("--fashion", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=20260101)
    args = ap.parse_args()
    emit(load_mnist(args.mnist), os.path.join(args.out, "mnist"), 2000, args.seed)
    emit(load_fashion(args.fashion), os.path.join(args.out, "fashion"), 10000, args.seed + 1)


if __name__ == "__main__":
    main()

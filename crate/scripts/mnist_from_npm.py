#!/usr/bin/env python3
"""Build gzipped IDX files from the digit JSON shipped in the npm `mnist` package.

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Every fifth sample of each digit goes to the t10k files, the rest to train.
Pixel values in the JSON are in [0, 1]; they are rescaled to bytes.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(flat) // 784
        for i in range(n):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
            (test if i % 5 == 4 else train).append((px, digit))
    # interleave classes so file order is not sorted by label
    for name, rows in (("train", train), ("t10k", test)):
        rows.sort(key=lambda r: (hash_key(r[0]), r[1]))
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(rows), 28, 28),
                  b"".join(r[0] for r in rows))
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(rows),),
                  bytes(r[1] for r in rows))
        print(name, len(rows))


def hash_key(px):
    h = 2166136261
    for b in px:
        h = ((h ^ b) * 16777619) & 0xFFFFFFFF
    return h


if __name__ == "__main__":
    main(*sys.argv[1:3])

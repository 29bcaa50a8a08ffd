#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

The npm package (MIT, https://www.npmjs.com/package/mnist) ships 10,000 real
MNIST digits as JSON arrays of pixel/255 rounded to three decimals. Rounding
back to bytes recovers the original pixel values exactly.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist10k

Writes gzip-compressed `train-images-idx3-ubyte.gz` and
`train-labels-idx1-ubyte.gz` holding all 10,000 samples, ordered by digit file
and then by position within each file.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    pixels = bytearray()
    labels = bytearray()
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for v in data:
            b = round(v * 255)
            assert 0 <= b <= 255 and abs(b / 255 - v) < 6e-4
            pixels.append(b)
        labels.extend([digit] * (len(data) // 784))
    n = len(labels)
    # mtime=0 keeps the output byte-stable across runs.
    with open(dst / "train-images-idx3-ubyte.gz", "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
            f.write(bytes(pixels))
    with open(dst / "train-labels-idx1-ubyte.gz", "wb") as raw:
        with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x00000801, n))
            f.write(bytes(labels))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Convert the 10 000 binarized digits of the `mnist` npm package into IDX files.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_json_to_idx.py package/src/digits data/mnist

Digits are written class by class (all zeros first) with pixels scaled to
0/255; the loaders shuffle with their own seed.
"""
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    images, labels = bytearray(), bytearray()
    for digit in range(10):
        pixels = json.loads((src / f"{digit}.json").read_text())["data"]
        if len(pixels) % 784:
            raise SystemExit(f"{digit}.json: {len(pixels)} values is not a multiple of 784")
        images.extend(255 if p else 0 for p in pixels)
        labels.extend([digit] * (len(pixels) // 784))
    n = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + images)
    (dst / "labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + labels)
    print(f"wrote {n} images to {dst}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    main(Path(sys.argv[1]), Path(sys.argv[2]))

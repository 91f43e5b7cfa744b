#!/usr/bin/env python3
"""Convert the digits bundled with the `mnist` npm package into an IDX image file.

The package ships 10000 MNIST digits as JSON arrays of b/255 values rounded to
three decimals; rounding back to bytes recovers the original pixels exactly.
Classes are interleaved so that any prefix of the output is class-balanced.

Usage: mnist_from_npm.py PACKAGE_DIR OUT_IDX
"""
import itertools
import json
import struct
import sys
from pathlib import Path


def load_class(path: Path) -> list[bytes]:
    flat = json.loads(path.read_text())["data"]
    return [bytes(round(v * 255) for v in flat[i:i + 784]) for i in range(0, len(flat), 784)]


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 1
    digits = Path(sys.argv[1]) / "src" / "digits"
    classes = [load_class(digits / f"{k}.json") for k in range(10)]
    images = [img for row in itertools.zip_longest(*classes) for img in row if img is not None]
    with open(sys.argv[2], "wb") as out:
        out.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            out.write(img)
    print(f"wrote {len(images)} images to {sys.argv[2]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

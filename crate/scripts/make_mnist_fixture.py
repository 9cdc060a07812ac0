"""Build the small MNIST IDX fixture under data/mnist-1k/.

Source: the 5000-sample MNIST subset bundled in the mlxtend wheel
(`pip download mlxtend --no-deps`). Keeps the first 100 images of each
digit, in original order, and writes standard IDX containers.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np

PER_CLASS = 100


def main(wheel, out_dir):
    z = zipfile.ZipFile(wheel)
    raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    table = np.loadtxt(io.StringIO(raw), delimiter=",")
    pixels, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    keep, seen = [], {}
    for i, y in enumerate(labels):
        if seen.get(y, 0) < PER_CLASS:
            seen[y] = seen.get(y, 0) + 1
            keep.append(i)
    pixels, labels = pixels[keep], labels[keep]
    with open(f"{out_dir}/images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(labels), 28, 28))
        f.write(pixels.tobytes())
    with open(f"{out_dir}/labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.tobytes())
    print(len(labels), np.bincount(labels))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

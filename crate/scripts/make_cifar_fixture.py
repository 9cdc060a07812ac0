"""Build the synthetic CIFAR-10 binary fixture under data/cifar10-mini/.

Record i has label i % 10 and channel-planar pixels
value(i, c, p) = (31 * i + 7 * c + p) % 256, with p the row-major pixel
index within a 32x32 plane. data_batch_1.bin holds records 0..19,
test_batch.bin holds records 20..29.
"""
import os
import sys

PLANE = 32 * 32


def record(i):
    out = bytearray([i % 10])
    for c in range(3):
        out.extend((31 * i + 7 * c + p) % 256 for p in range(PLANE))
    return bytes(out)


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "data_batch_1.bin"), "wb") as f:
        f.write(b"".join(record(i) for i in range(20)))
    with open(os.path.join(out_dir, "test_batch.bin"), "wb") as f:
        f.write(b"".join(record(i) for i in range(20, 30)))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/cifar10-mini")

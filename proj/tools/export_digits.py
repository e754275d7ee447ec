"""Writes the scikit-learn 8x8 digits set to a CIMD container."""
import argparse
import struct

import numpy as np
from sklearn.datasets import load_digits


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="data/digits.cimd")
    args = ap.parse_args()
    d = load_digits()
    # pixel intensities are 0..16
    pixels = np.asarray(d.images, dtype=np.uint8)
    labels = np.asarray(d.target, dtype=np.uint16)
    n, h, w = pixels.shape
    with open(args.out, "wb") as f:
        f.write(b"CIMD")
        f.write(struct.pack("<6I", 1, n, h, w, 1, 10))
        for label, img in zip(labels, pixels):
            f.write(struct.pack("<H", int(label)))
            f.write(img.tobytes(order="C"))
    print(f"wrote {n} items ({h}x{w}) to {args.out}")


if __name__ == "__main__":
    main()

"""Convert the 5,000-image MNIST subset shipped inside the mlxtend wheel to IDX.

Usage::

    pip download mlxtend==0.24.0 --no-deps -d /tmp/dl
    python scripts/make_mnist_idx.py /tmp/dl/mlxtend-0.24.0-py3-none-any.whl data/mnist_5k

The CSV rows are sorted by label; a fixed-seed shuffle interleaves classes so
that any prefix of the output is roughly class-balanced.
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from spikegan.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel")
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=20240601)
    args = ap.parse_args()
    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    order = np.random.default_rng(args.seed).permutation(len(table))
    images = pixels[order].reshape(-1, 28, 28).astype(np.uint8)
    labels = labels[order].astype(np.uint8)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the gzip bytes reproducible
    for name, arr in (("train-images-idx3-ubyte.gz", images), ("train-labels-idx1-ubyte.gz", labels)):
        with open(out / name, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(write_idx(arr))
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main()

"""Build the 1000/1000 MNIST subset under data/mnist1k/.

The images come from the 5000-example MNIST sample bundled in the
``mlxtend`` wheel (downloaded with pip, not installed). Each split takes
100 images per digit, chosen deterministically from a seeded permutation.
The output is gzip-compressed IDX, the same layout as the original MNIST
files, so :func:`enkfopt.data.load_mnist` reads it directly.

Usage: python scripts/fetch_mnist_subset.py [--out data/mnist1k] [--wheel PATH]
"""
from __future__ import annotations

import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from enkfopt.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps",
                    "--only-binary=:all:", "-d", str(dest)], check=True)
    return next(dest.glob("mlxtend-*.whl"))


def read_sample(wheel: Path):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)


def stratified_split(labels, per_class: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if idx.size < 2 * per_class:
            raise ValueError(f"class {c} has only {idx.size} images")
        train.append(idx[:per_class])
        test.append(idx[per_class:2 * per_class])
    # interleave classes in a seeded order so prefixes stay roughly balanced
    return rng.permutation(np.concatenate(train)), rng.permutation(np.concatenate(test))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist1k")
    ap.add_argument("--wheel", help="existing mlxtend wheel (skips the download)")
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = Path(args.wheel) if args.wheel else fetch_wheel(Path(tmp))
        images, labels = read_sample(wheel)
    tr, te = stratified_split(labels, args.per_class, args.seed)
    write_idx(out / "train-images-idx3-ubyte.gz", images[tr])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[tr])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[te])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[te])
    print(f"wrote {tr.size} train / {te.size} test images to {out}")


if __name__ == "__main__":
    main()

"""Write the 5000-digit MNIST sample bundled with mlxtend as gzipped IDX files.

Used to build tests/data; any standard MNIST download works in its place.

    pip download --no-deps mlxtend && python scripts/mnist_subset_from_mlxtend.py mlxtend-*.whl tests/data
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from decompnet.dataset import MnistArchive, write_idx


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(MnistArchive(images, labels), out / "mnist5k-images-idx3-ubyte.gz",
              out / "mnist5k-labels-idx1-ubyte.gz")


if __name__ == "__main__":
    main(*sys.argv[1:3])

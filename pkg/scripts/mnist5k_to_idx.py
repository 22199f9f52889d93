"""Convert the 5000-image MNIST subset shipped inside the mlxtend wheel to IDX files.

usage: python3 scripts/mnist5k_to_idx.py mlxtend-*.whl OUT_DIR

The wheel is read as a zip archive; mlxtend itself is not imported. The
first 400 images of each digit become the training split, the other 100
the test split, so the four standard MNIST file names can be pointed at
with ``[data] dir`` or RSM_MNIST_DIR.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from rsm.tasks.sequences import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main(wheel, out):
    raw = gzip.decompress(zipfile.ZipFile(wheel).read(MEMBER)).decode()
    table = np.loadtxt(io.StringIO(raw), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    train, test = [], []
    for digit in range(10):
        idx = np.flatnonzero(labels == digit)
        train.extend(idx[:400])
        test.extend(idx[400:])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", np.array(train)), ("t10k", np.array(test))):
        write_idx(out / f"{prefix}-images-idx3-ubyte", images[idx].reshape(-1, 28, 28))
        write_idx(out / f"{prefix}-labels-idx1-ubyte", labels[idx])
    print(f"{len(train)} training and {len(test)} test images written to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])

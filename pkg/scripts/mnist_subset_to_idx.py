"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

Usage: python scripts/mnist_subset_to_idx.py OUT_DIR
"""

import sys
from pathlib import Path

import numpy as np
from mlxtend.data import mnist_data

from catexpand.mnist import write_idx


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X, y = mnist_data()
    write_idx(X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8),
              out / "subset-images-idx3-ubyte", out / "subset-labels-idx1-ubyte")
    print(f"wrote {len(y)} images to {out}", file=sys.stderr)


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(sys.argv[1])

"""Convert the 5000-sample MNIST subset shipped with the mlxtend wheel into
gzipped IDX files (train-images-idx3-ubyte.gz / train-labels-idx1-ubyte.gz).

usage: pip download --no-deps mlxtend -d /tmp/pp
       python3 scripts/mnist5k_to_idx.py /tmp/pp/mlxtend-*.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    arr = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = arr[:, :-1].astype(np.uint8)
    labels = arr[:, -1].astype(np.uint8)
    n = images.shape[0]
    assert images.shape[1] == 784
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(f"{out_dir}/train-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(f"{out_dir}/train-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())
    print(n, np.bincount(labels))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

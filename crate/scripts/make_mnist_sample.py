"""Build the bundled MNIST sample (IDX, gzip) from the npm `mnist` package.

The npm package (v1.1.0, MIT) ships 10,000 MNIST digits as JSON arrays of
pixel intensities in [0, 1]. This script rebuilds the original bytes,
shuffles with a fixed seed and writes an 8,000 / 2,000 train/test split.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_sample.py package/src/digits data/mnist-10k
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN = 8000


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    samples = []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        for n in range(len(data) // 784):
            pix = [round(v * 255) for v in data[n * 784:(n + 1) * 784]]
            samples.append((pix, label))
    random.Random(20200101).shuffle(samples)
    dst.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", samples[:TRAIN]), ("t10k", samples[TRAIN:])):
        images = [p for pix, _ in part for p in pix]
        labels = [l for _, l in part]
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, [len(part), 28, 28], images)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(part)], labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

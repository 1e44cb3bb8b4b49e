"""Convert MNIST-style IDX files into the raw tensor/label files the loader reads.

Usage::

    python scripts/convert_mnist.py IDX_DIR OUT_DIR [--size 16]

``IDX_DIR`` holds ``train-images-idx3-ubyte``, ``train-labels-idx1-ubyte``,
``t10k-images-idx3-ubyte`` and ``t10k-labels-idx1-ubyte`` (optionally
gzipped). Images are stored as uint8; ``--size`` downsamples by block
averaging (28 is kept as is; 16 crops the 2-pixel border first then
resizes with bilinear interpolation).
"""
import argparse
import gzip
import struct
import sys
from pathlib import Path

import numpy as np

from collabdm.data import encode_labels, encode_tensor
from collabdm.kernel import bilinear_upsample


def read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    zero, dtype, rank = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or dtype != 0x08:
        raise ValueError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack_from(f">{rank}I", data, 4)
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * rank).reshape(dims)


def find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem} not found in {root}")


def resize(images: np.ndarray, size: int) -> np.ndarray:
    if size == images.shape[-1]:
        return images[:, None]
    x = images[:, None].astype(np.float32) / 255.0
    if size == 16:
        x = x[:, :, 2:-2, 2:-2]
    out = np.concatenate([bilinear_upsample(x[i:i + 4096], (size, size))
                          for i in range(0, len(x), 4096)])
    return np.clip(np.rint(out * 255), 0, 255).astype(np.uint8)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("idx_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--size", type=int, default=28)
    args = ap.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = resize(read_idx(find(args.idx_dir, f"{prefix}-images-idx3-ubyte")), args.size)
        labels = read_idx(find(args.idx_dir, f"{prefix}-labels-idx1-ubyte"))
        (args.out_dir / f"{split}_images.cdt").write_bytes(encode_tensor(images))
        (args.out_dir / f"{split}_labels.cdl").write_bytes(encode_labels(labels))
        print(f"{split}: {len(labels)} images of shape {images.shape[1:]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

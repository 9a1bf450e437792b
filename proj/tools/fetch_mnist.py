#!/usr/bin/env python3
"""Writes the MNIST subset used by the smoke runs as gzipped IDX files.

Source: the `mnist-data` npm package (ISC), which ships the four original IDX
files. The first --train-count training images and the full 10k test split are
copied byte for byte, headers rewritten only to carry the new count.
"""

import argparse
import gzip
import hashlib
import pathlib
import struct
import subprocess
import tempfile

SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def fetch(work: pathlib.Path) -> pathlib.Path:
    subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=work, check=True, capture_output=True)
    subprocess.run(["tar", "xzf", "mnist-data-1.2.6.tgz"], cwd=work, check=True)
    return work / "package" / "data"


def read_checked(src: pathlib.Path, name: str) -> bytes:
    raw = (src / name).read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != SHA256[name]:
        raise SystemExit(f"{name}: sha256 {digest} does not match the published file")
    return raw


def subset(raw: bytes, count: int) -> bytes:
    magic, n = struct.unpack(">II", raw[:8])
    dims = 3 if magic == 0x803 else 1
    header = 4 + 4 * dims
    item = 1
    for k in range(1, dims):
        item *= struct.unpack(">I", raw[4 + 4 * k : 8 + 4 * k])[0]
    count = min(count, n)
    return struct.pack(">II", magic, count) + raw[8:header] + raw[header : header + count * item]


def write_gz(path: pathlib.Path, payload: bytes):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(payload)
    print(f"{path}  sha256(raw)={hashlib.sha256(payload).hexdigest()}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source", type=pathlib.Path, help="directory holding the four raw IDX files")
    ap.add_argument("--train-count", type=int, default=10000)
    ap.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        src = args.source or fetch(pathlib.Path(tmp))
        for stem, count in (("train", args.train_count), ("t10k", 10000)):
            for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
                raw = read_checked(src, f"{stem}-{kind}")
                write_gz(args.out / f"{stem}-{kind}.gz", subset(raw, count))


if __name__ == "__main__":
    main()

"""Download the full MNIST IDX files for use with `projreg train --task digits`.

Fetches the four gzipped IDX files from a public mirror, decompresses
them, and writes them under the destination directory with their
standard names. Point the CLI at the result with --data-dir.

Usage: python3 scripts/fetch_mnist.py [dest_dir]
"""

import gzip
import sys
import urllib.request
from pathlib import Path

MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist"
FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]


def main() -> None:
    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("mnist_data")
    dest.mkdir(parents=True, exist_ok=True)
    for name in FILES:
        url = f"{MIRROR}/{name}.gz"
        target = dest / name
        if target.exists():
            print(f"{target} already present, skipping")
            continue
        print(f"fetching {url}")
        with urllib.request.urlopen(url) as response:
            target.write_bytes(gzip.decompress(response.read()))
    print(f"MNIST IDX files ready under {dest}")


if __name__ == "__main__":
    main()

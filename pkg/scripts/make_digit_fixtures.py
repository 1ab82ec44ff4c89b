"""Regenerate the bundled digit fixtures from scikit-learn's digits set.

The 8x8 handwritten digit images shipped with scikit-learn (1797
samples, pixel values 0..16) are rescaled to byte range and written as
standard IDX files: first 1500 as the train split, the remaining 297 as
the test split. Keeping the fixtures in-repo makes the digits task and
the test suite fully offline.

Usage: python3 scripts/make_digit_fixtures.py [dest_dir]
"""

import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from projreg.data import write_idx_images, write_idx_labels  # noqa: E402

TRAIN_COUNT = 1500


def main() -> None:
    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else (
        Path(__file__).resolve().parents[1] / "src" / "projreg" / "fixtures"
    )
    dest.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    images = np.round(digits.images / 16.0 * 255.0).astype(np.uint8)
    labels = digits.target.astype(np.uint8)

    write_idx_images(dest / "train-images-idx3-ubyte", images[:TRAIN_COUNT])
    write_idx_labels(dest / "train-labels-idx1-ubyte", labels[:TRAIN_COUNT])
    write_idx_images(dest / "t10k-images-idx3-ubyte", images[TRAIN_COUNT:])
    write_idx_labels(dest / "t10k-labels-idx1-ubyte", labels[TRAIN_COUNT:])
    print(f"wrote {TRAIN_COUNT} train / {len(labels) - TRAIN_COUNT} test images to {dest}")


if __name__ == "__main__":
    main()

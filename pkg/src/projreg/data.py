"""Dataset generators and the IDX binary image loader.

Synthetic generators are pure functions of (spec, rng). The IDX format
is the standard big-endian digit-image container: magic 0x00000803 for
image tensors (count, rows, cols, then raw pixel bytes) and 0x00000801
for label vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from projreg.numerics import Rng

__all__ = [
    "Dataset",
    "SynthSpec",
    "gen_sparse_regression",
    "gen_sparse_classification",
    "split_dataset",
    "load_idx_images",
    "write_idx_images",
    "write_idx_labels",
    "export_csv",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray  # (n, d) float64
    targets: np.ndarray  # (n,) float64 or int64 class indices
    n_classes: int | None = None
    split: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        self.targets = np.asarray(self.targets)
        if self.targets.shape != (self.features.shape[0],):
            raise ValueError(
                f"targets length {self.targets.shape} does not match "
                f"{self.features.shape[0]} samples"
            )
        if self.n_classes is not None:
            labels = self.targets.astype(np.int64)
            if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise ValueError("class index out of range")
            self.targets = labels

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class SynthSpec:
    n: int
    d: int
    true_density: float = 0.05
    noise_std: float = 0.1
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if not (0.0 < self.true_density <= 1.0):
            raise ValueError(f"true_density must be in (0, 1], got {self.true_density}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def gen_sparse_regression(spec: SynthSpec, rng: Rng) -> tuple[Dataset, np.ndarray]:
    """Standard-normal design, sparse ground-truth weights, Gaussian noise.

    Returns the dataset and the true weight vector, which has exactly
    ceil(true_density * d) nonzero entries.
    """
    m = int(np.ceil(spec.true_density * spec.d))
    w_rng, x_rng, noise_rng = rng.substream(0), rng.substream(1), rng.substream(2)
    true_w = np.zeros(spec.d)
    true_w[w_rng.subset(spec.d, m)] = w_rng.normal(size=m)
    X = x_rng.normal(size=(spec.n, spec.d))
    y = X @ true_w
    if spec.noise_std > 0:
        y = y + noise_rng.normal(size=spec.n, scale=spec.noise_std)
    return Dataset(features=X, targets=y), true_w


def gen_sparse_classification(spec: SynthSpec, rng: Rng) -> Dataset:
    """Class-conditional Gaussian clusters with sparse mean vectors.

    Each class mean has ceil(true_density * d) standard-normal nonzeros;
    samples are the class mean plus N(0, noise_std^2) noise. Labels are
    assigned round-robin, so class counts are balanced within one and a
    contiguous split stays balanced.
    """
    if spec.n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    m = int(np.ceil(spec.true_density * spec.d))
    mean_rng, noise_rng = rng.substream(0), rng.substream(1)

    means = np.zeros((spec.n_classes, spec.d))
    for k in range(spec.n_classes):
        sub = mean_rng.substream(k)
        means[k, sub.subset(spec.d, m)] = sub.normal(size=m)

    labels = np.arange(spec.n, dtype=np.int64) % spec.n_classes
    X = means[labels] + noise_rng.normal(size=(spec.n, spec.d), scale=max(spec.noise_std, 0.0))
    return Dataset(features=X, targets=labels, n_classes=spec.n_classes)


def split_dataset(data: Dataset, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    """Contiguous head/tail split, tagged train/test."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must be in (0, 1)")
    cut = int(round(train_fraction * data.n))
    cut = min(max(cut, 1), data.n - 1)
    train = Dataset(data.features[:cut], data.targets[:cut], data.n_classes, "train")
    test = Dataset(data.features[cut:], data.targets[cut:], data.n_classes, "test")
    return train, test


def _read_exact(f, nbytes: int, path, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise ValueError(
            f"{path}: truncated file reading {what} at byte offset {offset} "
            f"(wanted {nbytes} bytes, got {len(buf)})"
        )
    return buf


def load_idx_images(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair into a flat, unit-scaled dataset.

    Pixels are scaled to [0, 1] and images flattened row-major. Raises
    with the byte offset on a bad magic number, truncation, or an
    image/label count mismatch.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, images_path, "magic"))
        if magic != IMAGE_MAGIC:
            raise ValueError(
                f"{images_path}: bad magic at byte offset 0: expected "
                f"{IMAGE_MAGIC:#010x}, found {magic:#010x}"
            )
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, images_path, "header"))
        pixels = _read_exact(f, count * rows * cols, images_path, "pixel data")
        images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "magic"))
        if magic != LABEL_MAGIC:
            raise ValueError(
                f"{labels_path}: bad magic at byte offset 0: expected "
                f"{LABEL_MAGIC:#010x}, found {magic:#010x}"
            )
        (label_count,) = struct.unpack(">I", _read_exact(f, 4, labels_path, "header"))
        labels = np.frombuffer(_read_exact(f, label_count, labels_path, "labels"), dtype=np.uint8)

    if label_count != count:
        raise ValueError(
            f"{labels_path}: {label_count} labels but {images_path} holds {count} images"
        )
    return Dataset(
        features=images.astype(np.float64) / 255.0,
        targets=labels.astype(np.int64),
        n_classes=int(labels.max()) + 1 if labels.size else None,
    )


def write_idx_images(path, images: np.ndarray) -> None:
    """Serialize a (count, rows, cols) uint8 array to IDX."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected (count, rows, cols), got shape {images.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError(f"expected a 1-D label vector, got shape {labels.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.size))
        f.write(labels.tobytes())


def export_csv(data: Dataset, path) -> None:
    """Header row, then one line per sample: features then target."""
    with open(path, "w", newline="") as f:
        header = ",".join(f"f{i}" for i in range(data.d)) + ",target"
        f.write(header + "\n")
        for x, y in zip(data.features, data.targets):
            feats = ",".join(f"{v:.12g}" for v in x)
            target = f"{int(y)}" if data.n_classes is not None else f"{float(y):.12g}"
            f.write(f"{feats},{target}\n")

"""Desk-scale image dataset and IDX (MNIST-style) binary I/O.

The desk dataset renders the 8x8 handwritten digits bundled with
scikit-learn onto 32x32 grayscale canvases at a random position and scale,
over a smooth random background. Objects therefore appear at different
places in different images, which is the setting where spatially rigid
feature distances break down.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, channels, h, w), float in [0, 1]
    labels: np.ndarray  # (n,), int64
    num_classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def write_idx_images(path, images_u8: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    if images_u8.ndim != 3:
        raise ValueError("IDX image payload must be (n, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images_u8.shape))
        f.write(images_u8.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: bad image magic 0x{magic:08x}")
    need = n * rows * cols
    if len(data) - 16 < need:
        raise IdxFormatError(f"{path}: truncated payload ({len(data) - 16} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    magic, n = struct.unpack_from(">II", data, 0)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(data) - 8 < n:
        raise IdxFormatError(f"{path}: truncated payload ({len(data) - 8} of {n} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8)


def ingest_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path).astype(np.int64)
    if len(raw) != len(labels):
        raise IdxFormatError(f"{len(raw)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        bad = int(labels[labels >= num_classes][0])
        raise IdxFormatError(f"label {bad} out of range for {num_classes} classes")
    images = (raw.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(images, labels, num_classes)


def to_u8(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ValueError("IDX export supports single-channel images only")
        x = x[:, 0]
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _render(glyph: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    scale = rng.uniform(1.6, 2.4)
    g = np.clip(ndimage.zoom(glyph, scale, order=1), 0.0, 1.0)
    gh, gw = g.shape
    bg = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=4.0)
    bg = 0.35 + 0.15 * bg / (np.abs(bg).max() + 1e-12)
    canvas = bg + rng.normal(scale=0.03, size=(size, size))
    top = rng.integers(0, size - gh + 1)
    left = rng.integers(0, size - gw + 1)
    fg = rng.uniform(0.45, 0.65)
    region = canvas[top:top + gh, left:left + gw]
    canvas[top:top + gh, left:left + gw] = region * (1.0 - g) + (region + fg) * g
    return np.clip(canvas, 0.0, 1.0)


def make_desk_dataset(n_train: int = 5000, n_test: int = 2000, seed: int = 0,
                      size: int = 32) -> Tuple[Dataset, Dataset]:
    """Render train/test splits from disjoint pools of base digits.

    Images are quantised to 8 bits so that an IDX round trip is exact.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    glyphs = digits.images / 16.0
    targets = digits.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(targets))
    cut = int(0.7 * len(perm))
    pools = (perm[:cut], perm[cut:])
    out = []
    for pool, n in zip(pools, (n_train, n_test)):
        pick = pool[rng.integers(0, len(pool), size=n)]
        imgs = np.stack([_render(glyphs[i], rng, size) for i in pick])
        imgs = to_u8(imgs).astype(np.float64) / 255.0
        out.append(Dataset(imgs[:, None], targets[pick], 10))
    return out[0], out[1]


def save_dataset(ds: Dataset, images_path, labels_path) -> None:
    write_idx_images(images_path, to_u8(ds.images))
    write_idx_labels(labels_path, ds.labels)

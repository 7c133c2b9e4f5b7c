"""Datasets: synthetic flower generator, image-folder loader, splitting, batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ParameterError, ValidationError

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])
CLASS_NAMES = ("immature", "mature")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MIN_SYNTHETIC_SIZE = 32


@dataclass
class Dataset:
    """Images (N, C, H, W), already normalized, with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    provenance: str = "synthetic"
    skipped: int = 0
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValidationError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValidationError("class index out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(img, int(lbl)) for img, lbl in zip(self.images, self.labels)]

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return Dataset(self.images[idx], self.labels[idx], self.class_names, self.provenance, 0, paths)

    def onehot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]


def normalize(rgb01: np.ndarray) -> np.ndarray:
    """(..., 3, H, W) in [0, 1] -> ImageNet-standardized channels."""
    return (rgb01 - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def denormalize(images: np.ndarray) -> np.ndarray:
    return images * IMAGENET_STD[:, None, None] + IMAGENET_MEAN[:, None, None]


# -- synthetic data ------------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid; values in [0, 1]."""
    coarse = rng.random((cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def _render(rng: np.random.Generator, size: int, mature: bool) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)

    # foliage background: green-brown base, two octaves of texture
    base = np.array([0.25, 0.40, 0.18]) + rng.normal(0, 0.06, 3)
    tex = 0.6 * _smooth_noise(rng, size, 4) + 0.4 * _smooth_noise(rng, size, 12)
    img = base[:, None, None] * (0.6 + 0.8 * tex)[None]

    # clutter blobs with random colors, some flower-like
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.03, 0.09) * size
        color = rng.uniform(0.2, 0.95, 3)
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        img[:, blob] = color[:, None]

    # the flower: closed disc (immature) vs open ring with dark centre (mature)
    outer = rng.uniform(0.13, 0.24) * size
    margin = outer + 1
    cy, cx = rng.uniform(margin, size - margin, 2)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    hue_shift = rng.normal(0.0, 0.08)
    warmth = (0.05 if mature else -0.05) + hue_shift
    petal = np.clip(np.array([0.78 + warmth, 0.32, 0.55 - warmth]) + rng.normal(0, 0.04, 3), 0, 1)
    shade = 0.85 + 0.15 * np.cos(dist / outer * np.pi)
    body = dist <= outer
    img[:, body] = (petal[:, None] * shade[body][None])
    if mature:
        inner = rng.uniform(0.35, 0.55) * outer
        hole = dist <= inner
        centre = np.clip(np.array([0.35, 0.25, 0.15]) + rng.normal(0, 0.08, 3), 0, 1)
        img[:, hole] = centre[:, None]

    gain = rng.uniform(0.6, 1.3)
    img = img * gain + rng.normal(0, 0.04, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(n_per_class: int = 300, image_size: int = 64, seed: int = 42) -> Dataset:
    """Balanced two-class flower-maturity images (immature=0, mature=1)."""
    if image_size < MIN_SYNTHETIC_SIZE:
        raise ParameterError(f"image_size must be >= {MIN_SYNTHETIC_SIZE}, got {image_size}")
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    images = np.empty((2 * n_per_class, 3, image_size, image_size))
    labels = np.empty(2 * n_per_class, dtype=np.int64)
    for i in range(2 * n_per_class):
        label = i % 2
        images[i] = _render(rng, image_size, bool(label))
        labels[i] = label
    return Dataset(normalize(images), labels, CLASS_NAMES, "synthetic")


def export_folder(dataset: Dataset, root: str | Path) -> list[Path]:
    """Write ``root/<class>/<index>.png`` files (8-bit RGB)."""
    from PIL import Image

    root = Path(root)
    written = []
    for name in dataset.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    rgb = np.clip(np.rint(denormalize(dataset.images) * 255.0), 0, 255).astype(np.uint8)
    for i, (img, label) in enumerate(zip(rgb, dataset.labels)):
        path = root / dataset.class_names[label] / f"{i:06d}.png"
        Image.fromarray(img.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
        written.append(path)
    return written


def load_folder(root: str | Path, image_size: int = 64) -> Dataset:
    """Load ``root/<class_name>/*.png|jpg``; classes indexed in sorted name order."""
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data folder not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValidationError(f"no class subdirectories under {root}")
    images, labels, paths = [], [], []
    skipped = 0
    for label, cdir in enumerate(class_dirs):
        count = 0
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping undecodable image %s: %s", f, exc)
                skipped += 1
                continue
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
            paths.append(str(f))
            count += 1
        if count == 0:
            raise ValidationError(f"class directory {cdir} contains no decodable images")
    ds = Dataset(normalize(np.stack(images)), np.array(labels), tuple(d.name for d in class_dirs), "folder", skipped, paths)
    return ds


# -- splitting and batching -----------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    val_fraction: float = 0.20  # of the training portion
    seed: int = 42


def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified (train, val, test) partition; val is carved out of train."""
    if len(dataset) == 0:
        raise ValidationError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) < 3:
            raise ValidationError(f"class {dataset.class_names[c]!r} has {len(idx)} samples; need at least 3")
        perm = rng.permutation(idx)
        n_train = int(round(spec.train_fraction * len(idx)))
        n_val = int(round(spec.val_fraction * n_train))
        val.extend(perm[:n_val])
        train.extend(perm[n_val:n_train])
        test.extend(perm[n_train:])
    return tuple(dataset.subset(np.sort(np.array(part, dtype=np.int64))) for part in (train, val, test))


def batches(
    dataset: Dataset, batch_size: int, shuffle: bool = False, rng: np.random.Generator | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, one-hot targets); the last partial batch is kept."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise ParameterError("shuffle=True needs an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    onehot = dataset.onehot()
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], onehot[idx]


def linear_probe_accuracy(train: Dataset, test: Dataset, ridges=(1e-1, 1e1, 1e3, 1e5)) -> float:
    """Best test accuracy of a ridge-regression pixel classifier over a few penalties."""
    x_tr = train.images.reshape(len(train), -1)
    x_te = test.images.reshape(len(test), -1)
    mu = x_tr.mean(axis=0)
    x_tr, x_te = x_tr - mu, x_te - mu
    y = train.onehot() * 2.0 - 1.0
    gram = x_tr @ x_tr.T
    best = 0.0
    for lam in ridges:
        coef = np.linalg.solve(gram + lam * np.eye(len(gram)), y - y.mean(axis=0))
        scores = (x_te @ x_tr.T) @ coef
        acc = float((scores.argmax(axis=1) == test.labels).mean())
        best = max(best, acc)
    return best

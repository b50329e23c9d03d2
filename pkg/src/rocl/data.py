"""Datasets: CIFAR-10 binary records, a synthetic toy set, and an .npy round-trip format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)

SHAPES = ("hstripes", "vstripes", "dstripes", "astripes", "disk", "cross", "ring", "triangle", "square", "frame")
_STRIPE_ANGLES = {"hstripes": 0.0, "vstripes": 0.5, "dstripes": 0.25, "astripes": 0.75}


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: Optional[np.ndarray] = None
    name: str = "dataset"
    split: str = "train"
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise ValueError("images must be [N, C, H, W]")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("labels must have one entry per image")
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_dims(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx], self.name,
                       split or self.split, self.num_classes)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.images, None, self.name, self.split, self.num_classes)


def load_cifar10_binary(path: Union[str, Path, Sequence[Union[str, Path]]], name: str = "cifar10",
                        split: str = "train") -> Dataset:
    """Read one or more CIFAR-10 binary batch files (label byte + 3072 RGB-plane bytes per record)."""
    paths = [path] if isinstance(path, (str, Path)) else list(path)
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            full = len(raw) // CIFAR_RECORD * CIFAR_RECORD
            raise DatasetFormatError(f"{p}: truncated record at byte offset {full} "
                                     f"(file size {len(raw)} is not a multiple of {CIFAR_RECORD})")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] > 9)[0]
        if bad.size:
            k = int(bad[0])
            raise DatasetFormatError(f"{p}: label byte {rec[k, 0]} > 9 at byte offset {k * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, *CIFAR_SHAPE))
    pixels = np.concatenate(images) if images else np.zeros((0, *CIFAR_SHAPE), np.uint8)
    return Dataset(pixels.astype(np.float32) / np.float32(255.0),
                   np.concatenate(labels) if labels else np.zeros(0, np.int64), name, split, 10)


def write_cifar10_binary(dataset: Dataset, path) -> None:
    """Inverse of :func:`load_cifar10_binary` for 3x32x32 images on the 1/255 grid."""
    if dataset.image_dims != CIFAR_SHAPE or dataset.labels is None:
        raise ValueError("CIFAR binary needs labeled 3x32x32 images")
    px = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], px], axis=1)
    Path(path).write_bytes(rec.tobytes())


def save_dataset(dataset: Dataset, directory) -> None:
    """``images.npy`` (+ ``labels.npy``) + ``meta.json``; byte-stable for identical data."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "images.npy", np.ascontiguousarray(dataset.images))
    if dataset.labels is not None:
        np.save(d / "labels.npy", dataset.labels)
    meta = {"name": dataset.name, "split": dataset.split, "num_classes": dataset.num_classes}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    """Load a directory written by :func:`save_dataset` or a CIFAR-10 ``.bin`` file."""
    p = Path(path)
    if p.is_file():
        return load_cifar10_binary(p, name=p.stem)
    if not (p / "images.npy").exists():
        raise FileNotFoundError(f"no dataset at {p}")
    meta = json.loads((p / "meta.json").read_text()) if (p / "meta.json").exists() else {}
    labels = np.load(p / "labels.npy") if (p / "labels.npy").exists() else None
    return Dataset(np.load(p / "images.npy"), labels, meta.get("name", p.name), meta.get("split", "train"),
                   meta.get("num_classes"))


# ---------------------------------------------------------------------------
# toy data
# ---------------------------------------------------------------------------


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, r: float, thick: float,
                period: float = 4.0, phase: float = 0.0, tilt: float = 0.0) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    if kind in _STRIPE_ANGLES:
        a = np.pi * (_STRIPE_ANGLES[kind] + tilt)
        along = yy * np.cos(a) + xx * np.sin(a)
        return (yy ** 2 + xx ** 2 <= (1.3 * r) ** 2) & (np.mod(along / period + phase, 1.0) < 0.5)
    if kind == "disk":
        return yy ** 2 + xx ** 2 <= r ** 2
    if kind == "square":
        return np.maximum(ay, ax) <= r * 0.85
    if kind == "cross":
        return ((ay <= thick) & (ax <= r)) | ((ax <= thick) & (ay <= r))
    if kind == "ring":
        d = np.sqrt(yy ** 2 + xx ** 2)
        return (d <= r) & (d >= r - 1.6 * thick)
    if kind == "triangle":
        return (yy <= r * 0.8) & (ax <= (yy + r) * 0.55) & (yy >= -r)
    if kind == "hbar":
        return (ay <= thick) & (ax <= r)
    if kind == "vbar":
        return (ax <= thick) & (ay <= r)
    if kind == "diamond":
        return ay + ax <= r
    if kind == "xmark":
        return (np.abs(yy - xx) <= thick * 1.2) & (ay <= r) | (np.abs(yy + xx) <= thick * 1.2) & (ay <= r)
    if kind == "frame":
        return (np.maximum(ay, ax) <= r * 0.9) & (np.maximum(ay, ax) >= r * 0.9 - 1.4 * thick)
    raise ValueError(f"unknown shape {kind!r}")


def generate_toy_dataset(classes: int = 2, samples_per_class: int = 1000, image_size: int = 16, seed: int = 0,
                         noise: float = 0.01, contrast: float = 0.2, color_spread: float = 0.05,
                         angle_spread: float = 1 / 6, name: str = "toy",
                         shapes: Optional[Sequence[str]] = None) -> Dataset:
    """Class-conditional coloured shapes on smooth backgrounds plus pixel noise.

    The first four classes are stripe orientations inside a disk (tilted by up
    to ``angle_spread / 2`` half-turns); colour, position, size, stripe period
    and phase vary per image. Class identity survives the augmentation family
    while a linear model on raw pixels cannot read it off. Colour variation is
    kept small on purpose: with large ``color_spread`` instance discrimination
    latches onto colour and ignores the shape. Pixels sit on the 1/255 grid.
    """
    shapes = tuple(shapes) if shapes is not None else SHAPES[:classes]
    if len(shapes) < classes:
        raise ValueError(f"at most {len(SHAPES)} toy classes are available")
    rng = np.random.default_rng(seed)
    S = image_size
    n = classes * samples_per_class
    labels = np.repeat(np.arange(classes), samples_per_class)
    images = np.empty((n, 3, S, S))
    grid = np.arange(S) + 0.5
    for k in range(n):
        base = 0.5 + color_spread * (rng.random(3) - 0.5)
        ramp = rng.uniform(-0.15, 0.15, size=(3, 2))
        bg = base[:, None, None] + (ramp[:, 0, None, None] * (grid[None, :, None] / S - 0.5)
                                    + ramp[:, 1, None, None] * (grid[None, None, :] / S - 0.5))
        r = rng.uniform(0.28, 0.4) * S
        cy, cx = rng.uniform(0.4, 0.6, size=2) * S
        yy = grid[:, None] - cy
        xx = grid[None, :] - cx
        mask = _shape_mask(shapes[labels[k]], yy, xx, r, max(1.0, 0.12 * S),
                           period=rng.uniform(3.0, 5.0), phase=rng.random(),
                           tilt=rng.uniform(-angle_spread, angle_spread) / 2)
        direction = rng.normal(size=3) * color_spread + 1.0
        direction /= np.linalg.norm(direction)
        fg = base + contrast * direction * np.sign(direction.sum() + 1e-9) * rng.choice([-1.0, 1.0])
        img = np.where(mask[None], fg[:, None, None], bg)
        img = img + noise * rng.standard_normal(img.shape)
        images[k] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(n)
    px = np.rint(images[order] * 255.0) / 255.0
    return Dataset(px.astype(np.float32), labels[order], name, "train", classes)


def train_test_split(dataset: Dataset, n_test: int, seed: int = 0):
    """Stratification-free split; the toy generator already shuffles."""
    n = len(dataset)
    if not 0 < n_test < n:
        raise ValueError("n_test must lie in (0, len(dataset))")
    train = dataset.subset(np.arange(n - n_test), "train")
    test = dataset.subset(np.arange(n - n_test, n), "test")
    return train, test

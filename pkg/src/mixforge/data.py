"""Dataset ingestion, normalization, batching and sample pairing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from mixforge.errors import InputError

LOGGER = logging.getLogger(__name__)

FORMATS = ("cifar-bin", "imagefolder", "synthetic")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DataError(InputError):
    code = "data"


@dataclass
class DatasetSpec:
    name: str = "synthetic"
    source: str | None = None
    format: str = "synthetic"
    split: str = "train"
    num_classes: int = 10
    image_size: tuple[int, int] = (32, 32)
    channels: int = 3
    subset_fraction: float = 1.0
    seed: int = 0
    # synthetic only: train split size, and test split size (0 = a fifth of train)
    num_samples: int = 1000
    test_samples: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if not 0.0 < self.subset_fraction <= 1.0:
            raise InputError(f"subset_fraction must lie in (0, 1], got {self.subset_fraction}")
        if self.format not in FORMATS:
            raise InputError(f"unknown dataset format {self.format!r}; known: {FORMATS}")

    def with_split(self, split: str) -> "DatasetSpec":
        d = dict(self.__dict__)
        d["split"] = split
        return DatasetSpec(**d)


@dataclass
class ImageBatch:
    images: torch.Tensor  # (B, C, H, W), per-channel normalized
    labels: torch.Tensor  # (B,) int64
    num_classes: int | None = None

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.images.dim() != 4:
            raise InputError(f"images must be (B, C, H, W), got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError("labels must be a vector with one entry per image")
        if self.num_classes is not None and self.labels.numel():
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def one_hot(self, num_classes: int | None = None) -> torch.Tensor:
        n = num_classes or self.num_classes
        if n is None:
            raise InputError("num_classes unknown; pass it explicitly")
        return F.one_hot(self.labels, n).to(self.images.dtype)


@dataclass
class Dataset:
    """In-memory split. Pixels are stored as uint8 and normalized on access."""

    spec: DatasetSpec
    pixels: torch.Tensor  # (N, C, H, W) uint8
    labels: torch.Tensor  # (N,) int64
    mean: torch.Tensor  # (C,) in [0, 1] units, from the train split
    std: torch.Tensor
    indices: np.ndarray = field(default=None)  # positions in the source split

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[-2:])

    @property
    def channels(self) -> int:
        return self.pixels.shape[1]

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def normalize(self, pixels: torch.Tensor) -> torch.Tensor:
        x = pixels.to(torch.float32) / 255.0
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, images: torch.Tensor) -> torch.Tensor:
        return images * self.std[:, None, None].to(images) + self.mean[:, None, None].to(images)

    def batch(self, idx) -> ImageBatch:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ImageBatch(self.normalize(self.pixels[idx]), self.labels[idx], self.num_classes)

    def batches(
        self,
        batch_size: int,
        rng: np.random.Generator | None = None,
        augment: bool = False,
        min_size: int = 1,
    ) -> Iterator[ImageBatch]:
        """Iterate over the split; shuffled when ``rng`` is given.

        A trailing batch smaller than ``min_size`` is dropped.
        """
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < min_size:
                break
            b = self.batch(idx)
            if augment:
                if rng is None:
                    raise InputError("augmentation needs an rng")
                b = ImageBatch(crop_flip(b.images, rng), b.labels, b.num_classes)
            yield b


def crop_flip(images: torch.Tensor, rng: np.random.Generator, pad: int | None = None) -> torch.Tensor:
    """Random padded crop plus horizontal flip, per image."""
    b, _, h, w = images.shape
    pad = max(1, h // 8) if pad is None else pad
    padded = F.pad(images, (pad, pad, pad, pad))
    dy = rng.integers(0, 2 * pad + 1, size=b)
    dx = rng.integers(0, 2 * pad + 1, size=b)
    flip = rng.random(b) < 0.5
    out = torch.empty_like(images)
    for i in range(b):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


def pair_batch(batch, k: int, rng: np.random.Generator) -> torch.Tensor:
    """Index tuples (B, k): column 0 is the sample itself, columns 1..k-1
    are independent uniform permutations of the batch. Self-pairs allowed."""
    n = batch if isinstance(batch, int) else len(batch)
    if n < 1:
        raise InputError("cannot pair an empty batch")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    cols = [np.arange(n)] + [rng.permutation(n) for _ in range(k - 1)]
    return torch.as_tensor(np.stack(cols, axis=1), dtype=torch.long)


def stratified_subset(labels: np.ndarray, fraction: float, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of a class-stratified subset.

    Per-class quotas use largest-remainder rounding, so each class is within
    one sample of its exact share and exact whenever the share is integral.
    """
    if fraction >= 1.0:
        return np.arange(len(labels))
    counts = np.bincount(labels, minlength=num_classes)
    exact = counts * fraction
    quota = np.floor(exact).astype(int)
    total = int(round(len(labels) * fraction))
    remainder = exact - quota
    # stable sort keeps ties in class-index order
    for c in np.argsort(-remainder, kind="stable")[: max(0, total - quota.sum())]:
        quota[c] += 1
    picked = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        picked.append(rng.permutation(members)[: quota[c]])
    return np.sort(np.concatenate(picked)) if picked else np.arange(0)


# ---------------------------------------------------------------- readers


def _read_cifar_bin(files: list[Path], label_bytes: int, channels=3, size=(32, 32)):
    rec = label_bytes + channels * size[0] * size[1]
    images, labels = [], []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % rec:
            raise DataError(f"{f} is not a CIFAR binary batch (size {raw.size} not a multiple of {rec})")
        raw = raw.reshape(-1, rec)
        labels.append(raw[:, label_bytes - 1].astype(np.int64))
        images.append(raw[:, label_bytes:].reshape(-1, channels, *size))
    return np.concatenate(images), np.concatenate(labels)


def _cifar_files(root: Path, split: str) -> tuple[list[Path], int]:
    if (root / "train.bin").exists():  # CIFAR-100 layout: coarse + fine label bytes
        return [root / ("train.bin" if split == "train" else "test.bin")], 2
    if split == "train":
        files = sorted(root.glob("data_batch_*.bin"))
    else:
        files = [root / "test_batch.bin"]
    return files, 1


def _read_imagefolder(root: Path, split: str, spec: DatasetSpec):
    from PIL import Image

    base = root / split if (root / split).is_dir() else root
    classes = sorted(p.name for p in base.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class directories under {base}")
    mode = "L" if spec.channels == 1 else "RGB"
    images, labels = [], []
    for label, name in enumerate(classes):
        for f in sorted((base / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert(mode)
                    if im.size != (spec.image_size[1], spec.image_size[0]):
                        im = im.resize((spec.image_size[1], spec.image_size[0]), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.uint8)
            except OSError as exc:
                raise DataError(f"unreadable image {f}: {exc}") from exc
            images.append(arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1))
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def make_synthetic(
    n: int,
    num_classes: int,
    size: tuple[int, int],
    channels: int,
    seed: int,
    split: str = "train",
) -> tuple[np.ndarray, np.ndarray]:
    """Toy images: a class-specific binary motif pasted at a random spot on noise.

    The motif bank depends only on ``(seed, num_classes, channels)`` so train
    and test splits share classes; placement and background vary by split.
    """
    h, w = size
    p = max(3, min(h, w) // 3)
    bank_rng = np.random.default_rng([seed, num_classes, channels, 7])
    motifs = bank_rng.random((num_classes, p, p)) < 0.5
    colors = 0.55 + 0.45 * bank_rng.random((num_classes, channels))
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = rng.permutation(np.arange(n) % num_classes)
    imgs = 0.25 * rng.random((n, channels, h, w))
    ys = rng.integers(0, h - p + 1, size=n)
    xs = rng.integers(0, w - p + 1, size=n)
    for i in range(n):
        c = labels[i]
        patch = motifs[c][None] * colors[c][:, None, None] + 0.1
        imgs[i, :, ys[i] : ys[i] + p, xs[i] : xs[i] + p] = np.clip(patch, 0.0, 1.0)
    return np.round(imgs * 255).astype(np.uint8), labels.astype(np.int64)


def _read_split(spec: DatasetSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    if spec.format == "synthetic":
        n = spec.num_samples if split == "train" else (spec.test_samples or max(1, spec.num_samples // 5))
        return make_synthetic(n, spec.num_classes, spec.image_size, spec.channels, spec.seed, split)
    if spec.source is None:
        raise DataError(f"dataset {spec.name!r} needs a source path")
    root = Path(spec.source).expanduser()
    if not root.exists():
        raise DataError(f"dataset source does not exist: {root}")
    if spec.format == "cifar-bin":
        files, label_bytes = _cifar_files(root, split)
        missing = [f for f in files if not f.exists()]
        if not files or missing:
            raise DataError(f"missing CIFAR binary batches for split {split!r} under {root}")
        return _read_cifar_bin(files, label_bytes, spec.channels, spec.image_size)
    return _read_imagefolder(root, split, spec)


_STATS_CACHE: dict[tuple, tuple[torch.Tensor, torch.Tensor]] = {}


def _train_stats(spec: DatasetSpec, train_pixels: np.ndarray | None = None):
    key = (spec.format, spec.source, spec.num_classes, spec.image_size, spec.channels, spec.seed, spec.num_samples)
    if key not in _STATS_CACHE:
        if train_pixels is None:
            train_pixels, _ = _read_split(spec, "train")
        x = train_pixels.astype(np.float64) / 255.0
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        std[std == 0] = 1.0
        _STATS_CACHE[key] = (
            torch.as_tensor(mean, dtype=torch.float32),
            torch.as_tensor(std, dtype=torch.float32),
        )
    return _STATS_CACHE[key]


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Load one split. Normalization statistics always come from the train split."""
    pixels, labels = _read_split(spec, spec.split)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise DataError(
            f"labels in {spec.name!r} fall outside [0, {spec.num_classes}) "
            f"(found {labels.min()}..{labels.max()})"
        )
    if pixels.shape[1] != spec.channels or tuple(pixels.shape[-2:]) != spec.image_size:
        raise DataError(
            f"images have shape {pixels.shape[1:]}, dataset config declares "
            f"{(spec.channels, *spec.image_size)}"
        )
    mean, std = _train_stats(spec, pixels if spec.split == "train" else None)
    rng = np.random.default_rng([spec.seed, 11])
    keep = stratified_subset(labels, spec.subset_fraction, spec.num_classes, rng)
    LOGGER.debug("loaded %s/%s: %d of %d samples", spec.name, spec.split, len(keep), len(labels))
    return Dataset(
        spec=spec,
        pixels=torch.as_tensor(pixels[keep]),
        labels=torch.as_tensor(labels[keep]),
        mean=mean,
        std=std,
        indices=keep,
    )


def write_cifar_bin(path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write a CIFAR-10 style binary batch (1 label byte + CHW pixels per record)."""
    rec = np.concatenate([labels.astype(np.uint8)[:, None], pixels.reshape(len(labels), -1)], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rec.astype(np.uint8).tofile(path)

"""Datasets: synthetic two-class images, labelled image directories, stratified splits."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .numerics import RngStream, one_hot

IMAGE_SUFFIXES = {".png", ".pgm"}


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def apply(self, images: torch.Tensor) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=images.dtype)
        std = torch.tensor(self.std, dtype=images.dtype)
        return (images - mean) / std

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


@dataclass(frozen=True)
class Dataset:
    images: torch.Tensor  # (n, H, W, A)
    labels: torch.Tensor  # (n, C) one-hot
    split: str = "all"
    class_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")
        if self.images.dim() != 4:
            raise ValueError("images must be (n, H, W, A)")
        if self.labels.numel():
            ok = bool(((self.labels == 0) | (self.labels == 1)).all()) and bool((self.labels.sum(1) == 1).all())
            if not ok:
                raise ValueError("labels must be one-hot")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def targets(self) -> np.ndarray:
        return self.labels.argmax(dim=1).numpy()

    def subset(self, idx: Sequence[int] | np.ndarray, split: str | None = None) -> "Dataset":
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)

    def norm_stats(self) -> NormStats:
        """Per-channel mean and standard deviation over all pixels of this split."""
        x = self.images.to(torch.float64)
        mean = x.mean(dim=(0, 1, 2))
        std = x.std(dim=(0, 1, 2), unbiased=False).clamp_min(1e-8)
        return NormStats(tuple(mean.tolist()), tuple(std.tolist()))

    def normalized(self, stats: NormStats) -> "Dataset":
        return replace(self, images=stats.apply(self.images))

    def to(self, dtype: torch.dtype) -> "Dataset":
        return replace(self, images=self.images.to(dtype), labels=self.labels.to(dtype))


def _blob(size: int, cy: float, cx: float, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))


def _stripes(size: int, period: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return 0.5 * (1 + np.cos(2 * np.pi * (xx + yy) / period + phase))


def gen_synthetic(n: int, image_size: int = 32, class_sep: float = 1.0, rng: RngStream | None = None,
                  channels: int = 1, dtype: torch.dtype = torch.float32) -> Dataset:
    """Balanced two-class images: class 0 a centred Gaussian blob, class 1 diagonal stripes.

    Each image is ``class_sep * pattern + noise`` with unit-variance pixel noise;
    blob centre/width and stripe period/phase are jittered per image. Class
    counts are ``ceil(n/2)`` and ``floor(n/2)``, interleaved then shuffled.
    """
    if n < 2:
        raise ValueError("need at least two images")
    if class_sep <= 0:
        raise ValueError("class_sep must be positive")
    rng = rng or RngStream(0)
    gen = rng.numpy()
    labels = np.arange(n) % 2
    labels = labels[gen.permutation(n)]
    centre = (image_size - 1) / 2
    imgs = np.empty((n, image_size, image_size, channels))
    for i, lab in enumerate(labels):
        if lab == 0:
            jitter = gen.uniform(-image_size / 16, image_size / 16, size=2)
            width = gen.uniform(image_size / 8, image_size / 5)
            pattern = _blob(image_size, centre + jitter[0], centre + jitter[1], width)
        else:
            period = gen.uniform(image_size / 5, image_size / 3)
            phase = gen.uniform(0, 2 * np.pi)
            pattern = _stripes(image_size, period, phase)
        noise = gen.standard_normal((image_size, image_size, channels))
        imgs[i] = class_sep * pattern[..., None] + noise
    return Dataset(torch.from_numpy(imgs).to(dtype), one_hot(labels, 2, dtype), "all", ("blob", "stripes"))


def _read_image(path: Path, image_size: int, channels: int) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("L" if channels == 1 else "RGB")
            im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr.reshape(image_size, image_size, channels)


def load_dir(path: str | Path, image_size: int, channels: int = 1,
             dtype: torch.dtype = torch.float32) -> Dataset:
    """Load ``<root>/<class_name>/*.png|*.pgm``; classes in lexicographic order, pixels scaled to [0, 1].

    Normalisation is applied later, from training-split statistics.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < 2:
        raise ValueError(f"{root} needs at least two class subdirectories")
    images, labels = [], []
    for c, d in enumerate(class_dirs):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"class directory {d} contains no images")
        for f in files:
            images.append(_read_image(f, image_size, channels))
            labels.append(c)
    x = torch.from_numpy(np.stack(images)).to(dtype)
    return Dataset(x, one_hot(labels, len(class_dirs), dtype), "all", tuple(d.name for d in class_dirs))


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    raw = [total * f for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          rng: RngStream | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Label-stratified train/val/test partition.

    Every class is shuffled and cut by largest-remainder rounding of its own
    count, so per-class proportions stay within one sample of the fractions.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = rng or RngStream(0)
    targets = dataset.targets
    parts: list[list[int]] = [[], [], []]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(targets == c)
        idx = idx[rng.child("split", c).permutation(len(idx))]
        sizes = _largest_remainder(len(idx), fractions)
        start = 0
        for j, s in enumerate(sizes):
            parts[j].extend(idx[start:start + s].tolist())
            start += s
    names = ("train", "val", "test")
    for name, p in zip(names, parts):
        if not p:
            raise ValueError(f"fractions {fractions} leave the {name} split empty")
    return tuple(dataset.subset(sorted(p), name) for name, p in zip(names, parts))  # type: ignore[return-value]

"""Datasets, class-incremental task streams and training augmentation.

All images live in [0, 1] pixel space with layout ``[N, C, H, W]``; any
per-channel standardization happens inside the model.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import InvalidArgument, InvalidSplit


@dataclass
class DatasetHandle:
    name: str
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.split not in ("train", "test"):
            raise InvalidArgument(f"unknown split {self.split!r}")
        if self.images.ndim != 4:
            raise InvalidArgument(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InvalidArgument("images and labels differ in length")
        if not np.all(np.isfinite(self.images)):
            raise InvalidArgument("images contain non-finite values")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InvalidArgument("images must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise InvalidArgument("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])


@dataclass
class LabeledDataset:
    """A train/test pair sharing one label space ``[0, n_classes)``."""

    name: str
    train: DatasetHandle
    test: DatasetHandle
    n_classes: int
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        for handle in (self.train, self.test):
            if handle.labels.size and handle.labels.max() >= self.n_classes:
                raise InvalidArgument(f"{handle.split} labels exceed n_classes={self.n_classes}")
        if self.train.image_shape != self.test.image_shape:
            raise InvalidArgument("train and test image shapes differ")

    @property
    def image_shape(self):
        return self.train.image_shape

    def digest(self):
        """Content hash identifying the dataset (used to pair runs for analysis)."""
        h = hashlib.sha256()
        for handle in (self.train, self.test):
            h.update(handle.images.tobytes())
            h.update(handle.labels.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Task:
    task_id: int
    class_ids: tuple
    train_subset: np.ndarray
    test_subset: np.ndarray

    def __repr__(self):
        return (f"Task(task_id={self.task_id}, class_ids={self.class_ids}, "
                f"n_train={len(self.train_subset)}, n_test={len(self.test_subset)})")


@dataclass
class TaskStream:
    dataset: LabeledDataset
    tasks: list
    n_steps: int
    first_task_class_count: int
    class_order_seed: int | None = None

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    @property
    def class_order(self):
        return [c for task in self.tasks for c in task.class_ids]


def split_class_counts(n_classes, n_steps):
    """Classes per task; the first task absorbs the remainder."""
    if n_steps < 1:
        raise InvalidArgument(f"n_steps must be >= 1, got {n_steps}")
    if n_steps > n_classes:
        raise InvalidSplit(f"cannot split {n_classes} classes into {n_steps} tasks")
    base = n_classes // n_steps
    return [n_classes - base * (n_steps - 1)] + [base] * (n_steps - 1)


def make_task_stream(dataset, n_steps, class_order_seed=None):
    """Partition ``dataset`` into ``n_steps`` class-incremental tasks.

    Classes are taken in natural label order unless ``class_order_seed`` is
    given, in which case the order is a seeded permutation.
    """
    n_classes = dataset.n_classes
    counts = split_class_counts(n_classes, n_steps)
    order = np.arange(n_classes)
    if class_order_seed is not None:
        order = np.random.default_rng(class_order_seed).permutation(n_classes)
    tasks = []
    start = 0
    for task_id, count in enumerate(counts):
        classes = tuple(int(c) for c in order[start:start + count])
        start += count
        tasks.append(Task(
            task_id=task_id,
            class_ids=classes,
            train_subset=np.flatnonzero(np.isin(dataset.train.labels, classes)),
            test_subset=np.flatnonzero(np.isin(dataset.test.labels, classes)),
        ))
    return TaskStream(dataset, tasks, n_steps, counts[0], class_order_seed)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    """Per-sample augmentation probabilities and ranges.

    Brightness adds a delta drawn from ``brightness_range``; contrast scales
    deviations from the per-image mean by a factor from ``contrast_range``.
    """

    flip_p: float = 0.5
    crop_p: float = 1.0
    crop_padding: int = 2
    brightness_p: float = 0.5
    brightness_range: tuple = (-0.2, 0.2)
    contrast_p: float = 0.5
    contrast_range: tuple = (0.8, 1.2)

    @classmethod
    def identity(cls):
        return cls(flip_p=0.0, crop_p=0.0, brightness_p=0.0, contrast_p=0.0)


def augment_batch(images, seed, config=AugmentConfig()):
    """Randomly flip, crop, and jitter brightness/contrast; output clipped to [0, 1].

    Accepts a numpy array or a tensor and returns the same type.
    """
    as_numpy = isinstance(images, np.ndarray)
    x = torch.as_tensor(images)
    if not torch.isfinite(x).all():
        raise InvalidArgument("augment_batch received non-finite input")
    x = x.clone()
    n, _, h, w = x.shape
    g = torch.Generator().manual_seed(int(seed))

    def coin(p):
        return torch.rand(n, generator=g) < p

    flip = coin(config.flip_p)
    if flip.any():
        x[flip] = x[flip].flip(-1)

    crop = coin(config.crop_p)
    pad = config.crop_padding
    shifts = torch.randint(0, 2 * pad + 1, (n, 2), generator=g)
    if pad > 0 and crop.any():
        padded = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="replicate")
        for i in torch.nonzero(crop).flatten().tolist():
            dy, dx = shifts[i].tolist()
            x[i] = padded[i, :, dy:dy + h, dx:dx + w]

    bright = coin(config.brightness_p)
    lo, hi = config.brightness_range
    delta = lo + (hi - lo) * torch.rand(n, generator=g, dtype=x.dtype)
    x = x + torch.where(bright, delta, torch.zeros_like(delta)).view(n, 1, 1, 1)

    contrast = coin(config.contrast_p)
    lo, hi = config.contrast_range
    factor = lo + (hi - lo) * torch.rand(n, generator=g, dtype=x.dtype)
    factor = torch.where(contrast, factor, torch.ones_like(factor)).view(n, 1, 1, 1)
    if contrast.any():
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = (x - mean) * factor + mean

    x = x.clamp(0.0, 1.0)
    return x.numpy() if as_numpy else x


# --------------------------------------------------------------------------
# dataset sources


def _smooth_field(rng, shape, sigma):
    noise = rng.standard_normal(shape)
    out = ndimage.gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
    out -= out.mean()
    return out / (out.std() + 1e-8)


def make_synthetic(n_classes=10, image_size=16, channels=3, n_train_per_class=500,
                   n_test_per_class=100, distractor=0.6, noise=0.06, max_shift=2, seed=0):
    """Procedural image classification data for desk-scale experiments.

    Each class owns a smooth colored prototype. A sample is its prototype
    rolled by up to ``max_shift`` pixels, with random contrast, a
    class-independent smooth distractor of weight ``distractor``, and
    additive pixel noise.
    """
    rng = np.random.default_rng(seed)
    shape = (channels, image_size, image_size)
    protos = np.stack([_smooth_field(rng, shape, sigma=image_size / 8) for _ in range(n_classes)])

    def draw(n_per_class, rng):
        n = n_per_class * n_classes
        labels = np.repeat(np.arange(n_classes), n_per_class)
        out = np.empty((n,) + shape, dtype=np.float64)
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        gains = rng.uniform(0.7, 1.3, size=n)
        for i in range(n):
            img = np.roll(protos[labels[i]], tuple(shifts[i]), axis=(1, 2)) * gains[i]
            img += distractor * _smooth_field(rng, shape, sigma=image_size / 6)
            out[i] = img
        out = 0.5 + 0.15 * out + noise * rng.standard_normal(out.shape)
        perm = rng.permutation(n)
        return np.clip(out[perm], 0.0, 1.0).astype(np.float32), labels[perm]

    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    x_tr, y_tr = draw(n_train_per_class, train_rng)
    x_te, y_te = draw(n_test_per_class, test_rng)
    name = f"synthetic{n_classes}-{image_size}px-s{seed}"
    return LabeledDataset(name, DatasetHandle(name, x_tr, y_tr, "train"),
                          DatasetHandle(name, x_te, y_te, "test"), n_classes)


def load_npz(path, name=None):
    """Load ``x_train, y_train, x_test, y_test`` arrays; uint8 images are rescaled."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in ("x_train", "y_train", "x_test", "y_test")}
    for key in ("x_train", "x_test"):
        x = arrays[key]
        arrays[key] = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x
    name = name or Path(path).stem
    n_classes = int(max(arrays["y_train"].max(), arrays["y_test"].max())) + 1
    return LabeledDataset(name,
                          DatasetHandle(name, arrays["x_train"], arrays["y_train"], "train"),
                          DatasetHandle(name, arrays["x_test"], arrays["y_test"], "test"),
                          n_classes)


def load_image_folder(root, manifest="labels.csv", name=None):
    """Load images listed in a CSV manifest with columns ``path,label,split``."""
    from PIL import Image

    root = Path(root)
    rows = {"train": ([], []), "test": ([], [])}
    with open(root / manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            split = row.get("split", "train").strip()
            if split not in rows:
                raise InvalidArgument(f"manifest row has unknown split {split!r}")
            with Image.open(root / row["path"]) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            rows[split][0].append(arr.transpose(2, 0, 1))
            rows[split][1].append(int(row["label"]))
    if not rows["train"][0] or not rows["test"][0]:
        raise InvalidArgument("manifest must list both train and test images")
    name = name or root.name
    n_classes = max(max(rows[s][1]) for s in rows) + 1
    handles = {s: DatasetHandle(name, np.stack(rows[s][0]), np.array(rows[s][1]), s) for s in rows}
    return LabeledDataset(name, handles["train"], handles["test"], n_classes)


def load_cifar10(root):
    """CIFAR-10 from a local torchvision copy (no download is attempted)."""
    from torchvision.datasets import CIFAR10

    splits = {}
    for split in ("train", "test"):
        ds = CIFAR10(root=str(root), train=split == "train", download=False)
        x = ds.data.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
        splits[split] = DatasetHandle("cifar10", x, np.asarray(ds.targets), split)
    return LabeledDataset("cifar10", splits["train"], splits["test"], 10)


def load_dataset(spec):
    """Build a dataset from a config mapping with a ``kind`` key."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "synthetic":
        ds = make_synthetic(**spec)
    elif kind == "npz":
        ds = load_npz(spec["path"], spec.get("name"))
    elif kind == "image_folder":
        ds = load_image_folder(spec["path"], spec.get("manifest", "labels.csv"), spec.get("name"))
    elif kind == "cifar10":
        ds = load_cifar10(spec["path"])
    else:
        raise InvalidArgument(f"unknown dataset kind {kind!r}")
    ds.spec = {"kind": kind, **spec}
    return ds


def subset_indices(n, size, seed):
    """Seeded sorted subset of ``range(n)`` shared by every compared model."""
    size = min(size, n)
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))


def dataset_manifest(ds):
    return json.dumps({"name": ds.name, "n_classes": ds.n_classes, "digest": ds.digest()})

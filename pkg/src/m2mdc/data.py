"""Datasets: CIFAR-10 binary ingestion and a seeded synthetic image task."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

CIFAR_RECORD = 3073
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
SYNTH_MEAN = (0.5, 0.5, 0.5)
SYNTH_STD = (0.25, 0.25, 0.25)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N,3,H,W] float32, normalized
    labels: np.ndarray  # [N] int64
    num_classes: int
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)


def normalize(images01: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((images01.astype(np.float32) - m) / s).astype(np.float32)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def parse_cifar10_records(buf: bytes, source: str = "<bytes>"):
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise DataError(
            f"{source}: truncated record at byte offset {whole * CIFAR_RECORD} "
            f"({len(buf)} bytes is not a multiple of {CIFAR_RECORD})"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{source}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def ingest_cifar10(path, split: str = "train", mean=CIFAR10_MEAN, std=CIFAR10_STD, limit: Optional[int] = None) -> Dataset:
    """Load CIFAR-10 binary batches.

    ``path`` is either one ``.bin`` file or the ``cifar-10-batches-bin``
    directory (``data_batch_1..5.bin`` for train, ``test_batch.bin`` for test).
    """
    if os.path.isdir(path):
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        files = [os.path.join(path, n) for n in names]
    else:
        files = [path]
    pix, lab = [], []
    for f in files:
        with open(f, "rb") as fh:
            p, l = parse_cifar10_records(fh.read(), f)
        pix.append(p)
        lab.append(l)
    pixels = np.concatenate(pix)
    labels = np.concatenate(lab)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    images = normalize(pixels.astype(np.float32) / 255.0, mean, std)
    return Dataset(images, labels, 10, f"cifar10-{split}")


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------


def class_templates(seed: int, classes: int, size: int = 32) -> np.ndarray:
    """Per-class [3,size,size] patterns in [0,1]: a colour cast, an oriented
    grating and a Gaussian blob at a class-specific position."""
    rng = np.random.default_rng([seed, 7])
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((classes, 3, size, size), dtype=np.float64)
    for c in range(classes):
        color = rng.uniform(-0.15, 0.15, size=3)
        theta = np.pi * c / classes + rng.uniform(0, np.pi / (2 * classes))
        freq = rng.uniform(0.15, 0.45)
        grating = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
        gw = rng.uniform(-1, 1, size=3)
        cy, cx = rng.uniform(6, size - 6, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 4.0**2))
        bw = rng.uniform(-1, 1, size=3)
        for ch in range(3):
            out[c, ch] = 0.5 + color[ch] + 0.12 * gw[ch] * grating + 0.3 * bw[ch] * blob
    return np.clip(out, 0.0, 1.0)


def synth_dataset(
    seed,
    classes: int = 10,
    samples: int = 2000,
    noise: float = 0.35,
    mixture: float = 0.5,
    mean=SYNTH_MEAN,
    std=SYNTH_STD,
    size: int = 32,
    template_seed: Optional[int] = None,
) -> Dataset:
    """Deterministic synthetic classification task.

    Each image is its class template partially mixed with a random other
    class (weight up to ``mixture * noise``), plus a random brightness shift
    and pixel noise, both scaled by ``noise``. Labels are exactly balanced.
    ``seed`` may be an int or a sequence of ints; ``template_seed`` lets
    train/test splits share templates while drawing different samples.
    """
    if classes < 2:
        raise DataError("need at least 2 classes")
    if template_seed is None:
        template_seed = int(np.atleast_1d(seed)[0])
    tpl = class_templates(template_seed, classes, size)
    rng = np.random.default_rng([int(v) for v in np.atleast_1d(seed)] + [11])
    labels = np.arange(samples, dtype=np.int64) % classes
    labels = labels[rng.permutation(samples)]
    others = (labels + rng.integers(1, classes, size=samples)) % classes
    mix = (mixture * noise * rng.uniform(0, 1, size=samples)).reshape(-1, 1, 1, 1)
    shift = (0.5 * noise * rng.uniform(-0.2, 0.2, size=(samples, 1, 1, 1)))
    img = (1 - mix) * tpl[labels] + mix * tpl[others] + shift
    img = img + noise * rng.normal(0.0, 0.5, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Dataset(normalize(img.astype(np.float32), mean, std), labels, classes, f"synthetic-{template_seed}")


def nearest_template_accuracy(ds: Dataset, templates: np.ndarray, mean=SYNTH_MEAN, std=SYNTH_STD) -> float:
    t = normalize(templates.astype(np.float32), mean, std).reshape(len(templates), -1)
    x = ds.images.reshape(len(ds), -1)
    d = ((x[:, None, :] - t[None, :, :]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == ds.labels).mean())


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def iterate_batches(
    ds: Dataset,
    batch_size: int,
    shuffle_rng: Optional[np.random.Generator] = None,
    flip_rng: Optional[np.random.Generator] = None,
) -> Iterator[tuple]:
    """Yield ``(images, labels, indices, flipped)``; flips are horizontal, p=0.5."""
    n = len(ds)
    order = shuffle_rng.permutation(n) if shuffle_rng is not None else np.arange(n)
    for s in range(0, n, batch_size):
        idx = order[s : s + batch_size]
        x = ds.images[idx]
        if flip_rng is not None:
            flipped = flip_rng.random(len(idx)) < 0.5
            if flipped.any():
                x = x.copy()
                x[flipped] = x[flipped][..., ::-1]
        else:
            flipped = np.zeros(len(idx), dtype=bool)
        yield x, ds.labels[idx], idx, flipped
